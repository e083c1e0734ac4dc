"""Character decoder: 2-d spatial attention over the fused feature map,
an LSTM state, and a two-layer prediction head.

Each decoding step: the previous attention map is encoded by one 7x7 conv;
a relevancy score is computed at every grid location from the previous
hidden state, that encoding, and the local feature vector; a softmax over
all locations yields the attention map; the context vector is the
attention-weighted sum of feature vectors; the LSTM consumes the previous
output one-hot concatenated with the context vector; and the head emits a
distribution over the character classes (letters + digits + eos).

Training uses teacher forcing on the negative log-likelihood of the label
sequence including the eos step. Inference is greedy with the predicted
symbol fed back, optionally snapped to a lexicon by edit distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, LstmParams, Tensor
from .distance import edit_distance
from .encoder import scaled_width

ALPHANUMERIC = "abcdefghijklmnopqrstuvwxyz0123456789"
EOS = "<eos>"


class InputError(ValueError):
    """Caller-supplied data violates a precondition."""


class Charset:
    """Ordered case-insensitive symbols plus a trailing eos class."""

    def __init__(self, symbols: str = ALPHANUMERIC):
        symbols = symbols.lower()
        if len(set(symbols)) != len(symbols):
            raise InputError("charset symbols must be unique")
        for ch in symbols:
            if ch not in ALPHANUMERIC:
                raise InputError(f"unsupported charset symbol {ch!r}")
        self.symbols = symbols
        self.index = {ch: i for i, ch in enumerate(symbols)}

    @property
    def size(self) -> int:
        return len(self.symbols) + 1

    @property
    def eos_index(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        ids = []
        for ch in text.lower():
            if ch not in self.index:
                raise InputError(f"character {ch!r} not in charset")
            ids.append(self.index[ch])
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == self.eos_index:
                break
            out.append(self.symbols[i])
        return "".join(out)

    @staticmethod
    def digits() -> "Charset":
        return Charset("0123456789")

    @staticmethod
    def full() -> "Charset":
        return Charset(ALPHANUMERIC)


class DecoderParams:
    """All learned matrices of the decoder.

    Base extents (hidden state 256, relevancy dimension 256, 32 channels in
    the attention-map conv, 7x7 kernel) scale with the same width
    multiplier as the encoder.
    """

    def __init__(self, feat_channels: int, charset_size: int, multiplier: float = 1.0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feat_channels = feat_channels
        self.charset_size = charset_size
        self.hidden = scaled_width(256, multiplier)
        self.attn_dim = scaled_width(256, multiplier)
        self.map_channels = scaled_width(32, multiplier)

        def uniform(shape):
            bound = 1.0 / np.sqrt(shape[-1])
            return ad.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))

        # 7x7 conv over the previous attention map, padding 3 keeps the extent
        fan = 49
        self.map_kernel = ad.parameter(
            rng.normal(0.0, np.sqrt(2.0 / fan), size=(self.map_channels, 1, 7, 7)).astype(dtype))
        self.hidden_proj = uniform((self.attn_dim, self.hidden))        # on h^{t-1}
        self.map_proj = uniform((self.attn_dim, self.map_channels))    # on encoded map
        self.feature_proj = uniform((self.attn_dim, feat_channels))    # on F(i,j)
        self.score_vec = uniform((1, self.attn_dim))
        self.lstm = LstmParams(charset_size + feat_channels, self.hidden, rng, dtype)
        self.context_proj = uniform((self.hidden, feat_channels))
        self.out_proj = uniform((charset_size, 2 * self.hidden))

    def named_parameters(self, prefix: str = "decoder"):
        yield f"{prefix}/map_kernel", self.map_kernel
        yield f"{prefix}/hidden_proj", self.hidden_proj
        yield f"{prefix}/map_proj", self.map_proj
        yield f"{prefix}/feature_proj", self.feature_proj
        yield f"{prefix}/score_vec", self.score_vec
        yield from self.lstm.named(f"{prefix}/lstm")
        yield f"{prefix}/context_proj", self.context_proj
        yield f"{prefix}/out_proj", self.out_proj


@dataclass
class DecodeState:
    """Recurrent state between decoding steps.

    The initial attention map is all zeros; afterwards every map is a
    distribution over grid locations.
    """

    h: Tensor
    c: Tensor
    o_prev: Tensor       # [B, K] one-hot of the previous symbol (zeros at t=0)
    alpha_prev: Tensor   # [B, 1, H', W']


def initial_state(batch: int, grid_hw: tuple[int, int], params: DecoderParams,
                  dtype=np.float32) -> DecodeState:
    gh, gw = grid_hw
    z = lambda *s: ad.constant(np.zeros(s, dtype=dtype))
    return DecodeState(h=z(batch, params.hidden), c=z(batch, params.hidden),
                       o_prev=z(batch, params.charset_size), alpha_prev=z(batch, 1, gh, gw))


@dataclass
class SpatialAttentionTrace:
    maps: list[np.ndarray]  # one [H', W'] distribution per step


# ---------------------------------------------------------------------------
# Attention pieces

def encode_prev_attention(alpha_prev: Tensor, params: DecoderParams) -> Tensor:
    """7x7 conv (pad 3, extent preserving) over the previous attention map."""
    return ad.conv2d(alpha_prev, params.map_kernel, stride=1, pad=3)


def relevancy_scores(h_prev: Tensor, a_prev: Tensor, feat: Tensor,
                     params: DecoderParams) -> Tensor:
    """score(i,j) = score_vec . tanh(hidden_proj h + map_proj a(i,j) + feature_proj F(i,j))"""
    b = feat.data.shape[0]
    ua = ad.conv2d(a_prev, ad.reshape(params.map_proj, params.map_proj.data.shape + (1, 1)))
    vf = ad.conv2d(feat, ad.reshape(params.feature_proj, params.feature_proj.data.shape + (1, 1)))
    mh = ad.reshape(ad.linear(h_prev, params.hidden_proj), (b, params.attn_dim, 1, 1))
    t = ad.tanh(ad.add(ad.add(ua, vf), mh))
    r = ad.conv2d(t, ad.reshape(params.score_vec, (1, params.attn_dim, 1, 1)))
    return r  # [B, 1, H', W']


def spatial_attention(scores: Tensor) -> Tensor:
    """Softmax over all grid locations jointly."""
    b, _, gh, gw = scores.data.shape
    flat = ad.reshape(scores, (b, gh * gw))
    return ad.reshape(ad.softmax(flat, axis=1), (b, 1, gh, gw))


def context_vector(alpha: Tensor, feat: Tensor) -> Tensor:
    """Attention-weighted sum of the feature vectors: z = sum_ij alpha(i,j) F(i,j)."""
    return ad.reduce_sum(ad.mul(alpha, feat), axis=(2, 3))


def decode_step(state: DecodeState, feat: Tensor, params: DecoderParams):
    """One decoding step. Returns (probs, logits, new_state, alpha)."""
    a_prev = encode_prev_attention(state.alpha_prev, params)
    r = relevancy_scores(state.h, a_prev, feat, params)
    alpha = spatial_attention(r)
    z = context_vector(alpha, feat)
    x = ad.concat([state.o_prev, z], axis=1)
    h, c = ad.lstm_step(x, state.h, state.c, params.lstm)
    u = ad.tanh(ad.linear(z, params.context_proj))
    logits = ad.linear(ad.concat([h, u], axis=1), params.out_proj)
    probs = ad.softmax(logits, axis=1)
    new_state = DecodeState(h=h, c=c, o_prev=state.o_prev, alpha_prev=alpha)
    return probs, logits, new_state, alpha


def _one_hot(indices: np.ndarray, size: int, dtype) -> np.ndarray:
    out = np.zeros((len(indices), size), dtype=dtype)
    out[np.arange(len(indices)), indices] = 1
    return out


def teacher_forced_nll(feat: Tensor, labels: Sequence[Sequence[int]], params: DecoderParams,
                       trace: bool = False):
    """Summed per-sample negative log-likelihood under teacher forcing.

    The eos step is appended to every label. Returns (per_sample, traces)
    where per_sample is a [B] tensor of NLL sums; traces is a list of
    SpatialAttentionTrace (or None when tracing is off).
    """
    b, _, gh, gw = feat.data.shape
    if len(labels) != b:
        raise DimensionError("one label sequence per batch row required")
    dtype = feat.data.dtype
    eos = params.charset_size - 1
    lengths = np.array([len(l) for l in labels])
    t_max = int(lengths.max())
    padded = np.full((b, t_max + 1), eos, dtype=np.int64)
    for i, l in enumerate(labels):
        padded[i, :len(l)] = l

    state = initial_state(b, (gh, gw), params, dtype)
    total = None
    traces = [SpatialAttentionTrace(maps=[]) for _ in range(b)] if trace else None
    for t in range(t_max + 1):
        if t > 0:
            prev = np.where(t - 1 < lengths, padded[:, t - 1], eos)
            state.o_prev = ad.constant(_one_hot(prev, params.charset_size, dtype))
        _, logits, state, alpha = decode_step(state, feat, params)
        logp = ad.pick(ad.log_softmax(logits, axis=1), padded[:, t])
        mask = (t <= lengths).astype(dtype)  # each sample contributes len+1 steps
        step_nll = ad.mul_const(ad.neg(logp), mask)
        total = step_nll if total is None else ad.add(total, step_nll)
        if trace:
            for i in range(b):
                if mask[i]:
                    traces[i].maps.append(alpha.data[i, 0].copy())
    return total, traces


def sequence_nll(feat: Tensor, label: Sequence[int], params: DecoderParams) -> Tensor:
    """Teacher-forced NLL of one label sequence (eos appended internally)."""
    eos = params.charset_size - 1
    for y in label:
        if not 0 <= y < params.charset_size - 1:
            raise InputError(f"label id {y} outside charset")
    per_sample, _ = teacher_forced_nll(feat, [list(label)], params)
    return ad.reduce_sum(per_sample)


@dataclass
class GreedyResult:
    text: str
    log_prob: float
    trace: SpatialAttentionTrace
    truncated: bool


def greedy_decode(feat: Tensor, params: DecoderParams, charset: Charset,
                  max_steps: int) -> GreedyResult:
    """Emit the argmax symbol per step, feeding it back, until eos."""
    if max_steps < 1:
        raise InputError("max_steps must be >= 1")
    b = feat.data.shape[0]
    if b != 1:
        raise DimensionError("greedy_decode runs one sequence at a time")
    dtype = feat.data.dtype
    state = initial_state(1, feat.data.shape[2:], params, dtype)
    ids: list[int] = []
    log_prob = 0.0
    trace = SpatialAttentionTrace(maps=[])
    truncated = True
    for t in range(max_steps):
        if t > 0:
            state.o_prev = ad.constant(_one_hot(np.array([ids[-1]]), params.charset_size, dtype))
        probs, logits, state, alpha = decode_step(state, feat, params)
        trace.maps.append(alpha.data[0, 0].copy())
        sym = int(probs.data[0].argmax())
        shifted = logits.data[0] - logits.data[0].max()
        log_prob += float(shifted[sym] - np.log(np.exp(shifted).sum()))
        if sym == charset.eos_index:
            truncated = False
            break
        ids.append(sym)
    return GreedyResult(text=charset.decode(ids), log_prob=log_prob, trace=trace,
                        truncated=truncated)


# ---------------------------------------------------------------------------
# Lexicon-constrained decoding

class Lexicon:
    """Word list loaded from UTF-8 text, one word per line, lowercased."""

    def __init__(self, words: Sequence[str]):
        seen = set()
        self.words = []
        for w in words:
            w = w.strip().lower()
            if w and w not in seen:
                seen.add(w)
                self.words.append(w)
        if not self.words:
            raise InputError("lexicon is empty")

    @staticmethod
    def load(path) -> "Lexicon":
        with open(path, encoding="utf-8") as fh:
            return Lexicon(fh.readlines())

    def __len__(self):
        return len(self.words)

    def __contains__(self, word: str):
        return word.lower() in set(self.words)


def lexicon_decode(prediction: str, log_prob: float, lexicon: Lexicon,
                   rescore: Callable[[str], float]) -> str:
    """Snap a prediction to the closest lexicon word.

    Among the words at minimal edit distance the one with the highest
    model log-probability wins; `rescore` evaluates a candidate word
    teacher-forced. A distance-0 hit short-circuits with the prediction's
    own log-probability.
    """
    dists = [edit_distance(prediction, w) for w in lexicon.words]
    best = min(dists)
    candidates = [w for w, d in zip(lexicon.words, dists) if d == best]
    if len(candidates) == 1:
        return candidates[0]
    scored = [(rescore(w) if w != prediction.lower() else log_prob, w) for w in candidates]
    return max(scored, key=lambda t: t[0])[1]
