"""Full recognizer: encoder + decoder bundled with their configuration.

The model is reconstructable from a checkpoint alone: pyramid scales,
width multiplier, charset and decoding horizon ride along as meta tensors
next to the parameters and batch-norm buffers.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tape, Tensor
from .decoder import (Charset, DecoderParams, GreedyResult, Lexicon,
                      greedy_decode, lexicon_decode, sequence_nll,
                      teacher_forced_nll)
from .encoder import EncoderParams, PyramidSpec, ScaleAttentionTrace, encode
from .synth import LabeledSample


class Recognizer:
    def __init__(self, spec: PyramidSpec, charset: Charset, multiplier: float = 1.0,
                 seed: int = 0, dtype=np.float32, max_steps: int = 17):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.charset = charset
        self.multiplier = multiplier
        self.max_steps = max_steps
        self.dtype = dtype
        self.encoder = EncoderParams(spec, multiplier, rng, dtype)
        self.decoder = DecoderParams(self.encoder.out_channels, charset.size,
                                     multiplier, rng, dtype)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(list(self.encoder.named_parameters()) + list(self.decoder.named_parameters()))

    def named_buffers(self) -> dict[str, np.ndarray]:
        return dict(self.encoder.named_buffers())

    def param_count(self) -> int:
        return sum(int(np.prod(t.data.shape)) for t in self.named_parameters().values())

    def zero_grads(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # -- forward passes -----------------------------------------------------

    def encode_images(self, images: Sequence[np.ndarray], mode: str = "train"):
        return encode(images, self.encoder, self.spec, mode)

    def batch_loss(self, samples: Sequence[LabeledSample], mode: str = "train"):
        """Mean per-sample summed NLL over a minibatch.

        Returns (loss tensor, per-sample NLL array, scale-attention trace).
        """
        images = [s.image for s in samples]
        labels = [self.charset.encode(s.label) for s in samples]
        feat, trace = self.encode_images(images, mode)
        per_sample, _ = teacher_forced_nll(feat, labels, self.decoder)
        loss = ad.scale(ad.reduce_sum(per_sample), 1.0 / len(samples))
        return loss, per_sample.data.copy(), trace

    def recognize(self, image: np.ndarray, max_steps: Optional[int] = None):
        """Greedy decoding of one image in eval mode (no gradients)."""
        result, trace, _ = self.decode_image(image, max_steps)
        return result, trace

    def decode_image(self, image: np.ndarray, max_steps: Optional[int] = None,
                     lexicon: Optional[Lexicon] = None):
        """Encode once, decode greedily, optionally snap to a lexicon.

        Lexicon rescoring reuses the encoded features, so each candidate
        costs only a decoder pass. Returns (greedy result, scale trace,
        constrained word or None).
        """
        steps = max_steps if max_steps is not None else self.max_steps
        feat, trace = self.encode_images([image], mode="eval")
        result = greedy_decode(feat, self.decoder, self.charset, steps)
        constrained = None
        if lexicon is not None:
            def rescore(word: str) -> float:
                nll = sequence_nll(feat, self.charset.encode(word), self.decoder)
                return -float(nll.data)

            constrained = lexicon_decode(result.text, result.log_prob, lexicon, rescore)
        return result, trace, constrained

    def label_log_prob(self, image: np.ndarray, word: str) -> float:
        """Teacher-forced log-probability of `word` for this image."""
        feat, _ = self.encode_images([image], mode="eval")
        nll = sequence_nll(feat, self.charset.encode(word), self.decoder)
        return -float(nll.data)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        tensors: dict[str, np.ndarray] = {}
        tensors["meta/scales"] = np.array(self.spec.scales, dtype=np.float32)
        tensors["meta/common_grid"] = np.array(self.spec.common_grid, dtype=np.float32)
        tensors["meta/multiplier"] = np.array([self.multiplier], dtype=np.float32)
        tensors["meta/charset_ids"] = np.array(
            [Charset.full().index[c] for c in self.charset.symbols], dtype=np.float32)
        tensors["meta/max_steps"] = np.array([self.max_steps], dtype=np.float32)
        for name, t in self.named_parameters().items():
            tensors[name] = t.data
        for name, arr in self.named_buffers().items():
            tensors[name] = arr
        checkpoint.save_tensors(path, tensors)

    @staticmethod
    def load(path) -> "Recognizer":
        tensors = checkpoint.load_tensors(path)
        scales = [(int(w), int(h)) for w, h in tensors["meta/scales"]]
        grid = tuple(int(v) for v in tensors["meta/common_grid"])
        spec = PyramidSpec(scales=tuple(scales), common_grid=grid)
        full = Charset.full().symbols
        symbols = "".join(full[int(i)] for i in tensors["meta/charset_ids"])
        model = Recognizer(spec, Charset(symbols),
                           multiplier=float(tensors["meta/multiplier"][0]),
                           max_steps=int(tensors["meta/max_steps"][0]))
        params = model.named_parameters()
        for name, t in params.items():
            if name not in tensors:
                raise ValueError(f"checkpoint missing tensor {name}")
            if tensors[name].shape != t.data.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                                 f"expected {t.data.shape}")
            t.data = tensors[name].astype(model.dtype)
        for name, arr in model.named_buffers().items():
            arr[:] = tensors[name]
        return model
