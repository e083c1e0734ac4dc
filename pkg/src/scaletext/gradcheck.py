"""Finite-difference verification of every differentiable operation and of
the end-to-end model gradient.

All checks run in float64 with central differences of step 1e-4. The
reported error per coordinate is |analytic - numeric| / max(1, |analytic|,
|numeric|). Per-op tolerance is 1e-4; compositions that pass through batch
normalization (the end-to-end models) get 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .decoder import Charset
from .encoder import PyramidSpec
from .model import Recognizer
from .synth import GenSpec, LabeledSample, default_font, render_word

STEP = 1e-4
OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    coords_checked: int
    kink_fallbacks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


# A coordinate whose base point sits within the primary step of a ReLU sign
# change or a pooling argmax switch makes the difference quotient invalid as
# a derivative estimate there, so such coordinates are re-verified at the
# smaller steps. A wrong gradient fails at every step.
FALLBACK_STEPS = (1e-5, 1e-6)


def check_gradients(loss_fn: Callable[[], Tensor], params: list[Tensor],
                    sample_per_tensor: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None,
                    tolerance: float = OP_TOL) -> tuple[float, int, int]:
    """Compare tape gradients of `loss_fn` against central differences.

    Wiggles every coordinate of every tensor in `params` (or a random
    subset of `sample_per_tensor` coordinates each) with the primary step;
    coordinates exceeding the tolerance there are retried at the fallback
    steps. Returns (max relative error, coordinates checked, how many
    needed a fallback step).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        ad.backward(tape, loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def numeric_at(flat, idx, h):
        orig = flat[idx]
        flat[idx] = orig + h
        hi = float(loss_fn().data)
        flat[idx] = orig - h
        lo = float(loss_fn().data)
        flat[idx] = orig
        return (hi - lo) / (2 * h)

    worst = 0.0
    checked = 0
    fallbacks = 0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.size
        if sample_per_tensor is None or sample_per_tensor >= n:
            coords: Iterable[int] = range(n)
        else:
            coords = rng.choice(n, size=sample_per_tensor, replace=False)
        gflat = g.reshape(-1)
        for idx in coords:
            analytic = float(gflat[idx])
            err = rel_err(analytic, numeric_at(flat, idx, STEP))
            if err > tolerance:
                for h in FALLBACK_STEPS:
                    retry = rel_err(analytic, numeric_at(flat, idx, h))
                    if retry <= tolerance:
                        fallbacks += 1
                        err = retry
                        break
                    err = min(err, retry)
            worst = max(worst, err)
            checked += 1
    return worst, checked, fallbacks


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.reduce_sum(ad.mul_const(out, weights))


def _randn(rng, *shape):
    return ad.parameter(rng.normal(size=shape))


# ---------------------------------------------------------------------------
# Per-op checks. Each builds small float64 inputs and reduces the op output
# to a scalar through a fixed random weighting so gradients stay generic.

def _check_conv2d() -> CheckResult:
    rng = np.random.default_rng(11)
    x = _randn(rng, 2, 3, 6, 5)
    k = _randn(rng, 4, 3, 3, 3)
    w = rng.normal(size=(2, 4, 6, 5))
    err, n, f = check_gradients(lambda: _weighted_sum(ad.conv2d(x, k, stride=1, pad=1), w), [x, k])

    x2 = _randn(rng, 1, 2, 5, 4)
    k2 = _randn(rng, 3, 2, 1, 1)
    w2 = rng.normal(size=(1, 3, 5, 4))
    err2, n2, f2 = check_gradients(lambda: _weighted_sum(ad.conv2d(x2, k2), w2), [x2, k2])
    return CheckResult("conv2d", max(err, err2), OP_TOL, n + n2, f + f2)


def _check_maxpool() -> CheckResult:
    rng = np.random.default_rng(5)
    # spread values so no window has near-ties the FD step could flip
    vals = rng.permutation(2 * 3 * 4 * 4).astype(np.float64).reshape(2, 3, 4, 4)
    x = ad.parameter(vals * 0.1)
    w = rng.normal(size=(2, 3, 2, 2))
    err, n, f = check_gradients(lambda: _weighted_sum(ad.maxpool2x2(x), w), [x])
    return CheckResult("maxpool2x2", err, OP_TOL, n, f)


def _check_batch_norm() -> CheckResult:
    rng = np.random.default_rng(7)
    worst = 0.0
    total = 0
    falls = 0
    for mode in ("train", "eval"):
        x = _randn(rng, 2, 3, 4, 4)
        gamma = ad.parameter(rng.uniform(0.5, 1.5, size=3))
        beta = _randn(rng, 3)
        stats = ad.RunningStats(3, dtype=np.float64)
        stats.mean[:] = rng.normal(size=3)
        stats.var[:] = rng.uniform(0.5, 2.0, size=3)
        w = rng.normal(size=(2, 3, 4, 4))
        err, n, f = check_gradients(
            lambda: _weighted_sum(ad.batch_norm(x, gamma, beta, stats, mode), w),
            [x, gamma, beta])
        worst = max(worst, err)
        total += n
        falls += f
    return CheckResult("batch_norm", worst, OP_TOL, total, falls)


def _check_linear() -> CheckResult:
    rng = np.random.default_rng(3)
    x = _randn(rng, 4, 5)
    w = _randn(rng, 3, 5)
    wt = rng.normal(size=(4, 3))
    err, n, f = check_gradients(lambda: _weighted_sum(ad.linear(x, w), wt), [x, w])
    return CheckResult("linear", err, OP_TOL, n, f)


def _check_activations() -> CheckResult:
    rng = np.random.default_rng(13)
    worst = 0.0
    total = 0
    falls = 0
    for kind in ("relu", "tanh", "sigmoid"):
        base = rng.normal(size=(3, 7))
        if kind == "relu":  # keep inputs away from the kink at 0
            base = np.where(np.abs(base) < 0.1, base + 0.5 * np.sign(base + 1e-12), base)
        x = ad.parameter(base)
        w = rng.normal(size=(3, 7))
        err, n, f = check_gradients(lambda: _weighted_sum(ad.activation(x, kind), w), [x])
        worst = max(worst, err)
        total += n
        falls += f
    return CheckResult("activation", worst, OP_TOL, total, falls)


def _check_softmax() -> CheckResult:
    rng = np.random.default_rng(17)
    worst = 0.0
    total = 0
    falls = 0
    for fn in (ad.softmax, ad.log_softmax):
        x = _randn(rng, 4, 6)
        w = rng.normal(size=(4, 6))
        err, n, f = check_gradients(lambda: _weighted_sum(fn(x, axis=1), w), [x])
        worst = max(worst, err)
        total += n
        falls += f
    return CheckResult("softmax", worst, OP_TOL, total, falls)


def _check_bilinear_resize() -> CheckResult:
    rng = np.random.default_rng(19)
    worst = 0.0
    total = 0
    falls = 0
    for out_hw in ((8, 24), (4, 3), (6, 8)):
        x = _randn(rng, 1, 2, 6, 8)
        w = rng.normal(size=(1, 2) + out_hw)
        err, n, f = check_gradients(
            lambda: _weighted_sum(ad.bilinear_resize(x, *out_hw), w), [x])
        worst = max(worst, err)
        total += n
        falls += f
    return CheckResult("bilinear_resize", worst, OP_TOL, total, falls)


def _check_lstm_step() -> CheckResult:
    rng = np.random.default_rng(23)
    params = ad.LstmParams(3, 4, rng, dtype=np.float64)
    x = _randn(rng, 2, 3)
    h0 = _randn(rng, 2, 4)
    c0 = _randn(rng, 2, 4)
    wh = rng.normal(size=(2, 4))
    wc = rng.normal(size=(2, 4))

    def loss():
        h, c = ad.lstm_step(x, h0, c0, params)
        return ad.add(_weighted_sum(h, wh), _weighted_sum(c, wc))

    tensors = [x, h0, c0] + [params.weights[g] for g in params.GATES]
    err, n, f = check_gradients(loss, tensors)
    return CheckResult("lstm_step", err, OP_TOL, n, f)


def _check_elementwise() -> CheckResult:
    rng = np.random.default_rng(29)
    a = _randn(rng, 2, 3, 4)
    b = _randn(rng, 2, 1, 4)  # broadcast
    c = _randn(rng, 2, 3, 4)
    mask = rng.normal(size=(2, 3, 4))
    idx = np.array([1, 3, 0, 2])
    p = _randn(rng, 4, 5)
    w1 = rng.normal(size=(2, 12))
    w2 = rng.normal(size=4)

    def loss():
        t = ad.mul(ad.add(a, b), c)
        t = ad.sub(t, ad.scale(ad.neg(a), 0.7))
        t = ad.mul_const(t, mask)
        s1 = ad.reduce_sum(ad.mul_const(ad.reshape(t, (2, 12)), w1), axis=1)
        cat = ad.concat([p, p], axis=1)
        s2 = ad.mul_const(ad.pick(ad.narrow(cat, 1, 2, 5), idx), w2)
        return ad.add(ad.reduce_sum(s1), ad.reduce_sum(s2))

    err, n, f = check_gradients(loss, [a, b, c, p])
    return CheckResult("elementwise", err, OP_TOL, n, f)


# ---------------------------------------------------------------------------
# End-to-end checks

def _render_digit_sample(text: str, seed: int, height: int):
    spec = GenSpec(lengths={len(text): 1.0}, jitter=(0.7, 0.9), canvas_height=height,
                   noise=0.02, seed=seed, count=1, symbols="0123456789")
    return render_word(text, default_font(), spec, np.random.default_rng(seed))


def _e2e_loss_model(model: Recognizer, image: np.ndarray, label: str):
    sample = LabeledSample(image=image, label=label, char_widths=[1] * len(label))

    def loss():
        value, _, _ = model.batch_loss([sample], mode="train")
        return value
    return loss


def _check_end_to_end_tiny() -> CheckResult:
    """Full model with channels scaled down to 8, every parameter coordinate."""
    spec = PyramidSpec.from_scales([(16, 8), (8, 8)])
    model = Recognizer(spec, Charset.digits(), multiplier=8 / 512, seed=1,
                       dtype=np.float64, max_steps=5)
    sample = _render_digit_sample("37", seed=2, height=8)
    loss = _e2e_loss_model(model, sample.image.astype(np.float64), "37")
    params = list(model.named_parameters().values())
    err, n, f = check_gradients(loss, params, tolerance=END_TO_END_TOL)
    return CheckResult("end_to_end_tiny", err, END_TO_END_TOL, n, f)


def _check_end_to_end_micro() -> CheckResult:
    """Acceptance micro config (multiplier 1/16, {48x32, 24x32}, digits);
    a random slice of coordinates from every parameter tensor."""
    spec = PyramidSpec.from_scales([(48, 32), (24, 32)])
    model = Recognizer(spec, Charset.digits(), multiplier=1 / 16, seed=3,
                       dtype=np.float64, max_steps=7)
    sample = _render_digit_sample("401", seed=4, height=32)
    loss = _e2e_loss_model(model, sample.image.astype(np.float64), "401")
    params = list(model.named_parameters().values())
    err, n, f = check_gradients(loss, params, sample_per_tensor=8,
                                rng=np.random.default_rng(42),
                                tolerance=END_TO_END_TOL)
    return CheckResult("end_to_end_micro", err, END_TO_END_TOL, n, f)


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "conv2d": _check_conv2d,
    "maxpool2x2": _check_maxpool,
    "batch_norm": _check_batch_norm,
    "linear": _check_linear,
    "activation": _check_activations,
    "softmax": _check_softmax,
    "bilinear_resize": _check_bilinear_resize,
    "lstm_step": _check_lstm_step,
    "elementwise": _check_elementwise,
    "end_to_end_tiny": _check_end_to_end_tiny,
    "end_to_end_micro": _check_end_to_end_micro,
}


def run_gradcheck(only: Optional[str] = None) -> list[CheckResult]:
    if only is not None:
        if only not in CHECKS:
            raise KeyError(f"unknown op {only!r}; known: {', '.join(CHECKS)}")
        return [CHECKS[only]()]
    return [fn() for fn in CHECKS.values()]
