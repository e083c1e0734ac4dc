"""Adadelta training, evaluation with length/scale stratification, and the
encoder ablation harness.

Training is serial and fully deterministic under a fixed seed: minibatch
order, parameter init and the update rule have no hidden state beyond the
seeded generators, so identically-seeded runs write bitwise-identical
checkpoints. Evaluation decodes one sample at a time against an immutable
parameter snapshot; the thread-pool path only redistributes who computes
each sample and reduces tallies in sample order, so it matches the serial
path bitwise.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NumericsError, Tape, Tensor
from .decoder import Charset, Lexicon
from .distance import edit_distance  # re-exported: this is the metric's home
from .encoder import PyramidSpec
from .model import Recognizer
from .synth import GenSpec, LabeledSample, generate_dataset

__all__ = [
    "Adadelta", "TrainConfig", "TrainResult", "train", "evaluate",
    "EvalReport", "edit_distance", "AblationConfig", "run_ablation",
]

# scale buckets on mean character width at the 96x32 reference resolution
SCALE_BUCKETS = (("small", 0.0, 8.0), ("medium", 8.0, 16.0), ("large", 16.0, float("inf")))
REFERENCE_WIDTH = 96


class Adadelta:
    """Adadelta update: accumulators E[g^2] and E[dx^2] with decay rho.

        E[g^2]  <- rho E[g^2] + (1 - rho) g^2
        dx      = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
        E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
        x       <- x + dx
    """

    def __init__(self, params: dict[str, Tensor], rho: float = 0.9, eps: float = 1e-6):
        self.params = params
        self.rho = rho
        self.eps = eps
        self.sq_grad = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.sq_delta = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        rho, eps = self.rho, self.eps
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if g.shape != t.data.shape:
                raise DimensionError(f"gradient shape mismatch for {name}")
            eg = self.sq_grad[name]
            ed = self.sq_delta[name]
            eg *= rho
            eg += (1 - rho) * g * g
            delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            ed *= rho
            ed += (1 - rho) * delta * delta
            t.data += delta


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    seed: int = 0
    multiplier: float = 1.0 / 16.0
    scales: tuple[tuple[int, int], ...] = ((48, 32), (24, 32))
    charset: str = "0123456789"
    checkpoint_dir: Optional[str] = None
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.steps < 1:
            raise ValueError("step budget must be >= 1")


@dataclass
class TrainResult:
    loss_curve: list[tuple[int, float]]
    final_checkpoint: Optional[str]
    best_checkpoint: Optional[str]
    steps_run: int


def build_model(config: TrainConfig, max_label_len: int) -> Recognizer:
    spec = PyramidSpec.from_scales(config.scales)
    return Recognizer(spec, Charset(config.charset), multiplier=config.multiplier,
                      seed=config.seed, max_steps=2 * max_label_len + 1)


def train(model: Recognizer, samples: Sequence[LabeledSample], config: TrainConfig,
          on_step: Optional[Callable[[int, float], Optional[bool]]] = None) -> TrainResult:
    """Minibatch Adadelta on the sequence NLL.

    Shuffles per epoch under the config seed, records the loss before each
    update, and aborts with a diagnostic on a non-finite loss. `on_step`
    may return True to stop early (e.g. when a target metric is reached).
    """
    if not samples:
        raise ValueError("training requires a nonempty dataset")
    opt = Adadelta(model.named_parameters())
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(samples))
    cursor = 0
    curve: list[tuple[int, float]] = []
    epoch_losses: list[float] = []
    best_epoch_loss = float("inf")
    best_path = final_path = None

    def write(name):
        path = os.path.join(config.checkpoint_dir, name)
        model.save(path)
        return path

    if config.checkpoint_dir:
        os.makedirs(config.checkpoint_dir, exist_ok=True)

    step = 0
    for step in range(config.steps):
        if cursor + config.batch_size > len(samples):
            # epoch boundary: checkpoint, track best epoch mean, reshuffle
            if config.checkpoint_dir and epoch_losses:
                write("last.ckpt")
                mean_loss = float(np.mean(epoch_losses))
                if mean_loss < best_epoch_loss:
                    best_epoch_loss = mean_loss
                    best_path = write("best.ckpt")
            epoch_losses = []
            order = rng.permutation(len(samples))
            cursor = 0
        batch = [samples[i] for i in order[cursor:cursor + config.batch_size]]
        cursor += config.batch_size

        model.zero_grads()
        with Tape() as tape:
            loss, _, _ = model.batch_loss(batch, mode="train")
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericsError(f"non-finite loss at step {step}")
            ad.backward(tape, loss)
        opt.step()
        curve.append((step, value))
        epoch_losses.append(value)
        if on_step is not None and on_step(step, value):
            break

    if config.checkpoint_dir:
        final_path = write("final.ckpt")
        if not best_path:
            best_path = write("best.ckpt")
    return TrainResult(loss_curve=curve, final_checkpoint=final_path,
                       best_checkpoint=best_path, steps_run=step + 1)


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class BucketStat:
    count: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else 0.0


@dataclass
class EvalReport:
    total: int
    correct: int
    mean_norm_edit_distance: float
    by_length: dict[int, BucketStat]
    by_scale: dict[str, BucketStat]
    constrained: Optional["EvalReport"] = None
    predictions: list[str] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def check_accounting(self) -> None:
        assert sum(b.count for b in self.by_length.values()) == self.total
        assert sum(b.count for b in self.by_scale.values()) == self.total
        assert sum(b.correct for b in self.by_length.values()) == self.correct


def reference_char_width(sample: LabeledSample) -> float:
    """Mean rendered character width rescaled to the 96-wide reference."""
    mean_w = float(np.mean(sample.char_widths))
    return mean_w * REFERENCE_WIDTH / sample.image.shape[1]


def scale_bucket(sample: LabeledSample) -> str:
    w = reference_char_width(sample)
    for name, lo, hi in SCALE_BUCKETS:
        if lo <= w < hi or (hi == float("inf") and w >= lo):
            return name
    return SCALE_BUCKETS[-1][0]


def _decode_one(model: Recognizer, sample: LabeledSample, lexicon: Optional[Lexicon],
                max_steps: int):
    result, _, constrained = model.decode_image(sample.image, max_steps=max_steps,
                                                lexicon=lexicon)
    return result.text, constrained


def evaluate(model: Recognizer, samples: Sequence[LabeledSample],
             lexicon: Optional[Lexicon] = None, workers: int = 1,
             max_steps: Optional[int] = None) -> EvalReport:
    """Greedy word accuracy, stratified by label length and character scale.

    A word counts as correct iff the decoded text equals the label exactly
    (case-insensitive). With a lexicon, a constrained sub-report is
    attached. `workers > 1` distributes samples over threads; tallies are
    reduced in sample order either way.
    """
    if not samples:
        raise ValueError("evaluation requires a nonempty dataset")
    steps = max_steps if max_steps is not None else 2 * max(len(s.label) for s in samples) + 1

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            decoded = list(pool.map(lambda s: _decode_one(model, s, lexicon, steps), samples))
    else:
        decoded = [_decode_one(model, s, lexicon, steps) for s in samples]

    def tally(preds: Sequence[str]) -> EvalReport:
        by_length: dict[int, BucketStat] = {}
        by_scale: dict[str, BucketStat] = {name: BucketStat() for name, _, _ in SCALE_BUCKETS}
        correct = 0
        ned = 0.0
        for sample, pred in zip(samples, preds):
            hit = pred.lower() == sample.label.lower()
            correct += hit
            ned += edit_distance(pred, sample.label) / max(len(pred), len(sample.label), 1)
            lb = by_length.setdefault(len(sample.label), BucketStat())
            lb.count += 1
            lb.correct += hit
            sb = by_scale[scale_bucket(sample)]
            sb.count += 1
            sb.correct += hit
        report = EvalReport(total=len(samples), correct=correct,
                            mean_norm_edit_distance=ned / len(samples),
                            by_length=dict(sorted(by_length.items())),
                            by_scale=by_scale, predictions=list(preds))
        report.check_accounting()
        return report

    report = tally([p for p, _ in decoded])
    if lexicon is not None:
        report.constrained = tally([c for _, c in decoded])
    return report


# ---------------------------------------------------------------------------
# Ablation harness

@dataclass
class AblationConfig:
    """Encoder variants trained on one dataset and compared on three splits.

    The defaults reproduce the length/scale imbalance: training words are
    mostly 4-8 characters long over the full 36-symbol charset, so
    single-character images (which fill the whole canvas and get resized
    into giant glyphs) are rare at training time -- too rare to learn 36
    classes at that scale from scratch, but plentiful at matched scales.
    """

    variants: dict[str, tuple[tuple[int, int], ...]] = field(default_factory=lambda: {
        "cnn_96x32": ((96, 32),),
        "multi_24_48_96": ((24, 32), (48, 32), (96, 32)),
    })
    seed: int = 7
    steps: int = 6000
    batch_size: int = 16
    multiplier: float = 1.0 / 16.0
    charset: str = "abcdefghijklmnopqrstuvwxyz0123456789"
    train_count: int = 5000
    # length distribution skewed to 4-8 characters, short words rare
    train_lengths: dict[int, float] = field(default_factory=lambda: {
        1: 0.02, 2: 0.03, 3: 0.05, 4: 0.16, 5: 0.20, 6: 0.20, 7: 0.18, 8: 0.16})
    balanced_count: int = 3200
    single_count: int = 1000
    long_count: int = 2000
    checkpoint_dir: Optional[str] = None


@dataclass
class AblationResult:
    reports: dict[str, dict[str, EvalReport]]  # variant -> split -> report
    loss_curves: dict[str, list[tuple[int, float]]]
    splits: dict[str, list[LabeledSample]]


def ablation_datasets(config: AblationConfig):
    base = dict(jitter=(0.55, 0.95), canvas_height=32, noise=0.05, symbols=config.charset)
    train_set = generate_dataset(GenSpec(lengths=config.train_lengths, seed=config.seed,
                                         count=config.train_count, **base))
    n_lengths = 8
    splits = {
        "balanced": generate_dataset(GenSpec(
            lengths={n: 1 / n_lengths for n in range(1, n_lengths + 1)},
            seed=config.seed + 1, count=config.balanced_count, **base)),
        "single_char": generate_dataset(GenSpec(
            lengths={1: 1.0}, seed=config.seed + 2, count=config.single_count, **base)),
        "long_words": generate_dataset(GenSpec(
            lengths={7: 0.5, 8: 0.5}, seed=config.seed + 3, count=config.long_count, **base)),
    }
    return train_set, splits


def run_ablation(config: AblationConfig,
                 on_progress: Optional[Callable[[str, str], None]] = None) -> AblationResult:
    """Train every encoder variant on the identical dataset and seed, then
    evaluate all of them on the shared splits."""
    if len(config.variants) < 2:
        raise ValueError("ablation needs at least two encoder variants")
    train_set, splits = ablation_datasets(config)
    reports: dict[str, dict[str, EvalReport]] = {}
    curves: dict[str, list[tuple[int, float]]] = {}
    for name, scales in config.variants.items():
        if on_progress:
            on_progress(name, "train")
        tc = TrainConfig(steps=config.steps, batch_size=config.batch_size, seed=config.seed,
                         multiplier=config.multiplier, scales=tuple(scales),
                         charset=config.charset,
                         checkpoint_dir=(os.path.join(config.checkpoint_dir, name)
                                         if config.checkpoint_dir else None))
        model = build_model(tc, max_label_len=max(len(s.label) for s in train_set))
        result = train(model, train_set, tc)
        curves[name] = result.loss_curve
        reports[name] = {}
        for split_name, split in splits.items():
            if on_progress:
                on_progress(name, f"eval:{split_name}")
            reports[name][split_name] = evaluate(model, split)
    return AblationResult(reports=reports, loss_curves=curves, splits=splits)
