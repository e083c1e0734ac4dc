"""Multi-scale feature encoder with per-location scale attention.

A gray input image is resized into a pyramid of fixed resolutions. One
backbone CNN (nine 3x3 conv layers, batch norm + ReLU after each, two 2x2
max-poolings) encodes every pyramid level with a single shared parameter
set, so each level's feature map has 1/4 of its input extent in both axes.
The per-level maps are resampled onto a common grid and fused: at every
grid location a learned matrix scores the stacked per-level feature
vectors, a softmax over levels turns the scores into weights, and the
fused feature vector is the weighted sum of the level vectors.

The single-level variant of the same machinery is the fixed-resolution
baseline encoder used by the ablation harness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, RunningStats, Tensor

# (kernel, channels) plan at width multiplier 1; pooling after the first two layers
BASE_CHANNELS = (64, 128, 256, 256, 256, 512, 512, 512, 512)
POOL_AFTER = (0, 1)
DOWNSAMPLE = 4  # two 2x2 poolings


def scaled_width(base: int, multiplier: float) -> int:
    return max(1, round(base * multiplier))


@dataclass(frozen=True)
class PyramidSpec:
    """Ordered pyramid resolutions (width, height) and the fused-grid extent.

    ``common_grid`` is (width, height) of the fused feature map and must
    equal one of the levels' post-backbone extents.
    """

    scales: tuple[tuple[int, int], ...]
    common_grid: tuple[int, int]

    def __post_init__(self):
        if not self.scales:
            raise ValueError("pyramid needs at least one scale")
        for w, h in self.scales:
            if w % DOWNSAMPLE or h % DOWNSAMPLE:
                raise ValueError(f"scale {w}x{h} not divisible by {DOWNSAMPLE}")
        grids = [(w // DOWNSAMPLE, h // DOWNSAMPLE) for w, h in self.scales]
        if self.common_grid not in grids:
            raise ValueError(f"common grid {self.common_grid} is not a post-backbone extent of any scale")

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @staticmethod
    def from_scales(scales: Sequence[tuple[int, int]]) -> "PyramidSpec":
        """Build a spec with the default common-grid rule.

        The grid is the post-backbone extent of the 96-wide level when one
        exists; otherwise the second-finest level (so at most the finest
        level is ever down-sampled), or the lone level.
        """
        scales = tuple((int(w), int(h)) for w, h in scales)
        by_width = sorted(scales, key=lambda s: s[0], reverse=True)
        anchor = next((s for s in scales if s[0] == 96), None)
        if anchor is None:
            anchor = by_width[1] if len(by_width) >= 2 else by_width[0]
        grid = (anchor[0] // DOWNSAMPLE, anchor[1] // DOWNSAMPLE)
        return PyramidSpec(scales=scales, common_grid=grid)

    @staticmethod
    def default() -> "PyramidSpec":
        return PyramidSpec.from_scales([(192, 32), (96, 32), (48, 32), (24, 32)])


class BackboneParams:
    """Conv kernels and batch-norm parameters of the nine-layer backbone.

    One instance is shared by all pyramid levels; the learnable parameter
    count is independent of how many levels the pyramid has. Running
    normalization statistics are NOT parameters and are kept per pyramid
    level (`new_stats` makes one set per level): each level's activations
    have their own distribution, and normalizing a level at eval time with
    another level's statistics would undo what training saw.
    """

    def __init__(self, multiplier: float = 1.0, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32, in_channels: int = 1):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.multiplier = multiplier
        self.dtype = dtype
        self.widths = [scaled_width(c, multiplier) for c in BASE_CHANNELS]
        self.kernels: list[Tensor] = []
        self.gammas: list[Tensor] = []
        self.betas: list[Tensor] = []
        cin = in_channels
        for cout in self.widths:
            fan_in = cin * 9
            k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
            self.kernels.append(ad.parameter(k.astype(dtype)))
            self.gammas.append(ad.parameter(np.ones(cout, dtype=dtype)))
            self.betas.append(ad.parameter(np.zeros(cout, dtype=dtype)))
            cin = cout

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def new_stats(self) -> list[RunningStats]:
        return [RunningStats(c, dtype=self.dtype) for c in self.widths]

    def named_parameters(self, prefix: str = "backbone"):
        for i in range(len(self.kernels)):
            yield f"{prefix}/conv{i}/kernel", self.kernels[i]
            yield f"{prefix}/conv{i}/gamma", self.gammas[i]
            yield f"{prefix}/conv{i}/beta", self.betas[i]


class ScaleAttentionParams:
    """Score matrix [N, N*C'] applied to the stacked per-location features."""

    def __init__(self, num_scales: int, channels: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_scales = num_scales
        self.channels = channels
        bound = 1.0 / np.sqrt(num_scales * channels)
        w = rng.uniform(-bound, bound, size=(num_scales, num_scales * channels))
        self.weight = ad.parameter(w.astype(dtype))

    def named_parameters(self, prefix: str = "scale_attn"):
        yield f"{prefix}/weight", self.weight


@dataclass
class ScaleAttentionTrace:
    """Per-location scale weights, kept as a plain array for inspection."""

    weights: np.ndarray  # [B, N, H', W'], each (i,j) column sums to 1


class EncoderParams:
    """Backbone plus (for multi-level pyramids) the scale-attention matrix.

    Holds one set of running batch-norm statistics per pyramid level.
    """

    def __init__(self, spec: PyramidSpec, multiplier: float = 1.0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.backbone = BackboneParams(multiplier, rng, dtype)
        self.stats = [self.backbone.new_stats() for _ in spec.scales]
        self.scale_attn = (
            ScaleAttentionParams(spec.num_scales, self.backbone.out_channels, rng, dtype)
            if spec.num_scales > 1 else None
        )

    @property
    def out_channels(self) -> int:
        return self.backbone.out_channels

    def named_parameters(self):
        yield from self.backbone.named_parameters()
        if self.scale_attn is not None:
            yield from self.scale_attn.named_parameters()

    def named_buffers(self):
        for s, level_stats in enumerate(self.stats):
            for i, st in enumerate(level_stats):
                yield f"backbone/conv{i}/scale{s}/running_mean", st.mean
                yield f"backbone/conv{i}/scale{s}/running_var", st.var


# ---------------------------------------------------------------------------
# Pyramid construction

def normalize_pixels(x: np.ndarray) -> np.ndarray:
    return (x - 0.5) / 0.5


def build_pyramid(image: np.ndarray, spec: PyramidSpec, normalize: bool = True) -> list[Tensor]:
    """Resize a gray [H, W] image in [0, 1] to every pyramid level.

    Returns one [1, 1, H_s, W_s] tensor per level. Values stay in [0, 1]
    through the resize; normalization to [-1, 1] is applied afterwards
    unless disabled.
    """
    if image.ndim != 2 or image.size == 0:
        raise DimensionError("build_pyramid expects a nonempty 2-d gray image")
    return [t for t in build_pyramid_batch([image], spec, normalize)]


def build_pyramid_batch(images: Sequence[np.ndarray], spec: PyramidSpec,
                        normalize: bool = True, dtype=np.float32) -> list[Tensor]:
    """Stack per-level resizes of a batch of variable-size gray images."""
    levels = []
    for w, h in spec.scales:
        stack = np.stack([ad.resize_plane(img.astype(dtype, copy=False), h, w) for img in images])
        if normalize:
            stack = normalize_pixels(stack)
        levels.append(ad.constant(stack[:, None, :, :]))
    return levels


# ---------------------------------------------------------------------------
# Forward passes

def backbone_forward(x: Tensor, params: BackboneParams, mode: str,
                     stats: Optional[list[RunningStats]] = None) -> Tensor:
    """Run the shared backbone over one pyramid level.

    `stats` is that level's set of running batch-norm buffers; a fresh
    throwaway set is used when none is given (fine for train-mode shape or
    gradient checks, wrong for eval).
    """
    n, c, h, w = x.data.shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise DimensionError(f"backbone input {h}x{w} not divisible by {DOWNSAMPLE}")
    if stats is None:
        stats = params.new_stats()
    for i in range(len(params.kernels)):
        x = ad.conv2d(x, params.kernels[i], stride=1, pad=1)
        x = ad.batch_norm(x, params.gammas[i], params.betas[i], stats[i], mode)
        x = ad.relu(x)
        if i in POOL_AFTER:
            x = ad.maxpool2x2(x)
    return x


def upsample_to_common(maps: Sequence[Tensor], spec: PyramidSpec) -> list[Tensor]:
    """Bring every per-level map to the common grid with the bilinear op.

    The level finer than the grid is down-sampled by the same operator. A
    map already at the grid extent is passed through untouched.
    """
    gw, gh = spec.common_grid
    out = []
    for m in maps:
        if m.data.shape[2] == gh and m.data.shape[3] == gw:
            out.append(m)
        else:
            out.append(ad.bilinear_resize(m, gh, gw))
    return out


def scale_attention(maps: Sequence[Tensor], params: ScaleAttentionParams):
    """Fuse same-extent maps into one, weighting levels per location.

    Scores at (i, j) are ``weight @ concat_s(maps[s][:, :, i, j])``; a
    softmax over levels yields weights w_s(i,j) and the fused vector is
    sum_s w_s(i,j) * maps[s][:, :, i, j].
    """
    if not maps:
        raise DimensionError("scale_attention needs at least one map")
    shape = maps[0].data.shape
    for m in maps[1:]:
        if m.data.shape != shape:
            raise DimensionError("scale_attention maps must share extents")
    n = len(maps)
    if n == 1:
        b, _, gh, gw = shape
        ones = np.ones((b, 1, gh, gw), dtype=maps[0].data.dtype)
        return maps[0], ScaleAttentionTrace(weights=ones)
    if params is None:
        raise DimensionError("fusing several maps requires scale-attention parameters")

    stacked = ad.concat(list(maps), axis=1)  # [B, N*C', H', W']
    kernel = ad.reshape(params.weight, (n, n * params.channels, 1, 1))
    scores = ad.conv2d(stacked, kernel)      # [B, N, H', W']
    omega = ad.softmax(scores, axis=1)
    fused = None
    for s in range(n):
        term = ad.mul(ad.narrow(omega, 1, s, 1), maps[s])
        fused = term if fused is None else ad.add(fused, term)
    return fused, ScaleAttentionTrace(weights=omega.data.copy())


def encode(images: Sequence[np.ndarray] | np.ndarray, params: EncoderParams,
           spec: Optional[PyramidSpec] = None, mode: str = "train"):
    """Full encoder: pyramid -> shared backbone -> common grid -> fusion."""
    spec = spec if spec is not None else params.spec
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = [images]
    levels = build_pyramid_batch(images, spec, dtype=params.backbone.kernels[0].data.dtype)
    maps = [backbone_forward(level, params.backbone, mode, params.stats[s])
            for s, level in enumerate(levels)]
    common = upsample_to_common(maps, spec)
    if params.scale_attn is None and len(common) != 1:
        raise DimensionError("multi-level pyramid requires scale-attention parameters")
    return scale_attention(common, params.scale_attn)


def single_scale_encode(images, params: BackboneParams, resolution: tuple[int, int],
                        mode: str = "train",
                        stats: Optional[list[RunningStats]] = None) -> Tensor:
    """Fixed-resolution baseline: one level, no attention parameters."""
    spec = PyramidSpec.from_scales([resolution])
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = [images]
    level = build_pyramid_batch(images, spec, dtype=params.kernels[0].data.dtype)[0]
    return backbone_forward(level, params, mode, stats)
