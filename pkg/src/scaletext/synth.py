"""Procedural generator of labeled gray text images.

Words are rasterized from a built-in 5x7-cell dot-matrix font (no binary
assets), one character at a time with per-character height jitter, on a
black canvas with white ink, plus uniform pixel noise. Image width follows
the rendered content, so after resizing to a fixed encoder resolution the
effective character size shrinks as labels get longer -- the length/scale
imbalance this project studies.

Datasets persist as a directory of binary PGMs plus `manifest.tsv`
(relative path TAB label per line). A `meta.tsv` sidecar keeps the exact
rendered per-character ink widths so evaluation can stratify by character
scale after a round-trip; when it is missing the loader measures ink runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import resize_plane
from .decoder import ALPHANUMERIC, InputError
from .pgm import read_pgm, write_pgm

_GLYPH_ROWS = {
    "a": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "b": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "c": (".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
    "d": ("###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."),
    "e": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "f": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "g": (".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."),
    "h": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "i": ("###", ".#.", ".#.", ".#.", ".#.", ".#.", "###"),
    "j": ("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
    "k": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "l": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "m": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "n": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "o": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "p": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "r": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "s": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "t": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "u": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "v": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "w": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "x": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": (".#.", "##.", ".#.", ".#.", ".#.", ".#.", "###"),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}

GLYPH_HEIGHT = 7


class GlyphFont:
    """Per-symbol binary bitmaps (7 rows, column-trimmed) and advances."""

    def __init__(self, rows: Optional[dict[str, tuple[str, ...]]] = None):
        rows = rows if rows is not None else _GLYPH_ROWS
        self.bitmaps: dict[str, np.ndarray] = {}
        self.advances: dict[str, int] = {}
        for ch, pattern in rows.items():
            bm = np.array([[c == "#" for c in row] for row in pattern], dtype=bool)
            if bm.shape[0] != GLYPH_HEIGHT or not bm.any():
                raise ValueError(f"bad glyph for {ch!r}")
            cols = np.flatnonzero(bm.any(axis=0))
            bm = bm[:, cols[0]:cols[-1] + 1]
            self.bitmaps[ch] = bm
            self.advances[ch] = bm.shape[1]

    def glyph(self, ch: str) -> np.ndarray:
        return self.bitmaps[ch.lower()]


def default_font() -> GlyphFont:
    return GlyphFont()


@dataclass(frozen=True)
class GenSpec:
    """Controls for the procedural dataset.

    ``lengths`` maps word length to probability (must sum to 1). ``jitter``
    is the per-character height fraction range within the canvas height.
    """

    lengths: dict[int, float] = field(default_factory=lambda: {n: 0.2 for n in range(1, 6)})
    jitter: tuple[float, float] = (0.55, 0.95)
    canvas_height: int = 32
    noise: float = 0.05
    seed: int = 0
    count: int = 1000
    symbols: str = ALPHANUMERIC
    invert: bool = False

    def __post_init__(self):
        total = sum(self.lengths.values())
        if abs(total - 1.0) > 1e-9:
            raise InputError(f"length probabilities sum to {total}, expected 1")
        lo, hi = self.jitter
        if not (0.0 < lo <= hi <= 1.0):
            raise InputError("jitter range must lie inside (0, 1]")


@dataclass
class LabeledSample:
    image: np.ndarray           # [H, W] float32 in [0, 1]
    label: str
    char_widths: list[int]      # rendered ink width per character, pixels


def _scale_glyph(bitmap: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor upscale keeping crisp binary edges."""
    rows = (np.arange(height) * bitmap.shape[0]) // height
    cols = (np.arange(width) * bitmap.shape[1]) // width
    return bitmap[np.ix_(rows, cols)]


def render_word(text: str, font: GlyphFont, spec: GenSpec,
                rng: np.random.Generator) -> LabeledSample:
    """Rasterize one word left to right with per-character height jitter."""
    if not text:
        raise InputError("cannot render an empty word")
    text = text.lower()
    lo, hi = spec.jitter
    canvas_h = spec.canvas_height

    pieces = []
    widths = []
    for ch in text:
        if ch not in font.bitmaps:
            raise InputError(f"no glyph for character {ch!r}")
        frac = float(rng.uniform(lo, hi))
        h = max(GLYPH_HEIGHT, round(frac * canvas_h))
        w = max(1, round(h * font.advances[ch] / GLYPH_HEIGHT))
        pieces.append(_scale_glyph(font.glyph(ch), h, w))
        widths.append(w)

    gap = max(1, round(0.25 * np.mean(widths)))
    total_w = sum(widths) + gap * (len(text) + 1)
    canvas = np.zeros((canvas_h, total_w), dtype=np.float32)
    x = gap
    for piece in pieces:
        top = (canvas_h - piece.shape[0]) // 2
        canvas[top:top + piece.shape[0], x:x + piece.shape[1]] = piece
        x += piece.shape[1] + gap

    if spec.noise > 0:
        canvas = canvas + rng.uniform(-spec.noise, spec.noise, size=canvas.shape).astype(np.float32)
        canvas = np.clip(canvas, 0.0, 1.0)
    if spec.invert:
        canvas = 1.0 - canvas
    return LabeledSample(image=canvas, label=text, char_widths=widths)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # per-sample stream so parallel and serial generation agree
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def generate_dataset(spec: GenSpec, font: Optional[GlyphFont] = None) -> list[LabeledSample]:
    """Draw labels i.i.d. from the length distribution and render them."""
    if spec.count < 1:
        raise InputError("sample count must be >= 1")
    font = font if font is not None else default_font()
    lengths = sorted(spec.lengths)
    probs = np.array([spec.lengths[n] for n in lengths], dtype=np.float64)
    probs = probs / probs.sum()
    symbols = list(spec.symbols)
    samples = []
    for i in range(spec.count):
        rng = _sample_rng(spec.seed, i)
        n = int(rng.choice(lengths, p=probs))
        text = "".join(rng.choice(symbols) for _ in range(n))
        samples.append(render_word(text, font, spec, rng))
    return samples


def resize_to_fixed(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize to width x height; values stay in [0, 1]."""
    if width < 1 or height < 1:
        raise InputError("target extents must be >= 1")
    return np.clip(resize_plane(image.astype(np.float32, copy=False), height, width), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Persistence

def save_dataset(directory, samples: Sequence[LabeledSample]) -> None:
    """Write manifest.tsv + PGM images (+ meta.tsv with char widths)."""
    os.makedirs(directory, exist_ok=True)
    manifest = []
    meta = []
    digits = max(4, len(str(len(samples))))
    for i, s in enumerate(samples):
        rel = f"img_{i:0{digits}d}.pgm"
        write_pgm(os.path.join(directory, rel), s.image)
        manifest.append(f"{rel}\t{s.label}\n")
        meta.append(f"{rel}\t{','.join(str(w) for w in s.char_widths)}\n")
    with open(os.path.join(directory, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.writelines(manifest)
    with open(os.path.join(directory, "meta.tsv"), "w", encoding="utf-8") as fh:
        fh.writelines(meta)


def measure_char_widths(image: np.ndarray, label: str, threshold: float = 0.5) -> list[int]:
    """Estimate per-character ink widths from runs of inked columns."""
    ink = (image > threshold).any(axis=0)
    runs = []
    width = 0
    for v in ink:
        if v:
            width += 1
        elif width:
            runs.append(width)
            width = 0
    if width:
        runs.append(width)
    if len(runs) == len(label):
        return runs
    # fall back to an even split of the inked extent
    cols = np.flatnonzero(ink)
    extent = (cols[-1] - cols[0] + 1) if cols.size else image.shape[1]
    return [max(1, round(extent / max(1, len(label)) * 0.8))] * len(label)


def load_dataset(directory) -> list[LabeledSample]:
    manifest = os.path.join(directory, "manifest.tsv")
    if not os.path.isfile(manifest):
        raise InputError(f"no manifest.tsv in {directory}")
    widths: dict[str, list[int]] = {}
    meta = os.path.join(directory, "meta.tsv")
    if os.path.isfile(meta):
        with open(meta, encoding="utf-8") as fh:
            for line in fh:
                rel, _, ws = line.rstrip("\n").partition("\t")
                if ws:
                    widths[rel] = [int(x) for x in ws.split(",")]
    samples = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            rel, _, label = line.partition("\t")
            image = read_pgm(os.path.join(directory, rel))
            cw = widths.get(rel) or measure_char_widths(image, label)
            samples.append(LabeledSample(image=image, label=label, char_widths=cw))
    return samples
