"""Synthetic multi-label glyph images, augmentation and batching.

Each image holds 1-4 non-overlapping coloured glyphs of distinct classes on a
noisy background; its multi-hot label is exactly the set of classes drawn.
All randomness comes from ``numpy.random.SeedSequence`` keyed by
(seed, split, index) for generation and (seed, epoch, index, copy) for
augmentation, so results do not depend on iteration order.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

SHAPES = (
    "disk",
    "square",
    "triangle",
    "cross",
    "ring",
    "bar-horizontal",
    "bar-vertical",
    "diamond",
)

# Classes come in hue pairs (disk/ring, square/diamond, triangle/cross, the two
# bars) so colour alone does not identify a label.
DEFAULT_HUES = (0.0, 0.33, 0.6, 0.6, 0.0, 0.13, 0.13, 0.33)

MAGIC = b"MLGD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIHH")

_SPLIT_IDS = {"train": 0, "test": 1}


class DatasetFormatError(ValueError):
    """Malformed or truncated dataset file."""


@dataclass
class GlyphDatasetConfig:
    num_labels: int = 8
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    scale_range: Tuple[float, float] = (8.0, 20.0)
    hues: Tuple[float, ...] = DEFAULT_HUES
    saturation: float = 0.85
    brightness_range: Tuple[float, float] = (0.55, 1.0)
    background: float = 0.12
    noise_sigma: float = 0.06
    margin: int = 2
    gap: int = 2
    n_train: int = 2000
    n_test: int = 500
    seed: int = 7

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.brightness_range = tuple(self.brightness_range)
        self.hues = tuple(self.hues)
        if not 2 <= self.num_labels <= len(SHAPES):
            raise ValueError(f"num_labels must lie in [2, {len(SHAPES)}]")
        if len(self.hues) < self.num_labels:
            raise ValueError("need one hue per class")
        if not 1 <= self.min_objects <= self.max_objects <= self.num_labels:
            raise ValueError("object count range must lie in [1, num_labels]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= self.image_size - 2 * self.margin:
            raise ValueError("glyph scale range does not fit the frame")


@dataclass(frozen=True)
class Glyph:
    label: int
    cx: float
    cy: float
    size: float
    brightness: float

    def box(self) -> Tuple[float, float, float, float]:
        r = self.size / 2
        return self.cx - r, self.cy - r, self.cx + r, self.cy + r


@dataclass
class GlyphSplit:
    """Images as uint8 N x H x W x 3, labels as uint8 N x L."""

    images: np.ndarray
    labels: np.ndarray
    glyphs: Optional[List[List[Glyph]]] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_labels(self) -> int:
        return self.labels.shape[1]

    def float_images(self, index=slice(None), dtype=np.float32) -> np.ndarray:
        return to_float(self.images[index], dtype)

    def subset(self, index) -> "GlyphSplit":
        index = np.asarray(index)
        glyphs = [self.glyphs[i] for i in index] if self.glyphs is not None else None
        return GlyphSplit(self.images[index], self.labels[index], glyphs)


# -- rendering -------------------------------------------------------------------


def glyph_mask(shape: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    r = radius
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        t = max(1.0, r / 4)
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if shape == "bar-horizontal":
        return (np.abs(dx) <= r) & (np.abs(dy) <= max(1.0, r / 4))
    if shape == "bar-vertical":
        return (np.abs(dy) <= r) & (np.abs(dx) <= max(1.0, r / 4))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape {shape!r}")


def class_color(config: GlyphDatasetConfig, label: int, brightness: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(config.hues[label], config.saturation, brightness))


def render(glyphs: Sequence[Glyph], config: GlyphDatasetConfig, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Draw glyphs over the background; returns float H x W x 3 in [0, 1]."""
    size = config.image_size
    img = np.full((size, size, 3), config.background)
    for g in glyphs:
        mask = glyph_mask(SHAPES[g.label], size, g.cx, g.cy, g.size / 2)
        img[mask] = class_color(config, g.label, g.brightness)
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)


def labels_of(glyphs: Sequence[Glyph], num_labels: int) -> np.ndarray:
    y = np.zeros(num_labels, dtype=np.uint8)
    for g in glyphs:
        y[g.label] = 1
    return y


def _overlaps(a: Glyph, b: Glyph, gap: float) -> bool:
    ax0, ay0, ax1, ay1 = a.box()
    bx0, by0, bx1, by1 = b.box()
    return not (ax1 + gap <= bx0 or bx1 + gap <= ax0 or ay1 + gap <= by0 or by1 + gap <= ay0)


def sample_glyphs(rng: np.random.Generator, config: GlyphDatasetConfig) -> List[Glyph]:
    size = config.image_size
    lo, hi = config.scale_range
    while True:
        k = int(rng.integers(config.min_objects, config.max_objects + 1))
        classes = rng.choice(config.num_labels, size=k, replace=False)
        placed: List[Glyph] = []
        for c in classes:
            for _ in range(200):
                s = float(rng.uniform(lo, hi))
                r = s / 2
                cx = float(rng.uniform(config.margin + r, size - config.margin - r))
                cy = float(rng.uniform(config.margin + r, size - config.margin - r))
                b = float(rng.uniform(*config.brightness_range))
                g = Glyph(int(c), cx, cy, s, b)
                if not any(_overlaps(g, o, config.gap) for o in placed):
                    placed.append(g)
                    break
            else:
                break
        if len(placed) == k:
            return placed


def generate_image(config: GlyphDatasetConfig, split: str, index: int) -> Tuple[np.ndarray, np.ndarray, List[Glyph]]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SPLIT_IDS[split], index]))
    glyphs = sample_glyphs(rng, config)
    size = config.image_size
    noise = rng.normal(0.0, config.noise_sigma, (size, size, 3))
    img = render(glyphs, config, noise)
    return to_u8(img), labels_of(glyphs, config.num_labels), glyphs


def to_float(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    dt = np.dtype(dtype)
    return pixels.astype(dt) / dt.type(255.0)


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def gen_split(config: GlyphDatasetConfig, split: str = "train", count: Optional[int] = None) -> GlyphSplit:
    if count is None:
        count = config.n_train if split == "train" else config.n_test
    size, L = config.image_size, config.num_labels
    images = np.empty((count, size, size, 3), dtype=np.uint8)
    labels = np.empty((count, L), dtype=np.uint8)
    glyphs = []
    for i in range(count):
        images[i], labels[i], gl = generate_image(config, split, i)
        glyphs.append(gl)
    return GlyphSplit(images, labels, glyphs)


def gen_dataset(config: GlyphDatasetConfig) -> Tuple[GlyphSplit, GlyphSplit]:
    return gen_split(config, "train"), gen_split(config, "test")


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_shift: int = 2
    noise_sigma: float = 0.02

    @classmethod
    def flip_only(cls) -> "AugmentConfig":
        return cls(0.5, 0, 0.0)

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(0.0, 0, 0.0)


def sample_seed(seed: int, epoch: int, index: int, copy: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, index, copy])


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def shift(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by (dx, dy) pixels, filling uncovered pixels with zeros."""
    h, w = image.shape[:2]
    out = np.zeros_like(image)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = image[ys, xs]
    return out


def augment(image: np.ndarray, labels: np.ndarray, seed, config: AugmentConfig = AugmentConfig()):
    """Random flip, shift and pixel noise; ``labels`` pass through untouched."""
    rng = np.random.default_rng(seed)
    flip = rng.random() < config.flip_prob
    dx, dy = rng.integers(-config.max_shift, config.max_shift + 1, size=2) if config.max_shift else (0, 0)
    out = hflip(image) if flip else image
    if dx or dy:
        out = shift(out, int(dx), int(dy))
    if config.noise_sigma > 0:
        out = out + rng.normal(0.0, config.noise_sigma, out.shape).astype(out.dtype)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False), labels


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5EED])).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def make_batches(
    split: GlyphSplit,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    with_augmented_pair: bool = False,
    augment_config: Optional[AugmentConfig] = None,
    shuffle: bool = True,
    dtype=np.float32,
    start: int = 0,
) -> Iterator[Batch]:
    """Yield drop-last batches for one epoch.

    With ``with_augmented_pair`` every sampled image contributes two
    independently augmented copies: rows ``[0, b)`` are copy 0 and rows
    ``[b, 2b)`` copy 1 of the same images. ``start`` skips that many batches.
    """
    n = len(split)
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch size {batch_size} invalid for split of {n}")
    if augment_config is None:
        augment_config = AugmentConfig() if with_augmented_pair else AugmentConfig.none()
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    copies = 2 if with_augmented_pair else 1
    for b in range(start, batches_per_epoch(n, batch_size)):
        idx = order[b * batch_size : (b + 1) * batch_size]
        base = to_float(split.images[idx], dtype)
        imgs, labs = [], []
        for c in range(copies):
            for k, i in enumerate(idx):
                img, _ = augment(base[k], split.labels[i], sample_seed(seed, epoch, int(i), c), augment_config)
                imgs.append(img)
            labs.append(split.labels[idx])
        yield Batch(np.stack(imgs), np.concatenate(labs).astype(dtype), np.tile(idx, copies))


# -- on-disk format --------------------------------------------------------------


def encode_split(split: GlyphSplit) -> bytes:
    n, h, w, ch = split.images.shape
    if ch != 3:
        raise ValueError("images must have 3 channels")
    header = _HEADER.pack(MAGIC, VERSION, n, split.num_labels, h, w)
    return header + np.ascontiguousarray(split.images, dtype=np.uint8).tobytes() + np.ascontiguousarray(
        split.labels, dtype=np.uint8).tobytes()


def decode_split(buf: bytes) -> GlyphSplit:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header")
    magic, version, n, L, h, w = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError("bad magic; not a dataset file")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    n_img = n * h * w * 3
    expected = _HEADER.size + n_img + n * L
    if len(buf) != expected:
        raise DatasetFormatError(f"expected {expected} bytes, found {len(buf)}")
    body = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size)
    images = body[:n_img].reshape(n, h, w, 3).copy()
    labels = body[n_img:].reshape(n, L).copy()
    if labels.max(initial=0) > 1:
        raise DatasetFormatError("label bytes must be 0 or 1")
    return GlyphSplit(images, labels)


def save_dataset(split: GlyphSplit, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_split(split))


def load_dataset(path: Union[str, Path]) -> GlyphSplit:
    return decode_split(Path(path).read_bytes())


def file_size(n: int, num_labels: int, image_size: int = 64) -> int:
    return _HEADER.size + n * image_size * image_size * 3 + n * num_labels
