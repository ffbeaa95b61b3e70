"""Dataset ingestion: IDX files, a synthetic translatable-shapes set, and
seeded evaluation subsets. All pixels live in [0, 1]; no normalization, so
the perturbation budget in pixel space equals the budget the models see.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .sampling import derive_rng
from .zoo import predict_batch

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801

SHAPE_CLASSES = ("square", "cross", "disk")

# stroke-drawn glyph vocabulary for harder, digit-like tasks; outline style
GLYPH_CLASSES = (
    "square", "cross", "disk", "triangle", "tee",
    "ell", "bars", "rails", "slash", "plus",
)

# unit-frame stroke skeletons ([-1, 1] box, scaled by the drawn size)
_GLYPH_SEGMENTS = {
    "square": [(-1, -1, 1, -1), (1, -1, 1, 1), (1, 1, -1, 1), (-1, 1, -1, -1)],
    "cross": [(-1, -1, 1, 1), (-1, 1, 1, -1)],
    "triangle": [(-1, 1, 0, -1), (0, -1, 1, 1), (1, 1, -1, 1)],
    "tee": [(-1, -1, 1, -1), (0, -1, 0, 1)],
    "ell": [(-1, -1, -1, 1), (-1, 1, 1, 1)],
    "bars": [(-1, -0.6, 1, -0.6), (-1, 0.6, 1, 0.6)],
    "rails": [(-0.6, -1, -0.6, 1), (0.6, -1, 0.6, 1)],
    "slash": [(-1, 1, 1, -1)],
    "plus": [(-1, 0, 1, 0), (0, -1, 0, 1)],
}


class IdxFormatError(ValueError):
    """IDX bytes do not match the expected big-endian layout."""


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int


@dataclass
class Dataset:
    """Fixed-order labeled examples, stored stacked for fast batching."""

    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"
    source_indices: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.images.shape[0]

    def example(self, i):
        return LabeledExample(self.images[i], int(self.labels[i]))

    def take(self, indices, split=None):
        indices = np.asarray(indices)
        return Dataset(
            self.images[indices].copy(),
            self.labels[indices].copy(),
            self.classes,
            split or self.split,
            indices.copy(),
        )


def _read_header(blob, fmt, path, what):
    size = struct.calcsize(fmt)
    if len(blob) < size:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(fmt, blob[:size]), blob[size:]


def load_idx(images_path, labels_path, split="train"):
    """Parses an IDX image/label file pair into a Dataset."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    (magic, count, rows, cols), payload = _read_header(blob, ">4I", images_path, "image header")
    if magic != _IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{magic:08x}, expected 0x{_IDX_IMAGE_MAGIC:08x}"
        )
    if len(payload) != count * rows * cols:
        raise IdxFormatError(
            f"{images_path}: payload holds {len(payload)} bytes, "
            f"header promises {count}x{rows}x{cols}"
        )
    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    (lmagic, lcount), lpayload = _read_header(lblob, ">2I", labels_path, "label header")
    if lmagic != _IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{lmagic:08x}, expected 0x{_IDX_LABEL_MAGIC:08x}"
        )
    if len(lpayload) != lcount:
        raise IdxFormatError(f"{labels_path}: payload holds {len(lpayload)} labels, header promises {lcount}")
    if count != lcount:
        raise IdxFormatError(f"image count {count} != label count {lcount}")
    images = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    images = images.reshape(count, 1, rows, cols)
    labels = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, int(labels.max()) + 1 if count else 0, split)


def save_idx(dataset, images_path, labels_path):
    """Writes a Dataset back out as an IDX pair (u8 pixels, big-endian headers)."""
    n, c, rows, cols = dataset.images.shape
    if c != 1:
        raise ValueError(f"IDX stores single-channel images, got {c} channels")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", _IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", _IDX_LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _solid_distance(kind, dx, dy, params):
    """Signed distance of a filled shape; negative inside."""
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - params["half"]
    if kind == "cross":
        arm, thick = params["half"], params["thick"]
        horiz = np.maximum(np.abs(dx) - arm, np.abs(dy) - thick)
        vert = np.maximum(np.abs(dx) - thick, np.abs(dy) - arm)
        return np.minimum(horiz, vert)
    return np.sqrt(dx**2 + dy**2) - params["half"]


def _segment_distance(dx, dy, seg, half):
    x1, y1, x2, y2 = (half * v for v in seg)
    px, py = dx - x1, dy - y1
    vx, vy = x2 - x1, y2 - y1
    t = np.clip((px * vx + py * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    return np.sqrt((px - t * vx) ** 2 + (py - t * vy) ** 2)


def _outline_distance(kind, dx, dy, params):
    """Signed distance of a thin-stroke glyph rendering."""
    half, stroke = params["half"], params["stroke"]
    if kind == "disk":
        return np.abs(np.sqrt(dx**2 + dy**2) - half) - stroke
    d = None
    for seg in _GLYPH_SEGMENTS[kind]:
        sd = _segment_distance(dx, dy, seg, half)
        d = sd if d is None else np.minimum(d, sd)
    return d - stroke


def _shape_params(kind, style, rng):
    """Draws size parameters and reports the resulting extent from center."""
    if style == "solid":
        if kind not in SHAPE_CLASSES:
            raise ValueError(f"unknown solid shape class {kind!r}; solid style supports {SHAPE_CLASSES}")
        if kind == "square":
            params = {"half": rng.uniform(3.0, 5.0)}
        elif kind == "cross":
            params = {"half": rng.uniform(4.0, 6.0), "thick": rng.uniform(1.0, 1.8)}
        else:
            params = {"half": rng.uniform(3.5, 5.5)}
        return params, params["half"]
    if kind not in GLYPH_CLASSES:
        raise ValueError(f"unknown glyph class {kind!r}; outline style supports {GLYPH_CLASSES}")
    params = {"half": rng.uniform(3.5, 5.0), "stroke": rng.uniform(0.7, 1.1)}
    return params, params["half"] + params["stroke"]  # skeleton coords stay in the unit box


def _render_shape(kind, size, rng, style, noise, clutter):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    margin = 4.0
    params, extent = _shape_params(kind, style, rng)
    extent += 0.5  # antialias fringe
    cx, cy = rng.uniform(margin + extent, size - 1 - margin - extent, size=2)
    dist = _solid_distance if style == "solid" else _outline_distance
    d = dist(kind, xx - cx, yy - cy, params)
    img = np.clip(0.5 - d, 0.0, 1.0) * rng.uniform(0.7, 1.0)  # soft 1-px edge
    if clutter > 0:
        for _ in range(int(rng.integers(0, clutter + 1))):
            r = rng.uniform(0.7, 1.2)
            px, py = rng.uniform(margin + r, size - 1 - margin - r, size=2)
            dd = np.sqrt((xx - px) ** 2 + (yy - py) ** 2) - r
            img = np.maximum(img, np.clip(0.5 - dd, 0.0, 1.0) * rng.uniform(0.4, 0.8))
    if noise > 0:
        img = img + rng.normal(0.0, noise, (size, size))
    return np.clip(img, 0.0, 1.0)


def synth_shapes(n, seed, classes=SHAPE_CLASSES, size=28, split="train",
                 style="solid", noise=0.0, clutter=0):
    """n antialiased shapes at seeded random positions, >= 4 px from borders.

    style "solid" draws filled blobs; "outline" draws thin strokes, which
    makes classification hinge on high-frequency, position-sensitive
    features. Optional clutter dots and Gaussian pixel noise harden the
    task; all randomness comes from the one seeded stream.
    """
    if n < 1:
        raise ValueError(f"synth_shapes: n must be >= 1, got {n}")
    if style not in ("solid", "outline"):
        raise ValueError(f"unknown style {style!r}; expected 'solid' or 'outline'")
    rng = derive_rng(seed, "synth-shapes")
    images = np.empty((n, 1, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for idx in range(n):
        label = int(rng.integers(len(classes)))
        labels[idx] = label
        images[idx, 0] = _render_shape(classes[label], size, rng, style, noise, clutter)
    return Dataset(images, labels, len(classes), split)


def attack_subset(dataset, n, seed, require_correct=None):
    """Seeded sample without replacement, optionally restricted to examples
    the given model classifies correctly."""
    if n > len(dataset):
        raise ValueError(f"attack_subset: n={n} exceeds dataset size {len(dataset)}")
    if require_correct is not None:
        preds = predict_batch(require_correct, dataset.images)
        eligible = np.flatnonzero(preds == dataset.labels)
    else:
        eligible = np.arange(len(dataset))
    if len(eligible) < n:
        raise ValueError(
            f"attack_subset: fewer than {n} eligible examples ({len(eligible)} available)"
        )
    rng = derive_rng(seed, "attack-subset")
    chosen = eligible[rng.permutation(len(eligible))[:n]]
    return dataset.take(chosen, split="attack-eval")
