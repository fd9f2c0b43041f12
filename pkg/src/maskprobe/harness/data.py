"""Desk datasets: IDX ingestion, Gaussian blobs and procedural digit glyphs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import RngState
from ..errors import (
    ContractViolation,
    IdxCountMismatchError,
    IdxDimensionError,
    IdxMagicError,
    IdxTruncatedError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SOURCES = ("idx-files", "synthetic-blobs", "synthetic-glyphs")


@dataclass
class Dataset:
    images: np.ndarray  # (count, ...) with values in [-1, 1]
    labels: np.ndarray
    split: str = "train"
    source: str = "idx-files"
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractViolation(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractViolation(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ContractViolation("image values must lie in [-1, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split, self.source, self.num_classes)


# ---------------------------------------------------------------------------
# IDX

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the 4-byte magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    if ndim == 3 and (dims[1] == 0 or dims[2] == 0):
        raise IdxDimensionError(f"{path}: zero-sized image dimension {dims[1:]}")
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(raw) - header}")
    if len(raw) - header > need:
        raise IdxDimensionError(f"{path}: {len(raw) - header - need} bytes beyond declared dimensions {dims}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx_dataset(images_path, labels_path, split: str = "train",
                     num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; bytes map to ``v / 127.5 - 1``."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"image file has {len(images)} items but label file has {len(labels)}")
    x = images.astype(np.float64)[:, None, :, :] / 127.5 - 1.0
    return Dataset(x, labels.astype(np.int64), split, "idx-files", num_classes)


def write_idx(dataset: Dataset, images_path, labels_path):
    """Write a single-channel image dataset back to IDX (values rounded to bytes)."""
    imgs = dataset.images
    if imgs.ndim == 4:
        if imgs.shape[1] != 1:
            raise ContractViolation("IDX images must be single-channel")
        imgs = imgs[:, 0]
    if imgs.ndim != 3:
        raise ContractViolation(f"cannot store images of shape {dataset.images.shape} as IDX")
    data = np.clip(np.rint((imgs + 1.0) * 127.5), 0, 255).astype(np.uint8)
    n, h, w = data.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(data.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic data

def generate_synthetic(classes: int, per_class: int, dim: int, separation: float,
                       rng: RngState, split: str = "train", image_shape=None) -> Dataset:
    """Gaussian blobs around random sign-vector means of magnitude 0.5.

    Noise std is ``0.5 / separation``; samples are clipped to ``[-1, 1]``.
    Class means depend only on ``rng``'s seed, so train and test splits drawn
    from different substreams share them.
    """
    if classes < 2:
        raise ContractViolation(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ContractViolation(f"per-class count must be at least 1, got {per_class}")
    if dim < 1 or not separation > 0:
        raise ContractViolation("dim must be positive and separation > 0")
    means = 0.5 * np.where(RngState(rng.seed).split("blob-means").generator.random((classes, dim)) < 0.5, -1.0, 1.0)
    gen = rng.split(f"blobs-{split}").generator
    labels = np.repeat(np.arange(classes), per_class)
    noise = gen.normal(0.0, 0.5 / separation, size=(len(labels), dim))
    x = np.clip(means[labels] + noise, -1.0, 1.0)
    order = gen.permutation(len(labels))
    x, labels = x[order], labels[order]
    if image_shape is not None:
        x = x.reshape((len(labels),) + tuple(image_shape))
    return Dataset(x, labels, split, "synthetic-blobs", classes)


# stroke skeletons in a unit box (x right, y down)
_TL, _TR = (0.2, 0.1), (0.8, 0.1)
_ML, _MR = (0.2, 0.5), (0.8, 0.5)
_BL, _BR = (0.2, 0.9), (0.8, 0.9)
GLYPH_STROKES = (
    [(_TL, _TR), (_TR, _BR), (_BR, _BL), (_BL, _TL)],
    [((0.5, 0.1), (0.5, 0.9)), ((0.3, 0.3), (0.5, 0.1))],
    [(_TL, _TR), (_TR, _MR), (_MR, _BL), (_BL, _BR)],
    [(_TL, _TR), (_TR, _BR), (_BR, _BL), ((0.35, 0.5), _MR)],
    [(_TL, _ML), (_ML, _MR), ((0.65, 0.1), (0.65, 0.9))],
    [(_TR, _TL), (_TL, _ML), (_ML, _MR), (_MR, _BR), (_BR, _BL)],
    [(_TR, _TL), (_TL, _BL), (_BL, _BR), (_BR, _MR), (_MR, _ML)],
    [(_TL, _TR), (_TR, (0.4, 0.9))],
    [(_TL, _TR), (_TR, _BR), (_BR, _BL), (_BL, _TL), (_ML, _MR)],
    [(_MR, _ML), (_ML, _TL), (_TL, _TR), (_TR, _BR), (_BR, _BL)],
)


def _render(segments: np.ndarray, width: np.ndarray, size: int) -> np.ndarray:
    """Anti-aliased strokes.  ``segments``: (n, S, 2, 2) in pixel units, NaN rows ignored."""
    ys, xs = np.mgrid[0:size, 0:size]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)  # (P, 2)
    a = segments[:, :, None, 0, :]  # (n, S, 1, 2)
    b = segments[:, :, None, 1, :]
    ab = b - a
    ap = grid[None, None] - a
    t = np.clip((ap * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0.0, 1.0)
    d = np.linalg.norm(ap - t[..., None] * ab, axis=-1)  # (n, S, P)
    d = np.where(np.isnan(d), np.inf, d).min(axis=1)
    ink = np.clip(width[:, None] - d + 0.5, 0.0, 1.0)
    return ink.reshape(-1, size, size)


def generate_glyphs(per_class: int, rng: RngState, split: str = "train", size: int = 28,
                    noise: float = 0.05) -> Dataset:
    """MNIST-like 28x28 digit glyphs drawn from jittered stroke skeletons.

    Each sample gets a random affine map (rotation, anisotropic scale, shear,
    shift), per-vertex jitter, a random stroke width and additive pixel noise.
    """
    if per_class < 1:
        raise ContractViolation(f"per-class count must be at least 1, got {per_class}")
    gen = rng.split(f"glyphs-{split}").generator
    classes = len(GLYPH_STROKES)
    max_s = max(len(s) for s in GLYPH_STROKES)
    labels = gen.permutation(np.repeat(np.arange(classes), per_class))
    n = len(labels)
    skel = np.full((classes, max_s, 2, 2), np.nan)
    for k, strokes in enumerate(GLYPH_STROKES):
        skel[k, :len(strokes)] = np.asarray(strokes)
    seg = skel[labels] + gen.uniform(-0.05, 0.05, size=(n, max_s, 2, 2))
    theta = gen.uniform(-0.25, 0.25, n)
    sx, sy = gen.uniform(0.75, 1.05, n), gen.uniform(0.8, 1.05, n)
    shear = gen.uniform(-0.25, 0.25, n)
    shift = gen.uniform(-0.08, 0.08, size=(n, 2))
    c, s = np.cos(theta), np.sin(theta)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (n, 2, 2)
    shr = np.zeros((n, 2, 2))
    shr[:, 0, 0] = sx
    shr[:, 0, 1] = shear * sx
    shr[:, 1, 1] = sy
    mat = rot @ shr
    centred = seg - 0.5
    warped = np.einsum("nij,nsej->nsei", mat, centred) + 0.5 + shift[:, None, None, :]
    pixels = warped * (size - 8) + 3.5  # unit box -> central 20x20 region
    width = gen.uniform(0.9, 1.6, n)
    out = np.empty((n, size, size))
    for i in range(0, n, 1000):
        out[i:i + 1000] = _render(pixels[i:i + 1000], width[i:i + 1000], size)
    out = np.clip(out + gen.normal(0.0, noise, size=out.shape), 0.0, 1.0)
    # quantise like byte images so IDX round trips are lossless
    out = np.rint(out * 255.0) / 127.5 - 1.0
    return Dataset(out[:, None], labels, split, "synthetic-glyphs", classes)
