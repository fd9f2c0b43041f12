"""Desk-scale classifiers (MLP and a small CNN) and their checkpoint format.

Both architectures expose the penultimate activations ("features") and the
raw logits.  Pixel inputs are expected in ``[-1, 1]``.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"MPCKPT\\r\\n"
    u32       format version (currently 1)
    u32       length L of the metadata block
    L bytes   UTF-8 JSON: {"arch": ..., "provenance": ..., "arrays": [{"name", "shape"}]}
    ...       each array as raw little-endian float64, in the listed order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractViolation,
)

MAGIC = b"MPCKPT\r\n"
FORMAT_VERSION = 1
PROVENANCES = ("untrained", "natural", "fgsm-at", "mask-at", "pgd-at", "trades")


@dataclass(frozen=True)
class ModelArch:
    """Architecture description.

    ``kind="mlp"``: ``hidden`` are the hidden widths; inputs of any shape are
    flattened.  ``kind="small-cnn"``: ``convs`` lists ``(out_channels, kernel,
    stride)`` per convolution (no padding, ReLU after each), followed by
    fully connected layers of widths ``hidden`` and the logit layer.
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = ()
    convs: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))
        object.__setattr__(self, "convs", tuple(tuple(int(v) for v in c) for c in self.convs))

    @classmethod
    def mlp(cls, widths, input_shape=None) -> "ModelArch":
        """``ModelArch.mlp([784, 128, 10])``: input width, hidden widths, classes."""
        widths = list(widths)
        if len(widths) < 2:
            raise ContractViolation("mlp needs at least input and output widths")
        shape = tuple(input_shape) if input_shape is not None else (widths[0],)
        if int(np.prod(shape)) != widths[0]:
            raise ContractViolation(f"input shape {shape} does not have {widths[0]} values")
        return cls("mlp", shape, widths[-1], hidden=tuple(widths[1:-1]))

    @classmethod
    def small_cnn(cls, input_shape=(1, 28, 28), num_classes=10,
                  convs=((16, 4, 2), (32, 4, 2)), hidden=(64,)) -> "ModelArch":
        return cls("small-cnn", tuple(input_shape), num_classes, hidden=tuple(hidden),
                   convs=tuple(convs))

    def validate(self):
        if self.kind not in ("mlp", "small-cnn"):
            raise ContractViolation(f"unknown architecture kind {self.kind!r}")
        if self.num_classes < 2:
            raise ContractViolation(f"need at least 2 classes, got {self.num_classes}")
        if any(d < 1 for d in self.input_shape) or any(d < 1 for d in self.hidden):
            raise ContractViolation("dimensions must be positive")
        if self.kind == "small-cnn":
            if len(self.input_shape) != 3:
                raise ContractViolation("small-cnn input shape must be (channels, height, width)")
            if not self.convs:
                raise ContractViolation("small-cnn needs at least one convolution")
            self.conv_output_shape()

    def conv_output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for out_c, k, s in self.convs:
            if k < 1 or s < 1 or out_c < 1:
                raise ContractViolation(f"bad conv spec {(out_c, k, s)}")
            h, w = (h - k) // s + 1, (w - k) // s + 1
            if h < 1 or w < 1:
                raise ContractViolation("convolution stack shrinks the input below 1 pixel")
            c = out_c
        return c, h, w

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if self.kind == "small-cnn":
            c = self.input_shape[0]
            for i, (out_c, k, _) in enumerate(self.convs):
                shapes[f"conv{i}.weight"] = (out_c, c, k, k)
                shapes[f"conv{i}.bias"] = (out_c,)
                c = out_c
            width = int(np.prod(self.conv_output_shape()))
        else:
            width = int(np.prod(self.input_shape))
        for i, out in enumerate(self.hidden + (self.num_classes,)):
            shapes[f"fc{i}.weight"] = (width, out)
            shapes[f"fc{i}.bias"] = (out,)
            width = out
        return shapes

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "hidden": list(self.hidden),
                "convs": [list(c) for c in self.convs]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        return cls(d["kind"], tuple(d["input_shape"]), int(d["num_classes"]),
                   hidden=tuple(d.get("hidden", ())), convs=tuple(tuple(c) for c in d.get("convs", ())))


@dataclass
class ModelParams:
    """Weights plus the architecture and training provenance that produced them."""

    arch: ModelArch
    weights: dict[str, np.ndarray]
    provenance: dict = field(default_factory=lambda: {"method": "untrained", "hyperparameters": {}})

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def model_id(self) -> str:
        return self.provenance.get("model_id", self.provenance.get("method", "model"))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.weights.items()},
                           json.loads(json.dumps(self.provenance)))

    def _check_batch(self, x: np.ndarray):
        per_sample = int(np.prod(self.arch.input_shape))
        if x.ndim < 2 or int(np.prod(x.shape[1:])) != per_sample:
            raise ContractViolation(
                f"batch shape {x.shape} does not match model input shape {self.arch.input_shape}")
        if self.arch.kind == "small-cnn" and tuple(x.shape[1:]) != self.arch.input_shape:
            raise ContractViolation(
                f"batch shape {x.shape} does not match model input shape {self.arch.input_shape}")

    def forward(self, x, params: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
        """Build the graph; returns ``(features, logits)``.

        ``params`` substitutes graph leaves for the stored weights (used by
        training); otherwise weights enter as constants.
        """
        x = ad.as_tensor(x)
        self._check_batch(x.data)
        p = params if params is not None else {k: Tensor(v) for k, v in self.weights.items()}
        h = x
        if self.arch.kind == "small-cnn":
            for i, (_, _, stride) in enumerate(self.arch.convs):
                h = ad.relu(ad.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=stride))
        h = ad.reshape(h, (x.shape[0], -1))
        for i in range(len(self.arch.hidden)):
            h = ad.relu(h @ p[f"fc{i}.weight"] + p[f"fc{i}.bias"])
        last = len(self.arch.hidden)
        logits = h @ p[f"fc{last}.weight"] + p[f"fc{last}.bias"]
        return h, logits


def init_model(arch: ModelArch, rng: RngState, provenance: dict | None = None) -> ModelParams:
    """Fan-in scaled uniform init: ``W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    arch.validate()
    weights = {}
    for name, shape in arch.weight_shapes().items():
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            weights[name] = rng.generator.uniform(-bound, bound, size=shape)
    prov = provenance or {"method": "untrained", "hyperparameters": {"seed": rng.seed}}
    return ModelParams(arch, weights, prov)


def forward_logits(model, batch) -> np.ndarray:
    """Raw logits, shape ``(batch, num_classes)``."""
    return model.forward(np.asarray(batch, dtype=np.float64))[1].data


def forward_features(model, batch) -> np.ndarray:
    """Activations feeding the final linear layer."""
    return model.forward(np.asarray(batch, dtype=np.float64))[0].data


def predict(model, batch, batch_size: int = 500) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    out = [forward_logits(model, batch[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(batch), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def save_checkpoint(model: ModelParams, path) -> Path:
    path = Path(path)
    shapes = model.arch.weight_shapes()
    arrays = []
    for name, shape in shapes.items():
        w = np.asarray(model.weights[name], dtype="<f8")
        if w.shape != shape:
            raise CheckpointShapeError(f"{name}: shape {w.shape}, architecture expects {shape}")
        arrays.append((name, w))
    meta = {"arch": model.arch.to_dict(), "provenance": model.provenance,
            "arrays": [{"name": n, "shape": list(w.shape)} for n, w in arrays]}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        for _, w in arrays:
            fh.write(np.ascontiguousarray(w).tobytes())
    return path


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a maskprobe checkpoint (bad magic bytes)")
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    version, meta_len = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    offset = len(MAGIC) + 8
    if len(raw) < offset + meta_len:
        raise CheckpointTruncatedError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
        arch = ModelArch.from_dict(meta["arch"])
        entries = meta["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable metadata block ({exc})") from exc
    offset += meta_len
    expected = arch.weight_shapes()
    weights = {}
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointShapeError(
                f"{path}: array {name} has shape {shape}, architecture expects {expected.get(name)}")
        nbytes = 8 * int(np.prod(shape))
        if len(raw) < offset + nbytes:
            raise CheckpointTruncatedError(f"{path}: array {name} truncated")
        weights[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset) \
            .reshape(shape).astype(np.float64)
        offset += nbytes
    if set(weights) != set(expected):
        raise CheckpointShapeError(f"{path}: missing arrays {sorted(set(expected) - set(weights))}")
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(arch, weights, meta["provenance"])
