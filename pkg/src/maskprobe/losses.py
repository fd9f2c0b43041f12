"""Scalar objectives used for training and attacking.

Every loss reduces over the last (class) axis and keeps leading axes, so a
``(batch, N)`` logit matrix yields one value per sample and a length-``N``
vector yields a scalar.  Inputs may be numpy arrays or autodiff tensors; the
result is always a :class:`~maskprobe.autodiff.Tensor`.

Notation for the guided attack: ``u`` are the attacked model's logits on the
perturbed input, ``v`` its logits on the clean input and ``z`` the
surrogate's logits on the perturbed input.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

METRICS = ("cosine", "neg-l1", "neg-l2")
NORM_EPS = 1e-12


class LogitTriple(NamedTuple):
    u: object
    v: object
    z: object


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractViolation(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes)[labels]


def smooth_labels(y, delta: float, num_classes: int | None = None) -> np.ndarray:
    """Move ``delta`` of the probability mass off the true class.

    The true class keeps ``1 - delta`` and every other class receives
    ``delta / (N - 1)``.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[-1] if num_classes is None else num_classes
    if y.shape[-1] != n:
        raise ContractViolation(f"label width {y.shape[-1]} does not match N={n}")
    if not 0.0 <= delta <= 1.0:
        raise ContractViolation(f"smoothing factor must be in [0, 1], got {delta}")
    if n < 2:
        raise ContractViolation("label smoothing needs at least 2 classes")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ContractViolation("smooth_labels expects one-hot labels")
    if delta == 0.0:
        return y.copy()
    off = delta / (n - 1)
    return (1.0 - delta - off) * y + off


def cross_entropy(logits, target) -> Tensor:
    """``-sum_j target_j * log softmax(logits)_j``."""
    logits = ad.as_tensor(logits)
    target = _data(target)
    if target.shape[-1] != logits.shape[-1]:
        raise ContractViolation(f"target width {target.shape[-1]} != logit width {logits.shape[-1]}")
    return -ad.tsum(ad.log_softmax(logits) * target, axis=-1)


def cw_margin(logits, true_class) -> Tensor:
    """Best wrong-class logit minus the true-class logit (positive = misclassified)."""
    logits = ad.as_tensor(logits)
    n = logits.shape[-1]
    if n < 2:
        raise ContractViolation("CW margin needs at least 2 classes")
    onehot = one_hot(true_class, n)
    if onehot.shape != logits.shape:
        onehot = np.broadcast_to(onehot, logits.shape)
    best_other = ad.amax(logits, axis=-1, mask=onehot == 0)
    return best_other - ad.tsum(logits * onehot, axis=-1)


def _nonzero_rows(*vecs):
    for v in vecs:
        norms = np.sqrt((_data(v) ** 2).sum(axis=-1))
        if np.any(norms == 0):
            raise ContractViolation("cosine similarity is undefined for a zero vector")


def similarity(a, b, metric: str = "cosine") -> Tensor:
    """Similarity along the last axis; higher means more alike."""
    if metric not in METRICS:
        raise ContractViolation(f"unknown similarity metric {metric!r}; choose from {METRICS}")
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ContractViolation("similarity needs equal-length vectors")
    if metric == "cosine":
        _nonzero_rows(a, b)
        return ad.dot(a, b) / (ad.l2norm(a) * ad.l2norm(b))
    if metric == "neg-l1":
        return -ad.tsum(ad.absolute(a - b), axis=-1)
    return -ad.l2norm(a - b)


def contrastive_directional(triple: LogitTriple, metric: str = "cosine") -> Tensor:
    """Two-way contrastive loss pulling ``u`` toward ``z`` and away from ``v``.

    Evaluated as ``log(exp(S(v,u)) + exp(S(u,z))) - S(u,z)`` with a
    max-shift, which keeps the unbounded L1/L2 variants finite.
    """
    u, v, z = (ad.as_tensor(t) for t in triple)
    if not (u.shape == v.shape == z.shape):
        raise ContractViolation(f"logit triple shapes differ: {u.shape}, {v.shape}, {z.shape}")
    s_uz = similarity(u, z, metric)
    s_vu = similarity(v, u, metric)
    m = np.maximum(s_uz.data, s_vu.data)  # constant shift; cancels analytically
    lse = ad.log(ad.exp(s_vu - m) + ad.exp(s_uz - m)) + m
    return lse - s_uz


def analytic_grad_lcd(triple: LogitTriple) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form gradients of the cosine contrastive loss w.r.t. ``u`` and ``z``.

    Used only to cross-check the autodiff engine.  Works on single vectors.
    """
    u, v, z = (np.asarray(_data(t), dtype=np.float64) for t in triple)
    _nonzero_rows(u, v, z)
    nu, nz = np.linalg.norm(u), np.linalg.norm(z)
    u_, v_, z_ = u / nu, v / np.linalg.norm(v), z / nz
    a, b = v_ @ u_, u_ @ z_
    # softmax weight of the "negative" pair, computed stably
    w = 1.0 / (1.0 + np.exp(b - a))
    eye = np.eye(u.size)
    grad_u = -((z_ - v_) @ (eye - np.outer(u_, u_))) * w / nu
    grad_z = -(u_ @ (eye - np.outer(z_, z_))) * w / nz
    return grad_u, grad_z


def logit_rescale(u, z) -> Tensor:
    """``(u * z) / ||u||``: attacked logits rescaled elementwise by the surrogate's."""
    u, z = ad.as_tensor(u), ad.as_tensor(z)
    return (u * z) / ad.l2norm(u, keepdims=True, eps=NORM_EPS)


def normalized_cross_entropy(u, z, y) -> Tensor:
    """Cross-entropy of the surrogate-rescaled logits against one-hot ``y``."""
    return cross_entropy(logit_rescale(u, z), y)


def match_and_deceive(triple: LogitTriple, y, metric: str = "cosine") -> Tensor:
    """Normalized cross-entropy minus the contrastive term; attacks maximise it."""
    return normalized_cross_entropy(triple.u, triple.z, y) - contrastive_directional(triple, metric)


def kl_divergence(p_logits, q_logits) -> Tensor:
    """``KL(softmax(p) || softmax(q))`` per row."""
    lp = ad.log_softmax(p_logits)
    lq = ad.log_softmax(q_logits)
    return ad.tsum(ad.exp(lp) * (lp - lq), axis=-1)
