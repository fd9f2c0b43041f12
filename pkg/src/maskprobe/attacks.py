"""L-infinity bounded attacks and a randomized-input defense wrapper.

All attacks keep adversaries inside ``[x - eps, x + eps]`` and the pixel range
``[-1, 1]``.  Samples are attacked independently; large inputs are processed
in chunks of ``chunk`` samples, which does not change the result.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import RngState, Tensor
from .errors import ContractViolation

PIXEL_MIN, PIXEL_MAX = -1.0, 1.0
LOSS_KINDS = ("ce", "cw", "match-deceive")


@dataclass
class AttackConfig:
    epsilon: float
    step: float
    iters: int
    random_init: bool = False
    init_scale: float = 1.0
    loss: str = "ce"
    metric: str = "cosine"
    smoothing: float = 0.0  # label smoothing applied to the CE attack target
    rng: RngState | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractViolation(f"epsilon must be positive, got {self.epsilon}")
        if not self.step > 0:
            raise ContractViolation(f"step size must be positive, got {self.step}")
        if self.iters < 0:
            raise ContractViolation(f"iterations must be non-negative, got {self.iters}")
        if self.loss not in LOSS_KINDS:
            raise ContractViolation(f"unknown attack loss {self.loss!r}")
        if self.metric not in losses.METRICS:
            raise ContractViolation(f"unknown similarity metric {self.metric!r}")
        if self.random_init and self.rng is None:
            raise ContractViolation("random_init requires an rng")
        if self.step > 2 * self.epsilon:
            warnings.warn(f"step {self.step} exceeds twice the budget {self.epsilon}", stacklevel=2)

    @classmethod
    def default(cls, epsilon: float, **overrides) -> "AttackConfig":
        """Desk defaults: 20 iterations of size epsilon/4, no random start."""
        params = dict(epsilon=epsilon, step=epsilon / 4, iters=20)
        params.update(overrides)
        return cls(**params)


@dataclass
class AdversarialBatch:
    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    grad_l1: np.ndarray  # (iterations, samples): ||g_t||_1 per sample
    success: np.ndarray  # True where the attacked model misclassifies the adversary
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    initial_grad: np.ndarray | None = None

    @property
    def linf(self) -> np.ndarray:
        diff = (self.adversarial - self.clean).reshape(len(self.clean), -1)
        return np.abs(diff).max(axis=1) if diff.size else np.zeros(len(self.clean))


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the epsilon box around ``x`` and then into the pixel range."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), PIXEL_MIN, PIXEL_MAX)


def _check_inputs(x: np.ndarray, y: np.ndarray):
    if len(x) != len(y):
        raise ContractViolation(f"{len(x)} inputs but {len(y)} labels")
    if x.size and (x.min() < PIXEL_MIN or x.max() > PIXEL_MAX):
        raise ContractViolation("inputs must lie in the pixel range [-1, 1]")


def _input_gradient(loss_fn, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xt = Tensor(x, requires_grad=True)
    per_sample = loss_fn(xt)
    g = ad.forward_backward(ad.tsum(per_sample), [xt])[xt]
    return per_sample.data, g


def _loss_fn(model, loss: str, y: np.ndarray, smoothing: float):
    n = model.num_classes
    if loss == "ce":
        target = losses.smooth_labels(losses.one_hot(y, n), smoothing, n)
        return lambda xt: losses.cross_entropy(model.forward(xt)[1], target)
    if loss == "cw":
        return lambda xt: losses.cw_margin(model.forward(xt)[1], y)
    raise ContractViolation(f"loss {loss!r} needs a surrogate; use gpga()")


def _sign_ascent(loss_fn_for, x, y, config: AttackConfig, start: np.ndarray):
    """Shared sign-gradient ascent loop; ``loss_fn_for(x, y)`` builds the per-sample loss."""
    x_adv = start
    l1 = np.zeros((config.iters, len(x)))
    trace = np.zeros((config.iters, len(x)))
    fn = loss_fn_for(x, y)
    for t in range(config.iters):
        trace[t], g = _input_gradient(fn, x_adv)
        l1[t] = np.abs(g).reshape(len(x), -1).sum(axis=1)
        x_adv = project(x_adv + config.step * ad.sign(g), x, config.epsilon)
    return x_adv, l1, trace


def _finish(model, x, x_adv, y, l1, trace) -> AdversarialBatch:
    from .models import predict
    success = predict(model, x_adv) != y if len(x) else np.zeros(0, dtype=bool)
    return AdversarialBatch(x, x_adv, y, l1, success, trace, np.zeros_like(x))


def fgsm(model, x, y, epsilon: float, smoothing: float = 0.0, chunk: int = 256) -> AdversarialBatch:
    """One signed-gradient step of size ``epsilon`` on the (optionally smoothed) CE loss."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    _check_inputs(x, y)
    if not epsilon > 0:
        raise ContractViolation(f"epsilon must be positive, got {epsilon}")
    adv, l1, trace = [], [], []
    for i in range(0, len(x), chunk):
        xb, yb = x[i:i + chunk], y[i:i + chunk]
        loss_b, g = _input_gradient(_loss_fn(model, "ce", yb, smoothing), xb)
        adv.append(project(xb + epsilon * ad.sign(g), xb, epsilon))
        l1.append(np.abs(g).reshape(len(xb), -1).sum(axis=1))
        trace.append(loss_b)
    x_adv = np.concatenate(adv) if adv else x.copy()
    l1_arr = np.concatenate(l1)[None, :] if l1 else np.zeros((1, 0))
    tr_arr = np.concatenate(trace)[None, :] if trace else np.zeros((1, 0))
    return _finish(model, x, x_adv, y, l1_arr, tr_arr)


def _random_start(x, config: AttackConfig) -> np.ndarray:
    if not config.random_init:
        return x.copy()
    amp = config.epsilon * config.init_scale
    return project(x + ad.uniform_noise(x.shape, -amp, amp, config.rng), x, config.epsilon)


def _run_iterative(model, x, y, config, loss_fn_for, chunk):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    _check_inputs(x, y)
    start = _random_start(x, config)  # drawn once for the whole input: chunk-independent
    adv, l1, trace = [], [], []
    for i in range(0, len(x), chunk):
        a, g, t = _sign_ascent(loss_fn_for, x[i:i + chunk], y[i:i + chunk], config, start[i:i + chunk])
        adv.append(a)
        l1.append(g)
        trace.append(t)
    if not adv:
        return _finish(model, x, x.copy(), y, np.zeros((config.iters, 0)), np.zeros((config.iters, 0)))
    return _finish(model, x, np.concatenate(adv), y, np.concatenate(l1, axis=1),
                   np.concatenate(trace, axis=1))


def pgd(model, x, y, config: AttackConfig, chunk: int = 256) -> AdversarialBatch:
    """Projected sign-gradient ascent on the CE (optionally smoothed) or CW margin loss."""
    if config.loss == "match-deceive":
        raise ContractViolation("match-deceive loss needs a surrogate; use gpga()")
    return _run_iterative(model, x, y, config,
                          lambda xb, yb: _loss_fn(model, config.loss, yb, config.smoothing), chunk)


def gpga(model, surrogate, x, y, config: AttackConfig, chunk: int = 256) -> AdversarialBatch:
    """Guided projected gradient attack.

    Starts at the clean input (no random restart) and ascends the
    match-and-deceive loss, whose gradient reaches the input through both
    the attacked model and the surrogate.
    """
    if model.num_classes != surrogate.num_classes:
        raise ContractViolation(
            f"model has {model.num_classes} classes but surrogate has {surrogate.num_classes}")
    n = model.num_classes

    def loss_for(xb, yb):
        onehot = losses.one_hot(yb, n)

        def fn(xt):
            v = model.forward(xb)[1].data  # clean logits: constant w.r.t. the perturbation
            u = model.forward(xt)[1]
            z = surrogate.forward(xt)[1]
            return losses.match_and_deceive(losses.LogitTriple(u, v, z), onehot, config.metric)

        return fn

    cfg = AttackConfig(config.epsilon, config.step, config.iters, random_init=False,
                       loss="match-deceive", metric=config.metric)
    return _run_iterative(model, x, y, cfg, loss_for, chunk)


def run_attack(kind: str, model, x, y, config: AttackConfig, surrogate=None,
               chunk: int = 256) -> AdversarialBatch:
    """Dispatch by name: ``fgsm``, ``pgd`` (CE), ``cw`` (CW-margin PGD) or ``gpga``."""
    if kind == "fgsm":
        return fgsm(model, x, y, config.epsilon, config.smoothing, chunk)
    if kind == "pgd":
        return pgd(model, x, y, _replace(config, loss="ce"), chunk)
    if kind == "cw":
        return pgd(model, x, y, _replace(config, loss="cw"), chunk)
    if kind == "gpga":
        if surrogate is None:
            raise ContractViolation("gpga needs a surrogate model")
        return gpga(model, surrogate, x, y, config, chunk)
    raise ContractViolation(f"unknown attack {kind!r}")


def _replace(config: AttackConfig, **changes) -> AttackConfig:
    from dataclasses import replace
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return replace(config, **changes)


class RandomizedInput:
    """Model view that adds fresh uniform noise of amplitude ``eta * epsilon`` to every query.

    Noise is applied before the wrapped model and the noisy input is clamped
    to the pixel range.  With ``eta == 0`` the wrapper is transparent.
    """

    def __init__(self, model, eta: float, epsilon: float, rng: RngState):
        if eta < 0:
            raise ContractViolation(f"eta must be non-negative, got {eta}")
        self.model = model
        self.eta = float(eta)
        self.epsilon = float(epsilon)
        self.rng = rng

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @property
    def arch(self):
        return self.model.arch

    def forward(self, x, params=None):
        if self.eta == 0:
            return self.model.forward(x, params)
        x = ad.as_tensor(x)
        amp = self.eta * self.epsilon
        noise = ad.uniform_noise(x.shape, -amp, amp, self.rng)
        return self.model.forward(ad.clip(x + noise, PIXEL_MIN, PIXEL_MAX), params)


def randomized_inference_wrapper(model, eta: float, epsilon: float, rng: RngState) -> RandomizedInput:
    return RandomizedInput(model, eta, epsilon, rng)
