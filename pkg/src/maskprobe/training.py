"""Model-producing procedures.

* :func:`train_natural` -- plain cross-entropy.
* :func:`train_mask_at` -- single-step FGSM adversarial training preceded by a
  large uniform random step and trained against smoothed labels.  This is the
  recipe that deliberately induces gradient masking.
* :func:`train_pgd_at` -- multi-step (Madry-style) adversarial training.
* :func:`train_trades` -- clean CE plus ``beta`` times a KL robustness term.

All trainers use plain SGD without momentum, a step learning-rate schedule
and three independent RNG substreams (``init``, ``shuffle``, ``attack``), so
runs are bitwise reproducible for a given seed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .attacks import PIXEL_MAX, PIXEL_MIN, _input_gradient, project
from .autodiff import RngState, Tensor
from .errors import ContractViolation
from .models import ModelArch, ModelParams, init_model

log = logging.getLogger(__name__)

EpochHook = Callable[[dict], None]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    lr_decay_epochs: tuple[int, ...] = (20,)
    lr_decay_factor: float = 0.1
    epsilon: float = 0.3
    eta: float = 0.0
    delta: float = 0.0
    attack_iters: int = 10
    attack_step: float | None = None  # defaults to epsilon / 4
    beta: float = 0.0
    seed: int = 0
    epsilon_warmup: int = 0  # epochs over which the training budget ramps up linearly

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch size must be positive")
        if not self.lr > 0:
            raise ContractViolation(f"learning rate must be positive, got {self.lr}")
        if self.eta < 0:
            raise ContractViolation(f"eta must be non-negative, got {self.eta}")
        if not 0.0 <= self.delta <= 1.0:
            raise ContractViolation(f"delta must be in [0, 1], got {self.delta}")
        if self.beta < 0:
            raise ContractViolation(f"beta must be non-negative, got {self.beta}")
        if self.attack_iters < 0:
            raise ContractViolation("attack iterations must be non-negative")
        if self.epsilon_warmup < 0:
            raise ContractViolation("epsilon warmup must be non-negative")

    @property
    def step(self) -> float:
        return self.attack_step if self.attack_step is not None else self.epsilon / 4

    def epsilon_at(self, epoch: int) -> float:
        if epoch >= self.epsilon_warmup:
            return self.epsilon
        return self.epsilon * (epoch + 1) / (self.epsilon_warmup + 1)

    def step_at(self, epoch: int) -> float:
        return self.step * self.epsilon_at(epoch) / self.epsilon if self.epsilon > 0 else self.step

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


# ---------------------------------------------------------------------------
# losses on a batch, as functions of the parameter leaves

def _params(model: ModelParams) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in model.weights.items()}


def natural_loss(model: ModelParams, x, y, delta: float = 0.0, params=None) -> Tensor:
    target = losses.smooth_labels(losses.one_hot(y, model.num_classes), delta)
    return ad.mean(losses.cross_entropy(model.forward(x, params)[1], target))


def sgd_step(model: ModelParams, batch_loss: Callable[[dict], Tensor], lr: float) -> float:
    """One in-place SGD update; returns the loss before the update."""
    params = _params(model)
    loss = batch_loss(params)
    grads = ad.forward_backward(loss, params.values())
    for name, leaf in params.items():
        model.weights[name] -= lr * grads[leaf]
    return loss.item()


def _check_budget(x_adv, x, epsilon):
    worst = np.abs(x_adv - x).max() if x.size else 0.0
    if worst > epsilon + 1e-9:
        raise AssertionError(f"training adversary left the epsilon ball: {worst} > {epsilon}")


def _fit(arch: ModelArch, dataset, config: TrainConfig, method: str, hyper: dict,
         make_loss: Callable[[ModelParams, np.ndarray, np.ndarray, RngState, int], Callable[[dict], Tensor]],
         on_epoch: EpochHook | None) -> ModelParams:
    if len(dataset) == 0:
        raise ContractViolation("cannot train on an empty dataset")
    if dataset.labels.min() < 0 or dataset.labels.max() >= arch.num_classes:
        raise ContractViolation(f"labels must lie in [0, {arch.num_classes})")
    rng = RngState(config.seed)
    provenance = {"method": method, "hyperparameters": {**hyper, **config.to_dict()}}
    model = init_model(arch, rng.split("init"), provenance)
    shuffle = rng.split("shuffle").generator
    attack_rng = rng.split("attack")
    x_all, y_all = dataset.images, dataset.labels
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = shuffle.permutation(len(y_all))
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            total += sgd_step(model, make_loss(model, xb, yb, attack_rng, epoch), lr) * len(idx)
            count += len(idx)
        row = {"method": method, "epoch": epoch + 1, "lr": lr, "loss": total / count}
        log.info("%s epoch %d loss %.4f", method, epoch + 1, row["loss"])
        if on_epoch is not None:
            on_epoch(row)
    return model


def train_natural(arch: ModelArch, dataset, config: TrainConfig,
                  on_epoch: EpochHook | None = None) -> ModelParams:
    def make_loss(model, xb, yb, _rng, _epoch):
        return lambda p: natural_loss(model, xb, yb, 0.0, p)

    return _fit(arch, dataset, config, "natural", {}, make_loss, on_epoch)


def mask_at_adversary(model: ModelParams, x, y, epsilon: float, eta: float, delta: float,
                      rng: RngState) -> np.ndarray:
    """Random step of amplitude ``eta * epsilon``, then one FGSM step, clipped to the ball."""
    if eta > 0:
        x_rand = np.clip(x + ad.uniform_noise(x.shape, -1.0, 1.0, rng) * (eta * epsilon),
                         PIXEL_MIN, PIXEL_MAX)
    else:
        x_rand = x
    target = losses.smooth_labels(losses.one_hot(y, model.num_classes), delta)
    _, g = _input_gradient(lambda xt: losses.cross_entropy(model.forward(xt)[1], target), x_rand)
    x_adv = project(x_rand + epsilon * ad.sign(g), x, epsilon)
    _check_budget(x_adv, x, epsilon)
    return x_adv


def train_mask_at(arch: ModelArch, dataset, config: TrainConfig,
                  on_epoch: EpochHook | None = None, method: str = "mask-at") -> ModelParams:
    if not config.epsilon > 0:
        raise ContractViolation("adversarial training needs epsilon > 0")

    def make_loss(model, xb, yb, rng, epoch):
        x_adv = mask_at_adversary(model, xb, yb, config.epsilon_at(epoch), config.eta, config.delta, rng)
        return lambda p: natural_loss(model, x_adv, yb, config.delta, p)

    hyper = {"eta": config.eta, "delta": config.delta}
    return _fit(arch, dataset, config, method, hyper, make_loss, on_epoch)


def train_fgsm_at(arch: ModelArch, dataset, config: TrainConfig,
                  on_epoch: EpochHook | None = None) -> ModelParams:
    """Mask-AT with no random step and no smoothing."""
    return train_mask_at(arch, dataset, replace(config, eta=0.0, delta=0.0), on_epoch, "fgsm-at")


def pgd_adversary(model: ModelParams, x, y, epsilon: float, step: float, iters: int,
                  delta: float, rng: RngState) -> np.ndarray:
    target = losses.smooth_labels(losses.one_hot(y, model.num_classes), delta)
    fn = lambda xt: losses.cross_entropy(model.forward(xt)[1], target)  # noqa: E731
    x_adv = project(x + ad.uniform_noise(x.shape, -epsilon, epsilon, rng), x, epsilon)
    for _ in range(iters):
        _, g = _input_gradient(fn, x_adv)
        x_adv = project(x_adv + step * ad.sign(g), x, epsilon)
    _check_budget(x_adv, x, epsilon)
    return x_adv


def train_pgd_at(arch: ModelArch, dataset, config: TrainConfig,
                 on_epoch: EpochHook | None = None) -> ModelParams:
    if config.attack_iters < 1:
        raise ContractViolation("PGD adversarial training needs at least one attack iteration")
    if not config.epsilon > 0:
        raise ContractViolation("adversarial training needs epsilon > 0")

    def make_loss(model, xb, yb, rng, epoch):
        x_adv = pgd_adversary(model, xb, yb, config.epsilon_at(epoch), config.step_at(epoch), config.attack_iters,
                              config.delta, rng)
        return lambda p: natural_loss(model, x_adv, yb, config.delta, p)

    hyper = {"delta": config.delta, "attack_iters": config.attack_iters}
    return _fit(arch, dataset, config, "pgd-at", hyper, make_loss, on_epoch)


def trades_adversary(model: ModelParams, x, epsilon: float, step: float, iters: int,
                     rng: RngState) -> np.ndarray:
    """Maximise ``KL(f(x_adv) || f(x))`` from a tiny Gaussian start."""
    clean = model.forward(x)[1].data
    x_adv = project(x + 0.001 * rng.generator.standard_normal(x.shape), x, epsilon)
    fn = lambda xt: losses.kl_divergence(model.forward(xt)[1], clean)  # noqa: E731
    for _ in range(iters):
        _, g = _input_gradient(fn, x_adv)
        x_adv = project(x_adv + step * ad.sign(g), x, epsilon)
    _check_budget(x_adv, x, epsilon)
    return x_adv


def trades_loss(model: ModelParams, x, x_adv, y, beta: float, params=None) -> Tensor:
    clean_logits = model.forward(x, params)[1]
    ce = ad.mean(losses.cross_entropy(clean_logits, losses.one_hot(y, model.num_classes)))
    if beta == 0:
        return ce
    adv_logits = model.forward(x_adv, params)[1]
    return ce + beta * ad.mean(losses.kl_divergence(adv_logits, clean_logits))


def train_trades(arch: ModelArch, dataset, config: TrainConfig,
                 on_epoch: EpochHook | None = None) -> ModelParams:
    if not config.epsilon > 0:
        raise ContractViolation("adversarial training needs epsilon > 0")

    def make_loss(model, xb, yb, rng, epoch):
        if config.beta == 0:
            return lambda p: trades_loss(model, xb, xb, yb, 0.0, p)
        x_adv = trades_adversary(model, xb, config.epsilon_at(epoch), config.step_at(epoch), config.attack_iters, rng)
        return lambda p: trades_loss(model, xb, x_adv, yb, config.beta, p)

    return _fit(arch, dataset, config, "trades", {"beta": config.beta}, make_loss, on_epoch)


TRAINERS = {
    "natural": train_natural,
    "fgsm-at": train_fgsm_at,
    "mask-at": train_mask_at,
    "pgd-at": train_pgd_at,
    "trades": train_trades,
}
