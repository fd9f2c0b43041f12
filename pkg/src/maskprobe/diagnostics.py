"""Masking diagnosis.

The test compares a plain white-box attack (PGD on cross-entropy) against
the surrogate-guided attack.  A model whose robustness comes from
suppressed or misleading input gradients holds up against PGD but loses
much more accuracy when a masking-free surrogate supplies the direction,
so a large ``acc(PGD) - acc(G-PGA)`` gap is reported as suspected masking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attacks import AdversarialBatch, AttackConfig, run_attack
from .errors import ContractViolation, MaskProbeError
from .models import forward_features, predict

DEFAULT_GAP_THRESHOLD = 0.10
VERDICTS = ("no-masking", "suspected-masking")
DIAGNOSIS_ATTACKS = ("pgd", "cw", "gpga")


def gradient_l1_stats(run: AdversarialBatch) -> np.ndarray:
    """Mean over samples of ``||g_t||_1`` for every recorded iteration ``t``."""
    trace = np.asarray(run.grad_l1)
    if trace.ndim != 2 or trace.shape[0] == 0 or trace.shape[1] == 0:
        raise ContractViolation("attack run has no recorded gradient trace")
    return trace.mean(axis=1)


def feature_distortion(model, clean, adversarial) -> float:
    """Mean over samples of the L1 distance between penultimate features."""
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.shape != adversarial.shape:
        raise ContractViolation(f"clean batch {clean.shape} and adversarial batch {adversarial.shape} differ")
    if len(clean) == 0:
        raise ContractViolation("feature distortion of an empty batch")
    diff = forward_features(model, adversarial) - forward_features(model, clean)
    return float(np.abs(diff).sum(axis=1).mean())


def accuracy(model, x, y) -> Fraction:
    """Exact fraction of correctly classified samples."""
    if len(y) == 0:
        raise ContractViolation("accuracy of an empty set")
    return Fraction(int((predict(model, x) == np.asarray(y)).sum()), len(y))


@dataclass
class MaskingReport:
    model_id: str
    provenance: dict
    clean_accuracy: Fraction
    adversarial_accuracy: dict[str, Fraction]
    mean_grad_l1: dict[str, float]
    mean_feat_l1: dict[str, float]
    threshold: float = DEFAULT_GAP_THRESHOLD
    reference: str = "pgd"
    guided: str = "gpga"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, acc in [("clean", self.clean_accuracy), *self.adversarial_accuracy.items()]:
            if not 0 <= acc <= 1:
                raise ContractViolation(f"{name} accuracy {acc} outside [0, 1]")
        for name in (self.reference, self.guided):
            if name not in self.adversarial_accuracy:
                raise ContractViolation(f"report has no accuracy for attack {name!r}")

    def gap(self, first: str, second: str) -> float:
        """``acc(first) - acc(second)``, computed exactly before rounding to float."""
        return float(self.adversarial_accuracy[first] - self.adversarial_accuracy[second])

    @property
    def masking_gap(self) -> float:
        return self.gap(self.reference, self.guided)

    @property
    def verdict(self) -> str:
        return VERDICTS[1] if self.masking_gap > self.threshold else VERDICTS[0]

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "provenance": self.provenance,
            "clean_accuracy": float(self.clean_accuracy),
            "adversarial_accuracy": {k: float(v) for k, v in self.adversarial_accuracy.items()},
            "counts": {k: [v.numerator, v.denominator]
                       for k, v in [("clean", self.clean_accuracy), *self.adversarial_accuracy.items()]},
            "mean_grad_l1": dict(self.mean_grad_l1),
            "mean_feat_l1": dict(self.mean_feat_l1),
            "masking_gap": self.masking_gap,
            "verdict": self.verdict,
            "threshold": self.threshold,
            "config": self.config,
        }


def _configs(attack_configs) -> dict[str, AttackConfig]:
    if isinstance(attack_configs, AttackConfig):
        return {k: attack_configs for k in DIAGNOSIS_ATTACKS}
    missing = [k for k in DIAGNOSIS_ATTACKS if k not in attack_configs]
    if missing:
        raise ContractViolation(f"missing attack configs for {missing}")
    return dict(attack_configs)


def masking_diagnosis(model, surrogate, eval_set, attack_configs,
                      gap_threshold: float = DEFAULT_GAP_THRESHOLD,
                      runs: dict | None = None) -> MaskingReport:
    """Evaluate clean accuracy, PGD, CW-PGD and G-PGA and issue a verdict.

    ``attack_configs`` is one :class:`AttackConfig` shared by all attacks or
    a mapping from attack name to config.  Pass a dict as ``runs`` to
    receive the raw :class:`AdversarialBatch` per attack.
    """
    if len(eval_set) == 0:
        raise ContractViolation("evaluation set is empty")
    if not gap_threshold > 0:
        raise ContractViolation(f"gap threshold must be positive, got {gap_threshold}")
    configs = _configs(attack_configs)
    x, y = eval_set.images, eval_set.labels
    adv_acc, grad_l1, feat_l1 = {}, {}, {}
    for kind in DIAGNOSIS_ATTACKS:
        try:
            run = run_attack(kind, model, x, y, configs[kind], surrogate)
        except MaskProbeError as exc:
            raise type(exc)(f"{kind} attack failed during diagnosis: {exc}") from exc
        adv_acc[kind] = Fraction(int((~run.success).sum()), len(y))
        grad_l1[kind] = float(gradient_l1_stats(run).mean()) if configs[kind].iters else 0.0
        feat_l1[kind] = feature_distortion(model, x, run.adversarial)
        if runs is not None:
            runs[kind] = run
    return MaskingReport(
        model_id=model.model_id,
        provenance=model.provenance,
        clean_accuracy=accuracy(model, x, y),
        adversarial_accuracy=adv_acc,
        mean_grad_l1=grad_l1,
        mean_feat_l1=feat_l1,
        threshold=gap_threshold,
        config={k: {"epsilon": c.epsilon, "step": c.step, "iters": c.iters, "metric": c.metric}
                for k, c in configs.items()},
    )
