"""Named experiment recipes.

Every recipe reads an :class:`ExperimentConfig`, obtains the models it needs
(loading checkpoints or training and caching them), runs its attacks and
writes ``report.json`` plus CSV tables into ``output_dir``.  A failing
recipe still writes what it has, with ``"complete": false`` in the JSON.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import replace
from fractions import Fraction
from itertools import product
from pathlib import Path

from ..attacks import AttackConfig, RandomizedInput, run_attack
from ..autodiff import RngState
from ..diagnostics import accuracy, feature_distortion, gradient_l1_stats, masking_diagnosis
from ..errors import MaskProbeError
from ..models import ModelArch, load_checkpoint, save_checkpoint
from ..training import TRAINERS
from . import report as rp
from .config import ExperimentConfig
from .data import Dataset, generate_glyphs, generate_synthetic, load_idx_dataset

log = logging.getLogger(__name__)


class ExperimentError(MaskProbeError):
    """A recipe failed; the message carries the chain of steps that led there."""


# ---------------------------------------------------------------------------
# data and models

def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    source = cfg["data.source"]
    if source == "idx-files":
        train = load_idx_dataset(cfg["data.train_images"], cfg["data.train_labels"], "train")
        test = load_idx_dataset(cfg["data.test_images"], cfg["data.test_labels"], "test", train.num_classes)
    elif source == "synthetic-blobs":
        def blobs(per_class, split):
            return generate_synthetic(cfg["data.classes"], per_class, cfg["data.dim"], cfg["data.separation"],
                                      RngState(cfg["data.seed"]), split)

        train, test = blobs(cfg["data.train_per_class"], "train"), blobs(cfg["data.test_per_class"], "test")
    else:
        train = generate_glyphs(cfg["data.train_per_class"], RngState(cfg["data.seed"]), "train")
        test = generate_glyphs(cfg["data.test_per_class"], RngState(cfg["data.seed"]), "test")
    if cfg["eval.count"] > 0:
        test = test.subset(cfg["eval.count"])
    return train, test


def make_arch(kind: str, data: Dataset, hidden) -> ModelArch:
    shape = data.images.shape[1:]
    if kind == "small-cnn":
        if len(shape) != 3:
            raise ExperimentError(f"small-cnn needs image-shaped data, got sample shape {shape}")
        return ModelArch.small_cnn(input_shape=shape, num_classes=data.num_classes)
    width = 1
    for d in shape:
        width *= d
    return ModelArch.mlp([width, *hidden, data.num_classes], input_shape=shape)


class ModelStore:
    """Trains models on demand and caches them by a hash of their full recipe."""

    def __init__(self, cfg: ExperimentConfig, train: Dataset):
        self.cfg = cfg
        self.train = train
        self.root = cfg.cache_dir
        self.data_key = {k: cfg[k] for k in sorted(cfg.values) if k.startswith("data.")}

    def get(self, method: str, arch: ModelArch, train_cfg, on_epoch=None) -> tuple:
        recipe = {"method": method, "arch": arch.to_dict(), "train": train_cfg.to_dict(), "data": self.data_key}
        digest = hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:10]
        model_id = f"{method}-{digest}"
        path = self.root / f"{model_id}.ckpt"
        if path.exists() and on_epoch is None:
            log.info("loading cached %s", path)
            return load_checkpoint(path), path
        log.info("training %s", model_id)
        try:
            model = TRAINERS[method](arch, self.train, train_cfg, on_epoch)
        except MaskProbeError as exc:
            raise ExperimentError(f"training {model_id} failed: {exc}") from exc
        model.provenance["model_id"] = model_id
        self.root.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path)
        return model, path

    def target(self, method: str | None = None, **train_overrides):
        cfg = self.cfg
        if cfg["model.checkpoint"] and method is None and not train_overrides:
            return load_checkpoint(cfg["model.checkpoint"])
        arch = make_arch(cfg["model.arch"], self.train, cfg["model.hidden"])
        return self.get(method or cfg["model.method"], arch, cfg.train_config(**train_overrides))[0]

    def surrogate(self, name: str | None = None):
        """``name`` is ``natural``, ``trades`` or ``mlp-natural``; None means the configured surrogate."""
        cfg = self.cfg
        if name is None:
            if cfg["surrogate.checkpoint"]:
                return load_checkpoint(cfg["surrogate.checkpoint"])
            method, arch_kind = cfg["surrogate.method"], cfg["surrogate.arch"]
        else:
            method = "natural" if name in ("natural", "mlp-natural") else "trades"
            arch_kind = "mlp" if name == "mlp-natural" else "small-cnn"
        arch = make_arch(arch_kind, self.train, cfg["model.hidden"])
        beta = cfg["surrogate.beta"] if method == "trades" else 0.0
        train_cfg = cfg.train_config(eta=0.0, delta=0.0, beta=beta, attack_iters=cfg["surrogate.attack_iters"])
        return self.get(method, arch, train_cfg)[0]


# ---------------------------------------------------------------------------
# rows

def _loss_kind(kind: str, config: AttackConfig) -> str:
    if kind == "gpga":
        return f"md-{config.metric}"
    return "cw" if kind == "cw" else "ce"


def attack_row(model, kind: str, config: AttackConfig, test: Dataset, clean: Fraction, seed: int,
               surrogate=None, label: str | None = None) -> dict:
    run = run_attack(kind, model, test.images, test.labels, config, surrogate)
    adv = Fraction(int((~run.success).sum()), len(test))
    grad = float(gradient_l1_stats(run).mean()) if run.grad_l1.size else 0.0
    return {
        "model_id": model.model_id,
        "provenance": model.provenance.get("method", "unknown"),
        "attack": label or kind,
        "loss_kind": _loss_kind(kind, config),
        "epsilon": config.epsilon,
        "step": config.epsilon if kind == "fgsm" else config.step,
        "iters": 1 if kind == "fgsm" else config.iters,
        "clean_acc": clean,
        "adv_acc": adv,
        "mean_grad_l1": grad,
        "mean_feat_l1": feature_distortion(model, test.images, run.adversarial),
        "seed": seed,
    }


def _json_rows(rows):
    return [{k: (float(v) if isinstance(v, Fraction) else v) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# recipes

def _train(cfg, store, train, test, out):
    rows = out["tables"].setdefault("epochs.csv", ([], rp.EPOCH_COLUMNS))[0]
    arch = make_arch(cfg["model.arch"], train, cfg["model.hidden"])
    model, _ = store.get(cfg["model.method"], arch, cfg.train_config(), on_epoch=rows.append)
    target = Path(cfg.output_dir) / "model.ckpt"
    save_checkpoint(model, target)
    out["results"] = {"model_id": model.model_id, "checkpoint": str(target),
                      "provenance": model.provenance, "clean_accuracy": float(accuracy(model, test.images, test.labels))}


def _attack(cfg, store, train, test, out):
    model = store.target()
    kind = cfg["attack.kind"]
    surrogate = store.surrogate() if kind == "gpga" else None
    clean = accuracy(model, test.images, test.labels)
    rows = out["tables"].setdefault("attack.csv", ([], rp.ATTACK_COLUMNS))[0]
    rows.append(attack_row(model, kind, cfg.attack_config(), test, clean, cfg["seed"], surrogate))
    out["results"] = {"rows": _json_rows(rows)}


def _diagnose(cfg, store, train, test, out):
    model = store.target()
    surrogate = store.surrogate()
    runs = {}
    attack_cfg = cfg.attack_config()
    rep = masking_diagnosis(model, surrogate, test, attack_cfg, cfg["diagnose.threshold"], runs=runs)
    rows = out["tables"].setdefault("attack.csv", ([], rp.ATTACK_COLUMNS))[0]
    for kind in ("pgd", "cw", "gpga"):
        rows.append({
            "model_id": model.model_id, "provenance": model.provenance.get("method", "unknown"),
            "attack": kind, "loss_kind": _loss_kind(kind, attack_cfg), "epsilon": attack_cfg.epsilon,
            "step": attack_cfg.step, "iters": attack_cfg.iters, "clean_acc": rep.clean_accuracy,
            "adv_acc": rep.adversarial_accuracy[kind], "mean_grad_l1": rep.mean_grad_l1[kind],
            "mean_feat_l1": rep.mean_feat_l1[kind], "seed": cfg["seed"],
        })
    out["results"] = {"report": rep.to_dict(), "surrogate_id": surrogate.model_id}


def _sweep(cfg, store, train, test, out):
    surrogate = store.surrogate()
    attack_cfg = cfg.attack_config()
    attack_rows = out["tables"].setdefault("attack.csv", ([], rp.ATTACK_COLUMNS))[0]
    sweep_rows = out["tables"].setdefault("sweep.csv", ([], rp.SWEEP_COLUMNS))[0]
    violations = []
    for method in cfg["sweep.methods"]:
        etas = cfg["sweep.etas"] if method == "mask-at" else [0.0]
        for eta, delta in product(etas, cfg["sweep.deltas"]):
            model = store.target(method, eta=eta, delta=delta)
            clean = accuracy(model, test.images, test.labels)
            p = attack_row(model, "pgd", attack_cfg, test, clean, cfg["seed"])
            g = attack_row(model, "gpga", attack_cfg, test, clean, cfg["seed"], surrogate)
            attack_rows.extend([p, g])
            gap = p["adv_acc"] - g["adv_acc"]
            verdict = "suspected-masking" if gap > cfg["diagnose.threshold"] else "no-masking"
            sweep_rows.append({
                "model_id": model.model_id, "method": method, "eta": eta, "delta": delta,
                "epsilon": attack_cfg.epsilon, "iters": attack_cfg.iters, "clean_acc": clean,
                "pgd_acc": p["adv_acc"], "gpga_acc": g["adv_acc"], "gap": gap,
                "pgd_grad_l1": p["mean_grad_l1"], "gpga_grad_l1": g["mean_grad_l1"],
                "pgd_feat_l1": p["mean_feat_l1"], "gpga_feat_l1": g["mean_feat_l1"],
                "verdict": verdict, "seed": cfg["seed"],
            })
            # ordering G-PGA <= PGD <= clean, 2 points of slack on the second inequality
            if verdict == "suspected-masking" and (g["adv_acc"] > p["adv_acc"]
                                                   or p["adv_acc"] > clean + Fraction(2, 100)):
                violations.append(model.model_id)
    out["results"] = {"cells": _json_rows(sweep_rows), "surrogate_id": surrogate.model_id,
                      "ordering_violations": violations}


def _ablate_surrogate(cfg, store, train, test, out):
    model = store.target()
    attack_cfg = cfg.attack_config()
    clean = accuracy(model, test.images, test.labels)
    rows = out["tables"].setdefault("attack.csv", ([], rp.ATTACK_COLUMNS))[0]
    rows.append(attack_row(model, "pgd", attack_cfg, test, clean, cfg["seed"]))
    for name in cfg["ablate.surrogates"]:
        sur = store.surrogate(name)
        rows.append(attack_row(model, "gpga", attack_cfg, test, clean, cfg["seed"], sur, label=f"gpga:{name}"))
    out["results"] = {"rows": _json_rows(rows)}


def _ablate_metric(cfg, store, train, test, out):
    model = store.target()
    surrogate = store.surrogate()
    clean = accuracy(model, test.images, test.labels)
    rows = out["tables"].setdefault("attack.csv", ([], rp.ATTACK_COLUMNS))[0]
    base = cfg.attack_config()
    rows.append(attack_row(model, "pgd", base, test, clean, cfg["seed"]))
    for metric in cfg["ablate.metrics"]:
        rows.append(attack_row(model, "gpga", replace(base, metric=metric), test, clean, cfg["seed"], surrogate))
    out["results"] = {"rows": _json_rows(rows), "surrogate_id": surrogate.model_id}


def _noisy(cfg, store, train, test, out):
    base = store.target()
    surrogate = store.surrogate()
    attack_cfg = cfg.attack_config()
    rng = RngState(cfg["seed"]).split("noisy-inference")
    model = RandomizedInput(base, cfg["noisy.eta"], attack_cfg.epsilon, rng)
    model.model_id = base.model_id
    model.provenance = base.provenance
    clean = accuracy(model, test.images, test.labels)
    rows = out["tables"].setdefault("attack.csv", ([], rp.ATTACK_COLUMNS))[0]
    for kind in ("pgd", "gpga"):
        rows.append(attack_row(model, kind, attack_cfg, test, clean, cfg["seed"],
                               surrogate if kind == "gpga" else None, label=f"{kind}:noisy"))
    out["results"] = {"rows": _json_rows(rows), "eta": cfg["noisy.eta"]}


RECIPES = {
    "train": _train,
    "attack": _attack,
    "diagnose": _diagnose,
    "sweep-eta-delta": _sweep,
    "ablate-surrogate": _ablate_surrogate,
    "ablate-metric": _ablate_metric,
    "noisy-inference": _noisy,
}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the configured recipe and write its outputs; returns the JSON report.

    On failure the partial tables and a JSON report with ``complete: false``
    are written before :class:`ExperimentError` is raised.
    """
    out_dir = cfg.output_dir
    out: dict = {"tables": {}, "results": {}}
    complete, error = True, None
    try:
        train, test = load_data(cfg)
        RECIPES[cfg.kind](cfg, ModelStore(cfg, train), train, test, out)
    except MaskProbeError as exc:
        complete, error = False, exc
    results = dict(out["results"])
    if error is not None:
        results["error"] = f"{type(error).__name__}: {error}"
    report = rp.envelope(cfg.kind, cfg.to_dict(), results, complete)
    for name, (rows, columns) in out["tables"].items():
        rp.emit_report(rows, "csv", out_dir / name, columns)
    rp.emit_report(report, "json", out_dir / "report.json")
    if error is not None:
        raise ExperimentError(f"experiment {cfg.kind!r} failed: {error}") from error
    return report
