"""Experiment configuration: a flat, typed key-value text format.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := '#' anything
    entry   := key ':' type '=' value [ '#' comment ]
    key     := dotted lowercase identifier, e.g. ``train.epsilon``
    type    := int | float | bool | str | path | ints | floats | strs

List types (``ints``, ``floats``, ``strs``) take comma-separated items; an
empty value is the empty list.  ``bool`` accepts true/false/yes/no/1/0.
Every key must be one of :data:`SCHEMA` and its declared type must match
the schema.  Keys may appear at most once.  Example::

    experiment : str   = diagnose
    seed       : int   = 0
    train.eta  : float = 6
    sweep.deltas : floats = 0, 0.25, 0.5, 0.75
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from ..attacks import AttackConfig
from ..autodiff import RngState
from ..errors import ConfigError
from ..training import TrainConfig

EXPERIMENT_KINDS = ("train", "attack", "diagnose", "sweep-eta-delta", "ablate-surrogate",
                    "ablate-metric", "noisy-inference")

# key -> (type, default)
SCHEMA: dict[str, tuple[str, object]] = {
    "experiment": ("str", "train"),
    "seed": ("int", 0),
    "output_dir": ("path", "maskprobe-out"),
    "cache_dir": ("path", ""),
    "data.source": ("str", "synthetic-glyphs"),
    "data.seed": ("int", 1),
    "data.train_images": ("path", ""),
    "data.train_labels": ("path", ""),
    "data.test_images": ("path", ""),
    "data.test_labels": ("path", ""),
    "data.train_per_class": ("int", 1000),
    "data.test_per_class": ("int", 100),
    "data.classes": ("int", 10),
    "data.dim": ("int", 784),
    "data.separation": ("float", 2.0),
    "model.checkpoint": ("path", ""),
    "model.method": ("str", "mask-at"),
    "model.arch": ("str", "small-cnn"),
    "model.hidden": ("ints", [256, 128]),
    "train.epochs": ("int", 10),
    "train.batch_size": ("int", 64),
    "train.lr": ("float", 0.1),
    "train.lr_decay_epochs": ("ints", [7]),
    "train.lr_decay_factor": ("float", 0.1),
    "train.epsilon": ("float", 0.3),
    "train.eta": ("float", 6.0),
    "train.delta": ("float", 0.75),
    "train.attack_iters": ("int", 10),
    "train.attack_step": ("float", 0.0),
    "train.epsilon_warmup": ("int", 4),
    "train.beta": ("float", 0.0),
    "surrogate.checkpoint": ("path", ""),
    "surrogate.method": ("str", "trades"),
    "surrogate.arch": ("str", "small-cnn"),
    "surrogate.beta": ("float", 1.0),
    "surrogate.attack_iters": ("int", 5),
    "attack.kind": ("str", "pgd"),
    "attack.epsilon": ("float", 0.3),
    "attack.step": ("float", 0.0),
    "attack.iters": ("int", 20),
    "attack.random_init": ("bool", False),
    "attack.metric": ("str", "cosine"),
    "attack.smoothing": ("float", 0.0),
    "eval.count": ("int", 0),
    "diagnose.threshold": ("float", 0.10),
    "sweep.methods": ("strs", ["mask-at"]),
    "sweep.etas": ("floats", [4.0, 6.0]),
    "sweep.deltas": ("floats", [0.0, 0.25, 0.5, 0.75]),
    "ablate.surrogates": ("strs", ["natural", "trades", "mlp-natural"]),
    "ablate.metrics": ("strs", ["cosine", "neg-l1", "neg-l2"]),
    "noisy.eta": ("float", 1.0),
}

CHOICES = {
    "experiment": EXPERIMENT_KINDS,
    "data.source": ("idx-files", "synthetic-blobs", "synthetic-glyphs"),
    "model.method": ("natural", "fgsm-at", "mask-at", "pgd-at", "trades"),
    "model.arch": ("small-cnn", "mlp"),
    "surrogate.method": ("natural", "trades"),
    "surrogate.arch": ("small-cnn", "mlp"),
    "attack.kind": ("fgsm", "pgd", "cw", "gpga"),
    "attack.metric": ("cosine", "neg-l1", "neg-l2"),
}

_LINE = re.compile(r"^\s*([a-z_][a-z0-9_.]*)\s*:\s*([a-z]+)\s*=\s*(.*?)\s*$")
_TRUE, _FALSE = {"true", "yes", "1"}, {"false", "no", "0"}


def convert(key: str, type_name: str, raw: str):
    """Parse ``raw`` as ``type_name``; raises :class:`ConfigError` naming the key."""
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if type_name in ("str", "path"):
            return raw
        if type_name in ("ints", "floats", "strs"):
            items = [s.strip() for s in raw.split(",")] if raw.strip() else []
            cast = {"ints": int, "floats": float, "strs": str}[type_name]
            return [cast(s) for s in items]
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type_name}") from None
    raise ConfigError(f"{key}: unknown type {type_name!r}")


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0]


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = _strip_comment(line).strip()
        if not body:
            continue
        m = _LINE.match(body)
        where = f"{source}:{lineno}"
        if not m:
            raise ConfigError(f"{where}: expected 'key : type = value', got {line.strip()!r}")
        key, type_name, raw = m.groups()
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if type_name != SCHEMA[key][0]:
            raise ConfigError(f"{where}: {key} is declared {type_name} but must be {SCHEMA[key][0]}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = convert(key, type_name, raw)
    return values


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text, str(path))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(format_value(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved flat configuration (every schema key present)."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def resolve(cls, *layers: dict) -> "ExperimentConfig":
        """Merge layers over the schema defaults; later layers win."""
        merged = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SCHEMA.items()}
        for layer in layers:
            for key, value in layer.items():
                if key not in SCHEMA:
                    raise ConfigError(f"unknown key {key!r}")
                merged[key] = value
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def validate(self):
        for key, allowed in CHOICES.items():
            if self.values[key] not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {self.values[key]!r}")
        for name in self.values["ablate.surrogates"]:
            if name not in ("natural", "trades", "mlp-natural"):
                raise ConfigError(f"ablate.surrogates: unknown surrogate {name!r}")
        for name in self.values["ablate.metrics"]:
            if name not in CHOICES["attack.metric"]:
                raise ConfigError(f"ablate.metrics: unknown metric {name!r}")
        for name in self.values["sweep.methods"]:
            if name not in ("mask-at", "pgd-at"):
                raise ConfigError(f"sweep.methods: unknown method {name!r}")
        if self.values["data.source"] == "idx-files":
            for key in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels"):
                if not self.values[key]:
                    raise ConfigError(f"{key} is required when data.source = idx-files")
        for key in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels",
                    "model.checkpoint", "surrogate.checkpoint"):
            if self.values[key] and not Path(self.values[key]).exists():
                raise ConfigError(f"{key}: {self.values[key]} does not exist")
        try:
            self.train_config()
            self.attack_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def kind(self) -> str:
        return self.values["experiment"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    @property
    def cache_dir(self) -> Path:
        return Path(self.values["cache_dir"]) if self.values["cache_dir"] else self.output_dir / "checkpoints"

    def train_config(self, **overrides) -> TrainConfig:
        v = self.values
        params = dict(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"], lr=v["train.lr"],
            lr_decay_epochs=tuple(v["train.lr_decay_epochs"]), lr_decay_factor=v["train.lr_decay_factor"],
            epsilon=v["train.epsilon"], eta=v["train.eta"], delta=v["train.delta"],
            attack_iters=v["train.attack_iters"], attack_step=v["train.attack_step"] or None,
            beta=v["train.beta"], seed=v["seed"], epsilon_warmup=v["train.epsilon_warmup"],
        )
        params.update(overrides)
        return TrainConfig(**params)

    def attack_config(self, **overrides) -> AttackConfig:
        v = self.values
        eps = overrides.pop("epsilon", v["attack.epsilon"])
        params = dict(epsilon=eps, step=v["attack.step"] or eps / 4, iters=v["attack.iters"],
                      metric=v["attack.metric"], smoothing=v["attack.smoothing"])
        params.update(overrides)
        if v["attack.random_init"]:
            params.update(random_init=True, rng=RngState(v["seed"]).split("attack-init"))
        return AttackConfig(**params)

    def to_dict(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}

    def to_text(self) -> str:
        lines = [f"{k} : {SCHEMA[k][0]} = {format_value(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"
