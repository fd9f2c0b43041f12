"""Command line entry point.

Verbs map onto experiment kinds::

    maskprobe train     -> train
    maskprobe attack    -> attack
    maskprobe diagnose  -> diagnose
    maskprobe sweep     -> sweep-eta-delta
    maskprobe ablate surrogate|metric
    maskprobe noisy     -> noisy-inference
    maskprobe gen-data  writes a glyph dataset as IDX files

``--config FILE`` supplies any schema key; flags override it, and
``--set key=value`` overrides any key by name.  Exit status is 0 on
success, 1 for configuration errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..autodiff import RngState
from ..errors import ConfigError, MaskProbeError
from .config import SCHEMA, ExperimentConfig, convert, load_config_file
from .data import generate_glyphs, write_idx

VERBS = {
    "train": "train",
    "attack": "attack",
    "diagnose": "diagnose",
    "sweep": "sweep-eta-delta",
    "noisy": "noisy-inference",
}

# flag -> schema key
FLAGS = {
    "seed": "seed",
    "out": "output_dir",
    "cache_dir": "cache_dir",
    "data_source": "data.source",
    "train_images": "data.train_images",
    "train_labels": "data.train_labels",
    "test_images": "data.test_images",
    "test_labels": "data.test_labels",
    "train_per_class": "data.train_per_class",
    "test_per_class": "data.test_per_class",
    "checkpoint": "model.checkpoint",
    "method": "model.method",
    "arch": "model.arch",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "train_epsilon": "train.epsilon",
    "eta": "train.eta",
    "delta": "train.delta",
    "beta": "train.beta",
    "surrogate": "surrogate.checkpoint",
    "surrogate_method": "surrogate.method",
    "attack_kind": "attack.kind",
    "epsilon": "attack.epsilon",
    "step": "attack.step",
    "iters": "attack.iters",
    "metric": "attack.metric",
    "eval_count": "eval.count",
    "threshold": "diagnose.threshold",
    "noisy_eta": "noisy.eta",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskprobe", description="Gradient-masking diagnosis toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in [*VERBS, "ablate"]:
        p = sub.add_parser(verb)
        if verb == "ablate":
            p.add_argument("ablation", choices=("surrogate", "metric"))
        p.add_argument("--config", type=Path, help="flat typed key-value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        for flag, key in FLAGS.items():
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, metavar=SCHEMA[key][0].upper(),
                           help=key)
    gen = sub.add_parser("gen-data", help="write a synthetic glyph dataset as IDX files")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--per-class", type=int, default=1000)
    gen.add_argument("--test-per-class", type=int, default=100)
    gen.add_argument("--seed", type=int, default=1)
    return parser


def resolve_args(args) -> ExperimentConfig:
    layers = []
    if args.config is not None:
        layers.append(load_config_file(args.config))
    overrides = {}
    for flag, key in FLAGS.items():
        raw = getattr(args, flag)
        if raw is not None:
            overrides[key] = convert(key, SCHEMA[key][0], raw)
    for item in args.set:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in SCHEMA:
            raise ConfigError(f"--set expects KEY=VALUE with a known key, got {item!r}")
        overrides[key] = convert(key, SCHEMA[key][0], raw.strip())
    kind = "ablate-" + args.ablation if args.verb == "ablate" else VERBS[args.verb]
    overrides["experiment"] = kind
    layers.append(overrides)
    return ExperimentConfig.resolve(*layers)


def _gen_data(args) -> int:
    rng = RngState(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for split, per in (("train", args.per_class), ("test", args.test_per_class)):
        ds = generate_glyphs(per, rng, split)
        write_idx(ds, args.out / f"{split}-images.idx", args.out / f"{split}-labels.idx")
    print(f"wrote glyph IDX files to {args.out}")
    return 0


def main(argv=None) -> int:
    from .experiments import run_experiment

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.verb == "gen-data":
            return _gen_data(args)
        cfg = resolve_args(args)
    except ConfigError as exc:
        print(f"maskprobe: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        report = run_experiment(cfg)
    except (MaskProbeError, OSError) as exc:
        print(f"maskprobe: {exc}", file=sys.stderr)
        return 2
    print(f"{cfg.kind}: wrote {cfg.output_dir / 'report.json'}")
    results = report["results"]
    if cfg.kind == "diagnose":
        r = results["report"]
        print(f"verdict {r['verdict']} (gap {r['masking_gap']:.4f}, threshold {r['threshold']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
