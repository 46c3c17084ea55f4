"""Command-line interface.

Subcommands: gen-data, train, eval, ablate-sap, ablate-fusion, token-drop.
Common flags: --config <path> (JSON run configuration), --seed <u64> (overrides
the config seed), --out <dir> (report/output directory).

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import dataset_io, harness, synth
from .config import ConfigError, RunConfig, load_config
from .tensor import DimensionError, DomainError, EvaluationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _add_common(parser):
    parser.add_argument("--config", type=str, default=None, help="JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=str, default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eofuse", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, descr in [
        ("gen-data", "generate the configured scenes into a dataset container"),
        ("train", "train a model and write checkpoint, history, and metrics"),
        ("ablate-sap", "train the attention-supervision layer-mode arms"),
        ("ablate-fusion", "train the fusion-variant arms"),
    ]:
        p = sub.add_parser(name, help=descr)
        _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured eval scenes")
    _add_common(p)
    p.add_argument("--ckpt", type=str, required=True, help="checkpoint file to evaluate")

    p = sub.add_parser("token-drop", help="evaluate token dropping on a trained fused model")
    _add_common(p)
    p.add_argument("--ratios", type=str, default="0.25,0.5,0.75,1.0",
                   help="comma-separated keep ratios in (0, 1]")
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_gen_data(cfg: RunConfig, args) -> None:
    spec = harness.scene_spec(cfg)
    total = cfg.data.train_scenes + cfg.data.eval_scenes
    scenes = [synth.generate_scene(spec, i) for i in range(total)]
    out = Path(args.out) / "dataset"
    dataset_io.write_dataset(out, spec, scenes)
    print(f"wrote {total} scenes to {out}")


def _cmd_train(cfg: RunConfig, args) -> None:
    result = harness.train(cfg, out_dir=args.out)
    m = result.metrics
    print(f"trained {cfg.optimizer.steps} steps; "
          f"miou={m['miou']:.6g} oiou={m['oiou']:.6g} accuracy={m['accuracy']:.6g}")


def _cmd_eval(cfg: RunConfig, args) -> None:
    state = harness.load_state(args.ckpt)
    _, eval_scenes = harness.make_scenes(cfg)
    metrics, records = harness.evaluate(state, cfg, eval_scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_csv(out / "metrics.csv", ["miou", "oiou", "accuracy"], [metrics])
    harness.write_records(out / "records.csv", records)
    harness.write_summary(out / "summary.json", [metrics])
    print(f"miou={metrics['miou']:.6g} oiou={metrics['oiou']:.6g} "
          f"accuracy={metrics['accuracy']:.6g}")


def _cmd_ablate_sap(cfg: RunConfig, args) -> None:
    rows = harness.run_ablation_sap(cfg, out_dir=args.out)
    for row in rows:
        print(f"{row['setting']:>8}: miou={row['miou']:.6g} oiou={row['oiou']:.6g}")


def _cmd_ablate_fusion(cfg: RunConfig, args) -> None:
    rows = harness.run_ablation_fusion(cfg, out_dir=args.out)
    for row in rows:
        print(f"{row['setting']:>16}: accuracy={row['accuracy']:.6g} miou={row['miou']:.6g}")


def _cmd_token_drop(cfg: RunConfig, args) -> None:
    try:
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --ratios value: {exc}") from exc
    if not ratios:
        raise ConfigError("--ratios must list at least one keep ratio")
    rows = harness.run_token_drop(cfg, ratios, out_dir=args.out)
    for row in rows:
        print(f"ratio={row['ratio']:.6g} {row['strategy']:>10}: "
              f"accuracy={row['accuracy']:.6g}")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate-sap": _cmd_ablate_sap,
    "ablate-fusion": _cmd_ablate_fusion,
    "token-drop": _cmd_token_drop,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        _COMMANDS[args.command](cfg, args)
    except (ConfigError, DomainError, DimensionError, synth.GenerationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
