"""Command-line entry point: ``splitbench {run,attack,plan,plot,validate-config}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .experiments import ConfigError, ExperimentConfig, load_manifest, run_suite
from .netsim import ComputeModel, LinkModel

log = logging.getLogger("splitbench")

OUTPUT_ENV = "SPLITBENCH_OUTPUT"


def _output_dir(args, cfg: dict, name: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    return Path(os.environ.get(OUTPUT_ENV, "results")) / name


def _overrides(args) -> dict:
    """Flags that mirror config keys; only those given on the command line apply."""
    blob: dict = {}
    if args.seeds:
        blob["seeds"] = args.seeds
    train = {k: v for k, v in (("archs", args.archs), ("cut_indices", args.cuts), ("epochs", args.epochs),
                               ("num_clients", args.num_clients), ("learning_rate", args.learning_rate),
                               ("batch_size", args.batch_size)) if v is not None}
    if train:
        blob["train"] = train
    if args.workers:
        blob["workers"] = args.workers
    return blob


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "manifest", None):
        raw = load_manifest(args.manifest)["config"]
    else:
        raw = json.loads(Path(args.config).read_text())
    over = _overrides(args)
    for k, v in over.items():
        raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) else v
    return ExperimentConfig.from_dict(raw)


def cmd_run(args, attack: bool = False) -> int:
    cfg = _load_config(args)
    if attack:
        cfg.raw["attack"]["enabled"] = True
    out = _output_dir(args, cfg.raw, cfg.raw["name"])
    manifest = run_suite(cfg, out)
    for e in manifest["cells"]:
        if e["status"] != "ok":
            log.error("cell %s failed: %s", e["cell"], e["error"])
    print(f"{len(manifest['cells']) - manifest['failed']}/{len(manifest['cells'])} cells ok -> {out}")
    return 0 if manifest["failed"] == 0 else 1


def cmd_plan(args) -> int:
    from .planner import PlannerWeights, fit_delay_models, planner_report, write_report
    from .profiles import load_profile

    prof = load_profile(args.profile)
    est = fit_delay_models(prof, LinkModel(args.bandwidth, args.latency), ComputeModel(args.seconds_per_flop),
                           batch=args.batch_size)
    if args.observations:
        obs = json.loads(Path(args.observations).read_text())
        est = est.with_observations(**{k: obs.get(k) for k in ("A", "R", "I_obs", "C_obs")})
    cand = range(args.min_cut, len(prof) + 1) if args.min_cut else None
    report = planner_report(est, PlannerWeights(args.alpha, args.beta, args.gamma, args.kappa), cand)
    if args.out:
        write_report(report, args.out)
    print(json.dumps({"selected_cut": report["selected_cut"]}))
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot

    for p in plot(args.results, args.figure, args.out):
        print(p)
    return 0


def cmd_validate(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config)
    except (ConfigError, ValueError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 2
    print(f"valid: {len(cfg.cells())} cells, hash {cfg.hash}")
    return 0


def _add_suite_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="experiment config JSON")
    src.add_argument("--manifest", help="rerun the config recorded in a manifest")
    p.add_argument("--out", help=f"results directory (default ${OUTPUT_ENV}/<name>)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--archs", nargs="+")
    p.add_argument("--cuts", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--num-clients", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitbench")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment suite")
    _add_suite_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="run a suite with the reconstruction attack enabled")
    _add_suite_flags(p)
    p.set_defaults(func=lambda a: cmd_run(a, attack=True))

    p = sub.add_parser("plan", help="pick a cut index from a layer profile")
    p.add_argument("--profile", default="vgg16", help="bundled profile name or JSON path")
    p.add_argument("--bandwidth", type=float, default=1.25e8, help="bytes per second")
    p.add_argument("--latency", type=float, default=0.0)
    p.add_argument("--seconds-per-flop", type=float, default=1e-12)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--min-cut", type=int, default=0, help="smallest cut considered")
    p.add_argument("--observations", help="JSON with measured A, R (and optional I_obs, C_obs) keyed by cut")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("plot", help="render SVG figures from a results directory")
    p.add_argument("results")
    p.add_argument("--figure", default="all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("validate-config", help="check a config against the schema")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
