"""Command line entry point: ``hfo2ps run | sweep | verify``."""

from __future__ import annotations

import argparse
import json
import sys

from .harness import ConfigError, ExperimentConfig, emit, run_experiment, sweep

FORMATS = ("csv", "json", "svg")


def _formats(text: str) -> list[str]:
    out = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in out if f not in FORMATS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"formats must be a comma list of {FORMATS}")
    return out


def _values(text: str) -> list:
    out = []
    for v in text.split(","):
        v = v.strip()
        if not v:
            continue
        try:
            out.append(int(v))
        except ValueError:
            try:
                out.append(float(v))
            except ValueError as exc:
                raise argparse.ArgumentTypeError(f"bad sweep value {v!r}") from exc
    if not out:
        raise argparse.ArgumentTypeError("need at least one sweep value")
    return out


def _load_config(path: str, seed: int | None, timing: bool) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = ExperimentConfig.from_json(fh.read())
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if timing:
        changes["timing"] = True
    return cfg.replace(**changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out-dir", default=None, help="directory for output files")
    common.add_argument("--format", type=_formats, default=None,
                        help="comma list of csv, json, svg (default: csv,json for runs, json for sweeps)")

    p = argparse.ArgumentParser(prog="hfo2ps", description="Adversarial linear mixture MDP experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run one configuration")
    r.add_argument("--config", required=True, help="JSON experiment config")
    r.add_argument("--timing", action="store_true", help="record per-episode wall time (breaks byte reproducibility)")

    s = sub.add_parser("sweep", parents=[common], help="sweep one axis over several seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=["K", "H", "d", "|S|", "S"])
    s.add_argument("--values", required=True, type=_values, help="comma list, e.g. 100,200,500")
    s.add_argument("--seeds", type=int, default=3, help="seeds per value")
    s.add_argument("--workers", type=int, default=1)

    v = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    v.add_argument("--only", nargs="*", default=None, help="check names to run")
    v.add_argument("--list", action="store_true", help="list check names and exit")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_verify(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _cmd_run(args) -> int:
    cfg = _load_config(args.config, args.seed, args.timing)
    result = run_experiment(cfg)
    summary = result.summary()
    out_dir = args.out_dir or cfg.out_dir
    if out_dir:
        for path in emit(result, out_dir, args.format or ["csv", "json"]):
            print(path)
    print(json.dumps({k: summary[k] for k in ("final_regret", "containment_rate", "max_projection_sweeps")}))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.seed, False)
    seeds = list(range(args.seeds)) if args.seed is None else [args.seed + i for i in range(args.seeds)]
    table = sweep(cfg, args.axis, args.values, seeds, args.workers)
    out_dir = args.out_dir or cfg.out_dir
    if out_dir:
        for path in emit(table, out_dir, args.format or ["json"]):
            print(path)
    for row in table["rows"]:
        print(f"{args.axis}={row['value']}: mean regret {row['mean_regret']:.4f} (se {row['stderr']:.4f}, n={row['runs']})")
    if "loglog_slope" in table:
        print(f"log-log slope {table['loglog_slope']:.4f}")
    return 0


def _cmd_verify(args) -> int:
    from .verify import check_names, run_checks

    if args.list:
        print("\n".join(check_names()))
        return 0
    if args.only:
        unknown = set(args.only) - set(check_names())
        if unknown:
            print(f"error: unknown checks {sorted(unknown)}", file=sys.stderr)
            return 2
    results = run_checks(args.only)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out_dir:
        import os

        os.makedirs(args.out_dir, exist_ok=True)
        path = os.path.join(args.out_dir, "verify.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([r.__dict__ for r in results], fh, indent=2)
        print(path)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
