"""Command-line front end: ``run``, ``montecarlo``, ``tune`` and ``validate``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import detection as det
from .config import VARIANTS, apply_overrides, load_config, validate
from .engine import canonical_variant, run_scenario
from .errors import ConfigError, InvalidParameterError, NumericalError
from .montecarlo import monte_carlo
from .traceio import (montecarlo_summary, trace_summary, write_json,
                      write_trace_csv)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUT_ENV = "RESILIENT_SWARM_OUT"

log = logging.getLogger("resilient_swarm")


def resolve_config_path(name: str | None) -> Path:
    """A file path, or the name of a shipped config such as ``default``."""
    if name is None:
        name = "default"
    p = Path(name)
    if p.exists():
        return p
    shipped = resources.files("resilient_swarm") / "configs" / f"{name}.yaml"
    if shipped.is_file():
        return Path(str(shipped))
    return p  # let the loader report it


def _load(args):
    cfg = load_config(resolve_config_path(args.config))
    cfg = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    problems = validate(cfg)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV, "out"))
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    trace = run_scenario(cfg, args.variant)
    csv_path = write_trace_csv(trace, out / "trace.csv")
    summary = trace_summary(trace)
    write_json(summary, out / "summary.json")
    print(f"variant {trace.variant}, seed {trace.seed}: "
          f"post-attack formation error {summary['post_attack_formation_error']:.3f} m")
    print(f"wrote {csv_path} and {out / 'summary.json'}")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    if args.variants == ["all"]:
        variants = VARIANTS
    else:
        variants = [canonical_variant(v) for v in args.variants]
    summary = monte_carlo(cfg, variants, args.runs, workers=args.workers)
    rows = summary.table()
    print(f"{'variant':<22} {'E_post mean':>12} {'E_post std':>11} "
          f"{'var_x':>9} {'var_y':>9}")
    for r in rows:
        print(f"{r['variant']:<22} {r['post_attack_E_mean']:12.4f} "
              f"{r['post_attack_E_std']:11.4f} {r['pos_err_var_x']:9.4f} "
              f"{r['pos_err_var_y']:9.4f}")
    path = write_json(montecarlo_summary(summary, cfg), out / "montecarlo.json")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_tune(args) -> int:
    tau = det.tune_threshold(args.a_des, args.dof)
    lo, hi = det.detection_bounds(args.a_des, args.alpha, args.ell)
    print(f"tau = {tau:.5f}")
    print(f"alarm-rate bounds [{lo:.6f}, {hi:.6f}] (alpha={args.alpha}, ell={args.ell})")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = resolve_config_path(args.config)
    cfg = apply_overrides(load_config(path), args.set)
    problems = validate(cfg)
    if not problems:
        print(f"{path}: ok")
        return EXIT_OK
    for p in problems:
        print(f"{path}: {p}")
    return EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="resilient-swarm",
                                 description="Resilient multi-agent formation simulator")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML file or shipped config name (default: default)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. attack.rate=0.2")
        if seed:
            p.add_argument("--seed", type=int)
            p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./out)")

    p = sub.add_parser("run", help="simulate one scenario and write its trace")
    common(p)
    p.add_argument("--variant", default="robust",
                   help="no_recovery|recovery_no_R_update|recovery_nonrobust_R|"
                        "recovery_robust_R (aliases none, no_update, nonrobust, robust)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("montecarlo", help="paired-seed batch over variants")
    common(p)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--variants", nargs="+", default=["all"])
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("tune", help="chi-square threshold and alarm-rate bounds")
    p.add_argument("--a-des", type=float, default=0.05)
    p.add_argument("--dof", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--ell", type=int, default=100)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("validate", help="check a config against all invariants")
    common(p, seed=False)
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
