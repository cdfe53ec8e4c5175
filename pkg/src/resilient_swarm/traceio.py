"""Trace CSV and run-summary JSON writers."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .engine import Trace
from .montecarlo import (MonteCarloSummary, compromised_position_errors,
                         post_attack_mean_error)

AXES = ("x", "y", "z")


def trace_columns(dim: int = 2) -> list[str]:
    ax = AXES[:dim]
    return (["k", "agent", "mode", "compromised"]
            + [f"true_p{a}" for a in ax] + [f"true_v{a}" for a in ax]
            + [f"est_p{a}" for a in ax] + [f"est_v{a}" for a in ax]
            + ["alarm", "a_hat", "anomalous", "flagged_by", "n_anchors",
               "fix_condition", "clamped", "no_fix"]
            + [f"R_{a}{a}" for a in ax] + ["formation_error"])


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_trace_csv(trace: Trace, path) -> Path:
    """One row per agent per step, columns as in ``trace_columns``."""
    path = Path(path)
    T, N = trace.recovered.shape
    comp = set(trace.compromised_ids)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(trace.config.dim))
        for k in range(T):
            E = trace.formation_error[k]
            for i in range(N):
                row = [k, i, "recovered" if trace.recovered[k, i] else "nominal", i in comp]
                row += list(trace.true_state[k, i]) + list(trace.estimate[k, i])
                row += [trace.alarm[k, i], trace.a_hat[k, i], trace.anomalous[k, i],
                        trace.flagged_by[k, i], trace.n_anchors[k, i],
                        trace.fix_condition[k, i], trace.clamped[k, i], trace.no_fix[k, i]]
                row += list(trace.R_diag[k, i]) + [E]
                w.writerow([_fmt(v) for v in row])
    return path


def _clean(obj):
    """JSON-safe copy: arrays to lists, NaN to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def trace_summary(trace: Trace) -> dict:
    err = compromised_position_errors(trace)
    return {
        "variant": trace.variant,
        "seed": trace.seed,
        "steps": trace.n_steps,
        "compromises": [vars(c) for c in trace.compromises],
        "attack_start": trace.attack_start,
        "detect_step": trace.detect_step,
        "post_attack_formation_error": post_attack_mean_error(trace),
        "final_formation_error": trace.formation_error[-1],
        "final_goal_distance": trace.final_goal_distance(),
        "compromised_position_error_var": err.var(axis=0) if len(err) else None,
        "no_fix_steps": int(trace.no_fix.sum()),
        "config": trace.config.to_dict(),
    }


def montecarlo_summary(summary: MonteCarloSummary, cfg) -> dict:
    out = {"runs": summary.runs, "seeds": summary.seeds, "table": summary.table(),
           "E_mean": {v: s.E_mean for v, s in summary.stats.items()},
           "E_std": {v: s.E_std for v, s in summary.stats.items()},
           "config": cfg.to_dict()}
    names = list(summary.stats)
    tests = []
    for a in names:
        for b in names:
            if a != b:
                wins, n, p = summary.paired_sign_test(a, b)
                tests.append({"better": a, "worse": b, "wins": wins, "pairs": n, "p": p})
    out["sign_tests"] = tests
    return out


def write_json(data: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_clean(data), indent=2) + "\n")
    return path
