"""Seeded Monte Carlo batches over scenario variants."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .engine import Trace, canonical_variant, run_scenario
from .errors import InvalidParameterError

log = logging.getLogger(__name__)


@dataclass
class VariantStats:
    variant: str
    E_mean: np.ndarray            # (T,) mean formation error over runs, NaN-aware
    E_std: np.ndarray             # (T,)
    post_attack_E: np.ndarray     # (runs,) time-averaged post-attack formation error
    position_error_var: np.ndarray  # (D,) per-axis variance, compromised agents
    final_goal_distance: np.ndarray  # (runs, N)
    detect_step: np.ndarray       # (runs, N), -1 where never detected
    attack_start: np.ndarray      # (runs,)
    compromised: list[list[int]] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "variant": self.variant,
            "post_attack_E_mean": float(np.nanmean(self.post_attack_E)),
            "post_attack_E_std": float(np.nanstd(self.post_attack_E)),
            **{f"pos_err_var_{ax}": float(v)
               for ax, v in zip("xyz", self.position_error_var)},
        }


@dataclass
class MonteCarloSummary:
    runs: int
    seeds: list[int]
    stats: dict[str, VariantStats] = field(default_factory=dict)

    def __post_init__(self):
        if self.runs < 1:
            raise InvalidParameterError("runs must be >= 1")

    def table(self) -> list[dict]:
        return [s.row() for s in self.stats.values()]

    def paired_sign_test(self, better: str, worse: str) -> tuple[int, int, float]:
        """One-sided sign test that ``better`` has lower post-attack error.

        Returns (wins, informative pairs, p-value); ties are dropped.
        """
        a = self.stats[canonical_variant(better)].post_attack_E
        b = self.stats[canonical_variant(worse)].post_attack_E
        ok = np.isfinite(a) & np.isfinite(b) & (a != b)
        wins = int(np.sum(a[ok] < b[ok]))
        return wins, int(ok.sum()), sign_test_pvalue(wins, int(ok.sum()))


def sign_test_pvalue(wins: int, n: int) -> float:
    """P(X >= wins) for X ~ Binomial(n, 1/2)."""
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


def post_attack_mean_error(trace: Trace) -> float:
    E = trace.formation_error[trace.attack_start:]
    if E.size == 0 or np.all(np.isnan(E)):
        return math.nan
    return float(np.nanmean(E))


def compromised_position_errors(trace: Trace) -> np.ndarray:
    """Estimation errors of compromised agents after the attack, shape (K, D)."""
    ids = trace.compromised_ids
    err = trace.position_error()[trace.attack_start:, ids]
    return err.reshape(-1, trace.config.dim)


def _run_one(args):
    cfg, variant, seed = args
    tr = run_scenario(cfg, variant, seed)
    return (tr.formation_error, post_attack_mean_error(tr), compromised_position_errors(tr),
            tr.final_goal_distance(), tr.detect_step, tr.attack_start, tr.compromised_ids)


def monte_carlo(cfg: ScenarioConfig, variants=("no_recovery", "recovery_no_R_update",
                                                "recovery_robust_R"),
                runs: int = 100, workers: int = 1) -> MonteCarloSummary:
    """Run every variant on seeds ``cfg.seed + r`` for ``r < runs``.

    All variants see the same seeds, so their results are paired.
    """
    if runs < 1:
        raise InvalidParameterError("runs must be >= 1")
    variants = [canonical_variant(v) for v in variants]
    seeds = [cfg.seed + r for r in range(runs)]
    summary = MonteCarloSummary(runs=runs, seeds=seeds)
    for v in variants:
        jobs = [(cfg, v, s) for s in seeds]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(_run_one, jobs))
        else:
            results = [_run_one(j) for j in jobs]
        E = np.array([r[0] for r in results])
        errs = np.concatenate([r[2] for r in results])
        with np.errstate(invalid="ignore"):
            stats = VariantStats(
                variant=v,
                E_mean=np.nanmean(E, axis=0) if runs > 1 else E[0],
                E_std=np.nanstd(E, axis=0),
                post_attack_E=np.array([r[1] for r in results]),
                position_error_var=errs.var(axis=0) if len(errs) else
                np.full(cfg.dim, np.nan),
                final_goal_distance=np.array([r[3] for r in results]),
                detect_step=np.array([r[4] for r in results]),
                attack_start=np.array([r[5] for r in results]),
                compromised=[r[6] for r in results],
            )
        summary.stats[v] = stats
        log.info("variant %s: post-attack E %.3f", v, np.nanmean(stats.post_attack_E))
    return summary
