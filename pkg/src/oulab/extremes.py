"""Ensemble statistics for the almost-sure growth law.

Estimates the limsup constant from checkpoint records (tail max of the
growth ratio over the final decades, ensemble median), checks the
max-of-normals law that calibrates finite-horizon expectations, reports
the quadratic-form diagnostic V(x) = x^T Sigma^{-1} x / 2 against log t,
and verifies the pathwise Gronwall bound that transfers the law from the
linear to the perturbed dynamics.  The Gronwall and kernel checks come
with negative controls so that "always passes" is falsifiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from oulab import matops
from oulab.model import StationaryModel
from oulab.simulate import PathRecord, RngStream

__all__ = [
    "GronwallCertificate",
    "GrowthReport",
    "estimate_limsup",
    "gronwall_check",
    "gumbel_check",
    "kernel_boundedness_check",
    "projection_tail_stat",
    "quadratic_diagnostic",
]


def _common_grid(paths: Sequence[PathRecord]):
    if not paths:
        raise ValueError("need at least one path")
    grid = paths[0].grid
    for p in paths[1:]:
        if p.grid != grid:
            raise ValueError("paths were recorded on mismatched grids")
    return grid


def _tail_mask(t: np.ndarray, window_decades: float) -> np.ndarray:
    span = math.log10(t[-1] / t[0])
    if span < window_decades:
        raise ValueError(
            f"grid spans {span:.2f} decades, fewer than the {window_decades:g} "
            "decade tail window")
    return t >= t[-1] / 10.0**window_decades


@dataclass(frozen=True)
class GrowthReport:
    """Ensemble estimate of the limsup growth constant.

    per_path holds each path's max growth ratio over the final
    window_decades; c_hat is their median.  rel_err is recomputable as
    |c_hat - c_pred| / c_pred whenever c_pred is known.
    """

    c_hat: float
    c_pred: float | None
    rel_err: float | None
    per_path: np.ndarray
    n_paths: int
    t_max: float
    window_decades: float
    mean: float
    q10: float
    q90: float
    config: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "c_hat": self.c_hat,
            "c_pred": self.c_pred,
            "rel_err": self.rel_err,
            "per_path": [float(v) for v in self.per_path],
            "n_paths": self.n_paths,
            "t_max": self.t_max,
            "window_decades": self.window_decades,
            "mean": self.mean,
            "q10": self.q10,
            "q90": self.q90,
        }
        if self.config is not None:
            out["config"] = self.config
        return out


def estimate_limsup(paths: Sequence[PathRecord], c_pred: float | None = None,
                    window_decades: float = 2.0,
                    config: dict | None = None) -> GrowthReport:
    """Tail-window estimate of limsup max|X| / sqrt(log t).

    Per path the statistic is the max of R(t_j) over the final
    window_decades; the ensemble median is the point estimate (robust to
    the heavy upper tail of per-path maxima).  All paths must share one
    grid and the grid must span at least the requested window.
    """
    grid = _common_grid(paths)
    mask = _tail_mask(grid.times, window_decades)
    stats = np.array([float(np.max(p.ratio[mask])) for p in paths])
    c_hat = float(np.median(stats))
    rel = None if c_pred is None else abs(c_hat - c_pred) / c_pred
    return GrowthReport(
        c_hat=c_hat, c_pred=c_pred, rel_err=rel, per_path=stats,
        n_paths=len(paths), t_max=grid.t_max, window_decades=window_decades,
        mean=float(np.mean(stats)), q10=float(np.quantile(stats, 0.10)),
        q90=float(np.quantile(stats, 0.90)), config=config)


def gumbel_check(n: int, reps: int, rng: RngStream) -> dict:
    """Mean of max|Z_1..n| / sqrt(2 log n) over independent batches.

    The ratio approaches 1 slowly from below; at n = 1e6 the Gumbel
    correction puts the expectation near 0.93.  Requires n >= 1000 so
    the asymptotic shape applies.
    """
    n = int(n)
    reps = int(reps)
    if n < 1000:
        raise ValueError("n must be at least 1000")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    scale = math.sqrt(2.0 * math.log(n))
    ratios = np.empty(reps)
    for i in range(reps):
        ratios[i] = float(np.max(np.abs(rng.normals(n)))) / scale
    return {
        "n": n,
        "reps": reps,
        "mean_ratio": float(np.mean(ratios)),
        "std_ratio": float(np.std(ratios)),
        "ratios": ratios,
    }


def quadratic_diagnostic(paths: Sequence[PathRecord], model: StationaryModel,
                         window_decades: float = 2.0) -> dict:
    """Lyapunov-function growth diagnostic, V(x) = x^T Sigma^{-1} x / 2.

    Two views of V against the theoretical ceiling V / log t -> 1:

    * ``series``: the pointwise values V(X_{t_j}) / log t_j at the
      checkpoints.  Checkpoints are sparse, so the pointwise series
      undershoots the running extreme badly; it is reported for shape,
      not for the headline statistic.
    * ``per_path_tail``: the running-max form.  The stored ratio
      max_{u <= t} |X_u| / sqrt(log t) sees every step, and in the top
      eigendirection V(m * alpha) = m^2 / (2 lambda_1), so the tail max
      of ratio^2 / (2 lambda_1) is the running-max analogue of the
      series.  It equals (per-path c_hat)^2 / (2 lambda_1) and should
      settle near 1.

    Sigma must be invertible; degenerate noise has no quadratic form.
    """
    grid = _common_grid(paths)
    d = model.dim
    if model.chol_sigma.rank < d:
        raise ValueError("degenerate: Sigma is singular")
    series = np.empty((len(paths), grid.n_checkpoints))
    logs = np.log(grid.times)
    for i, p in enumerate(paths):
        if p.states.shape[1] != d:
            raise ValueError("path states do not match the model dimension")
        sol = matops.solve_dense(model.Sigma, p.states.T)
        v = 0.5 * np.einsum("jd,dj->j", p.states, sol)
        series[i] = v / logs
    mask = _tail_mask(grid.times, window_decades)
    ratios = np.stack([p.ratio for p in paths])
    tails = np.max(ratios[:, mask], axis=1) ** 2 / (2.0 * model.lambda1)
    return {
        "series": series,
        "per_path_tail": tails,
        "median_tail": float(np.median(tails)),
        "window_decades": window_decades,
    }


@dataclass(frozen=True)
class GronwallCertificate:
    """Pathwise growth bound max|X_u| <= beta * f(t) evaluated per checkpoint.

    f(t) = K|X0| + L(t) + K C / lam0 and beta = lam0 / (lam0 - eps0) with
    eps0 = K eps.  The slack compares beta f(t_j) against the running max
    of the state (the comparison the integral inequality actually
    bounds, and the form under which a corrupted certificate is
    falsifiable).  pass iff every slack is nonnegative.
    """

    K: float
    lam0: float
    C: float
    eps: float
    eps0: float
    beta: float
    t: np.ndarray
    slack: np.ndarray
    min_slack: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "K": self.K, "lam0": self.lam0, "C": self.C, "eps": self.eps,
            "eps0": self.eps0, "beta": self.beta,
            "min_slack": self.min_slack, "passed": self.passed,
        }


def gronwall_check(path: PathRecord, model: StationaryModel, C: float,
                   eps: float, K: float | None = None,
                   lam0: float | None = None) -> GronwallCertificate:
    """Verify the pathwise bound induced by |F(x)| <= C + eps |x|.

    K and lam0 default to the model's certified envelope; passing other
    values supports negative controls (a K below the true envelope must
    make some path fail, otherwise this check could never fail at all).
    Requires eps0 = K eps < lam0, else the bound factor is undefined.
    """
    K = model.K if K is None else float(K)
    lam0 = model.lam0 if lam0 is None else float(lam0)
    if C < 0.0 or eps < 0.0:
        raise ValueError("C and eps must be nonnegative")
    eps0 = K * eps
    if eps0 >= lam0:
        raise ValueError("bound factor undefined: eps0 = K*eps must be < lam0")
    beta = lam0 / (lam0 - eps0)
    f = K * path.x0_norm + path.max_n + K * C / lam0
    slack = beta * f - path.max_x
    min_slack = float(np.min(slack))
    return GronwallCertificate(
        K=K, lam0=lam0, C=C, eps=eps, eps0=eps0, beta=beta,
        t=path.t, slack=slack, min_slack=min_slack,
        passed=bool(min_slack >= 0.0))


def kernel_boundedness_check(paths: Sequence[PathRecord],
                             factor: float = 1.5,
                             min_pass_fraction: float = 0.95) -> dict:
    """Decade-stability verdict for kernel growth ratios.

    Per path, the max growth ratio over the final two decades must not
    exceed factor times the max over all earlier decades (no growth
    faster than sqrt(log t)).  Requires at least four distinct decades
    of checkpoints.  The ensemble passes when at least
    min_pass_fraction of paths do.
    """
    grid = _common_grid(paths)
    decades = np.floor(np.log10(grid.times)).astype(int)
    distinct = np.unique(decades)
    if distinct.size < 4:
        raise ValueError(
            f"grid covers {distinct.size} decades; need at least 4")
    final = decades >= decades[-1] - 1
    early = ~final
    flags = np.empty(len(paths), dtype=bool)
    margins = np.empty(len(paths))
    for i, p in enumerate(paths):
        late_max = float(np.max(p.ratio[final]))
        early_max = float(np.max(p.ratio[early]))
        margins[i] = late_max / max(early_max, 1e-300)
        flags[i] = late_max <= factor * early_max
    frac = float(np.mean(flags))
    return {
        "pass_fraction": frac,
        "passed": bool(frac >= min_pass_fraction),
        "per_path_pass": flags,
        "per_path_late_over_early": margins,
        "factor": factor,
    }


def projection_tail_stat(paths: Sequence[PathRecord],
                         window_decades: float = 2.0) -> dict:
    """Ensemble median of the tail max of |Y_n| / sqrt(2 log n).

    Uses the per-checkpoint projection buckets recorded when paths are
    simulated with projection tracking; this is the finite-n form of the
    lower-bound argument through the top-eigendirection projection.
    """
    grid = _common_grid(paths)
    mask = _tail_mask(grid.times, window_decades)
    stats = np.empty(len(paths))
    for i, p in enumerate(paths):
        if p.proj_bucket is None:
            raise ValueError("paths were simulated without projection tracking")
        tail = p.proj_bucket[mask]
        if np.all(np.isnan(tail)):
            raise ValueError("no integer-time samples in the tail window")
        stats[i] = float(np.nanmax(tail))
    return {
        "median": float(np.median(stats)),
        "per_path": stats,
        "window_decades": window_decades,
    }
