"""m-out-of-n bootstrap and cross-validated choice of the ridge weight."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .estimators import (
    FitConfig,
    FitResult,
    FitStatus,
    LeastSquares,
    SingularDesignError,
    fit_problem,
    initial_values,
    q_unshared_fit,
)
from .model import ModelSpec, SmartDataset, TreatmentCoding, build_problem

__all__ = [
    "DEFAULT_LAMBDA_GRID",
    "BootstrapSummary",
    "CvResult",
    "choose_m",
    "m_out_of_n_bootstrap",
    "select_lambda",
    "parallel_map",
]

DEFAULT_LAMBDA_GRID = np.logspace(-4, 2, 25)
DEFAULT_B = 1000
DEFAULT_M_EXPONENT = 0.8

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Ordered map, optionally on a thread pool."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def choose_m(n: int, exponent: float = DEFAULT_M_EXPONENT) -> int:
    """Resample size ``ceil(n ** exponent)`` clamped to ``[2, n]``."""
    if not 0 < exponent <= 1:
        raise ValueError("exponent must be in (0, 1]")
    if n < 1:
        raise ValueError("n must be positive")
    m = math.ceil(n**exponent)
    return int(min(max(m, 2), n))


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BootstrapSummary:
    names: tuple[str, ...]
    point_estimate: np.ndarray
    variance: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    m: int
    n: int
    B: int
    seed: int
    status_counts: dict[str, int]
    replicates: np.ndarray = field(repr=False)

    def rows(self, params: Sequence[str] | None = None) -> list[dict]:
        keep = self.names if params is None else params
        out = []
        for name in keep:
            k = self.names.index(name)
            out.append(
                {
                    "Parameter": name,
                    "Estimate": float(self.point_estimate[k]),
                    "Variance": float(self.variance[k]),
                    "CI_low": float(self.ci_low[k]),
                    "CI_high": float(self.ci_high[k]),
                }
            )
        return out

    def __getitem__(self, name: str) -> dict:
        return self.rows([name])[0]


def _unpack(result) -> tuple[np.ndarray, str, tuple[str, ...] | None]:
    if isinstance(result, FitResult):
        return np.asarray(result.theta_hat.values, dtype=float), result.status.value, result.theta_hat.names
    arr = np.atleast_1d(np.asarray(result, dtype=float))
    return arr, FitStatus.CONVERGED.value, None


def m_out_of_n_bootstrap(
    data: SmartDataset,
    fit_fn: Callable[[SmartDataset], FitResult | np.ndarray | float],
    m: int | None = None,
    B: int = DEFAULT_B,
    seed: int = 0,
    *,
    alpha: float = 0.05,
    workers: int = 1,
) -> BootstrapSummary:
    """Resample ``m`` whole trajectories with replacement ``B`` times and refit.

    Replicates that did not converge are kept in the variance (their count is
    in ``status_counts``).  The interval is the centred, rescaled percentile
    interval ``theta_n - q(sqrt(m) (theta*_m - theta_n)) / sqrt(n)``.
    """
    n = data.n
    m = choose_m(n) if m is None else int(m)
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, n={n}], got {m}")
    if B < 2:
        raise ValueError("need B >= 2 replicates for a variance")
    point, _, names = _unpack(fit_fn(data))
    seqs = np.random.SeedSequence(seed).spawn(B)

    def replicate(b: int):
        idx = np.random.default_rng(seqs[b]).integers(0, n, size=m)
        try:
            est, status, _ = _unpack(fit_fn(data.subset(idx)))
        except np.linalg.LinAlgError:
            return np.full(point.shape, np.nan), "Failed"
        return est, status

    results = parallel_map(replicate, range(B), workers)
    reps = np.vstack([r[0] for r in results])
    counts = {s.value: 0 for s in FitStatus}
    counts["Failed"] = 0
    for _, status in results:
        counts[status] = counts.get(status, 0) + 1

    with np.errstate(invalid="ignore", over="ignore"):
        variance = np.nanvar(reps, axis=0, ddof=1)
        root = math.sqrt(m) * (reps - point)
        q_lo, q_hi = np.nanquantile(root, [alpha / 2, 1 - alpha / 2], axis=0)
    ci_low = point - q_hi / math.sqrt(n)
    ci_high = point - q_lo / math.sqrt(n)
    names = names or tuple(f"theta{k}" for k in range(point.size))
    return BootstrapSummary(names, point, variance, ci_low, ci_high, m, n, B, seed, counts, reps)


# ---------------------------------------------------------------------------
# Cross-validation for lambda
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CvResult:
    lambda_grid: np.ndarray
    cv_error: np.ndarray  # NaN marks a grid point invalid in some fold
    lambda_hat: float
    fold_assignment: np.ndarray
    fold_error: np.ndarray = field(repr=False)

    def rows(self) -> list[dict]:
        return [{"lambda": float(l), "cv_error": float(e)} for l, e in zip(self.lambda_grid, self.cv_error)]


def fold_assignment(n: int, seed: int, folds: int = 10) -> np.ndarray:
    """Fold index per patient; depends only on ``(seed, n, folds)``."""
    if n < folds:
        raise ValueError(f"need at least {folds} patients for {folds}-fold CV, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=int)
    out[perm] = np.arange(n) % folds
    return out


def select_lambda(
    data: SmartDataset,
    spec: ModelSpec,
    coding: TreatmentCoding | None = None,
    init: str = "zero",
    grid: Sequence[float] | None = None,
    seed: int = 0,
    *,
    cfg: FitConfig = FitConfig(),
    folds: int = 10,
) -> CvResult:
    """K-fold CV error of the penalized fit for each lambda.

    For a held-out patient the error is the sum over their stacked rows of
    ``(Y*_u(theta_K) - Z_u theta_K)^2``, with ``theta_K`` the final iterate
    fitted on the other folds.  Fold errors are averaged per patient, then
    across folds.
    """
    grid = DEFAULT_LAMBDA_GRID if grid is None else np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0 or np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise ValueError("lambda grid must be non-empty, finite and non-negative")
    coding = coding or data.coding
    assign = fold_assignment(data.n, seed, folds)
    errors = np.full((folds, grid.size), np.nan)
    for v in range(folds):
        train = data.subset(np.flatnonzero(assign != v))
        test = data.subset(np.flatnonzero(assign == v))
        problem = build_problem(train, spec, coding)
        held = build_problem(test, spec, coding)
        solver = LeastSquares(problem.design, cfg.standardize)
        if init.lower() == "zero":
            theta0 = None
        else:
            try:
                theta0 = initial_values(q_unshared_fit(train, spec, coding), spec, init)
            except np.linalg.LinAlgError:
                theta0 = None
        for k, lam in enumerate(grid):
            try:
                res = fit_problem(problem, theta0, replace(cfg, lam=float(lam)), penalized=True,
                                  solver=solver, diagnose=False)
            except SingularDesignError:
                continue
            theta = res.theta_hat.values
            resid = held.response(theta) - held.design @ theta
            with np.errstate(over="ignore", invalid="ignore"):
                errors[v, k] = float(resid @ resid) / test.n
    with np.errstate(invalid="ignore"):
        cv_error = errors.mean(axis=0)
    cv_error[~np.isfinite(cv_error)] = np.nan
    if np.all(np.isnan(cv_error)):
        raise SingularDesignError(0, build_problem(data, spec, coding).design.shape[1])
    best = int(np.nanargmin(cv_error))
    return CvResult(grid, cv_error, float(grid[best]), assign, errors)
