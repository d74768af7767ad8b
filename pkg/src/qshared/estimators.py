"""Least-squares solvers and the Q-shared / penalized Q-shared fixed-point fits."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import projector_row_sums
from .model import (
    ModelSpec,
    ParameterLayout,
    ParameterVector,
    PolicyFn,
    SmartDataset,
    StackedProblem,
    TreatmentCoding,
    Trajectory,
    build_problem,
    stage_feature_matrices,
    stage_features,
)

__all__ = [
    "SingularDesignError",
    "FitStatus",
    "FitConfig",
    "FitResult",
    "LeastSquares",
    "ols_solve",
    "ridge_solve",
    "q_shared_fit",
    "penalized_q_shared_fit",
    "fit_problem",
    "StageFit",
    "q_unshared_fit",
    "INIT_STRATEGIES",
    "initial_values",
    "decision_rule",
    "policy",
]

RANK_TOL = 1e-10


class SingularDesignError(np.linalg.LinAlgError):
    """Normal equations are singular (numerical rank below column count)."""

    def __init__(self, rank: int, cols: int):
        super().__init__(f"design is rank deficient: rank {rank} < {cols} columns")
        self.rank = rank
        self.cols = cols


class FitStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxItersExceeded"
    DIVERGED = "Diverged"


@dataclass(frozen=True)
class FitConfig:
    epsilon: float = 1e-6
    max_iters: int = 1000
    lam: float = 0.0
    divergence_guard: float = 1e8
    standardize: bool = False

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not self.divergence_guard > 0:
            raise ValueError("divergence_guard must be positive")


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: ParameterVector
    iterations: int
    status: FitStatus
    trace: np.ndarray = field(repr=False)
    hat_inf_norm: float = float("nan")
    method: str = "q_shared"
    lam: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status is FitStatus.CONVERGED

    def report(self) -> dict:
        return {
            "method": self.method,
            "lambda": self.lam,
            "status": self.status.value,
            "iterations": self.iterations,
            "hat_inf_norm": self.hat_inf_norm,
            "theta": self.theta_hat.as_dict(),
        }


class LeastSquares:
    """SVD of a fixed design, reused for every right-hand side.

    ``solve(y, lam)`` returns ``(Z'Z + lam I)^{-1} Z' y``; with ``lam == 0``
    the design must have full column rank.
    """

    def __init__(self, Z: np.ndarray, standardize: bool = False):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[0] == 0:
            raise ValueError("design must be a non-empty matrix")
        self.shape = Z.shape
        if standardize:
            scale = np.sqrt(np.mean(Z**2, axis=0))
            scale[scale == 0] = 1.0
        else:
            scale = np.ones(Z.shape[1])
        self.scale = scale
        U, s, Vt = np.linalg.svd(Z / scale, full_matrices=False)
        self.U, self.s, self.Vt = U, s, Vt
        smax = s[0] if s.size else 0.0
        self.rank = int(np.sum(s > RANK_TOL * smax)) if smax > 0 else 0

    @property
    def full_rank(self) -> bool:
        return self.rank == self.shape[1]

    def solve(self, y: np.ndarray, lam: float = 0.0) -> np.ndarray:
        if lam == 0.0 and not self.full_rank:
            raise SingularDesignError(self.rank, self.shape[1])
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(self.s > 0, self.s / (self.s**2 + lam), 0.0)
        return (self.Vt.T @ (w * (self.U.T @ y))) / self.scale


def ols_solve(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares coefficients; raises :class:`SingularDesignError`."""
    return LeastSquares(Z).solve(np.asarray(y, dtype=float), 0.0)


def ridge_solve(Z: np.ndarray, y: np.ndarray, lam: float, standardize: bool = False) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return LeastSquares(Z, standardize).solve(np.asarray(y, dtype=float), float(lam))


# ---------------------------------------------------------------------------
# Iterative fits
# ---------------------------------------------------------------------------


def fit_problem(
    problem: StackedProblem,
    theta0: ParameterVector | np.ndarray | None = None,
    cfg: FitConfig = FitConfig(),
    *,
    penalized: bool = False,
    solver: LeastSquares | None = None,
    diagnose: bool = True,
) -> FitResult:
    """Run the fixed-point iteration ``theta <- solve(Z, Y*(theta))``.

    With ``penalized`` the ridge weight ``cfg.lam`` is used; otherwise the
    plain estimating-equation solve.
    """
    layout = problem.layout
    lam = float(cfg.lam) if penalized else 0.0
    solver = solver or LeastSquares(problem.design, cfg.standardize if penalized else False)
    if lam == 0.0 and not solver.full_rank:
        raise SingularDesignError(solver.rank, solver.shape[1])
    if theta0 is None:
        theta = np.zeros(layout.size)
    else:
        theta = np.array(theta0.values if isinstance(theta0, ParameterVector) else theta0, dtype=float)
        if theta.shape != (layout.size,):
            raise ValueError(f"theta0 has {theta.shape} entries, layout needs {layout.size}")
    trace = [theta]
    status = FitStatus.MAX_ITERS
    k = 0
    for k in range(1, cfg.max_iters + 1):
        new = solver.solve(problem.response(theta), lam)
        trace.append(new)
        if not np.all(np.isfinite(new)) or np.linalg.norm(new) > cfg.divergence_guard:
            status = FitStatus.DIVERGED
            theta = new
            break
        # a response with no backup rows is fixed: one solve is exact
        if not problem.has_backup or np.linalg.norm(new - theta) < cfg.epsilon:
            status = FitStatus.CONVERGED
            theta = new
            break
        theta = new
    hat = float(projector_row_sums(solver.U).max()) if diagnose else float("nan")
    return FitResult(
        theta_hat=ParameterVector(theta, layout),
        iterations=k,
        status=status,
        trace=np.vstack(trace),
        hat_inf_norm=hat,
        method="penalized" if penalized else "q_shared",
        lam=lam,
    )


def q_shared_fit(
    data: SmartDataset,
    spec: ModelSpec,
    coding: TreatmentCoding | None = None,
    theta0: ParameterVector | None = None,
    cfg: FitConfig = FitConfig(),
) -> FitResult:
    """Q-shared: iterate the estimating equation ``Z'(Y*(theta_k) - Z theta) = 0``."""
    return fit_problem(build_problem(data, spec, coding), theta0, cfg, penalized=False)


def penalized_q_shared_fit(
    data: SmartDataset,
    spec: ModelSpec,
    coding: TreatmentCoding | None = None,
    theta0: ParameterVector | None = None,
    cfg: FitConfig = FitConfig(),
) -> FitResult:
    """Penalized Q-shared: each step is a ridge regression on ``Y*(theta_k)``."""
    return fit_problem(build_problem(data, spec, coding), theta0, cfg, penalized=True)


# ---------------------------------------------------------------------------
# Unshared Q-learning and initial values
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StageFit:
    """Stage-wise OLS fit with its own interaction coefficients."""

    stage: int
    main_coef: np.ndarray
    inter_coef: np.ndarray
    inter_names: tuple[str, ...]
    inter_var: np.ndarray
    sigma2: float
    n: int

    def contrast(self, H1: np.ndarray) -> np.ndarray:
        return H1 @ self.inter_coef


def _stage_regression(X: np.ndarray, y: np.ndarray, stage: int) -> tuple[np.ndarray, np.ndarray, float]:
    ls = LeastSquares(X)
    if not ls.full_rank:
        raise SingularDesignError(ls.rank, X.shape[1])
    coef = ls.solve(y)
    n, p = X.shape
    resid = y - X @ coef
    dof = n - p
    sigma2 = float(resid @ resid / dof) if dof > 0 else float("nan")
    # (X'X)^{-1} diagonal from the SVD
    xtx_inv_diag = np.sum((ls.Vt.T / ls.s) ** 2, axis=1)
    return coef, sigma2 * xtx_inv_diag, sigma2


def q_unshared_fit(
    data: SmartDataset, spec: ModelSpec, coding: TreatmentCoding | None = None
) -> list[StageFit]:
    """Backward-induction Q-learning with stage-specific interaction coefficients.

    Returns fits ordered by stage (index 0 is stage 1).
    """
    coding = coding or data.coding
    J = spec.num_stages
    fits: dict[int, StageFit] = {}
    exit_stage = np.minimum(data.exit_stage(), J)
    next_value: np.ndarray | None = None  # indexed by patient
    for j in range(J, 0, -1):
        rows, H0, H1 = stage_feature_matrices(data, spec, j)
        A = data.treatments[rows, j - 1]
        X = np.hstack([H0, H1 * A[:, None]])
        terminal = exit_stage[rows] <= j
        y = np.where(terminal, data.primary[rows], 0.0)
        if next_value is not None:
            y = np.where(terminal, y, next_value[rows])
        coef, var, sigma2 = _stage_regression(X, y, j)
        p0 = H0.shape[1]
        fit = StageFit(
            stage=j,
            main_coef=coef[:p0],
            inter_coef=coef[p0:],
            inter_names=tuple(name for name, _ in spec.stage(j).interaction),
            inter_var=var[p0:],
            sigma2=sigma2,
            n=rows.size,
        )
        fits[j] = fit
        value = np.full(data.n, np.nan)
        value[rows] = H0 @ fit.main_coef + coding.max_term(fit.contrast(H1))
        next_value = value
    return [fits[j] for j in range(1, J + 1)]


INIT_STRATEGIES = ("sa", "ivwa", "max", "min", "zero")


def initial_values(unshared: list[StageFit], spec: ModelSpec, strategy: str) -> ParameterVector:
    """Starting theta from unshared stage fits.

    Shared slots are aggregated across the stages that use them; beta blocks
    (and stage-local interaction slots) come from the matching stage fit.
    """
    strategy = strategy.lower()
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}; choose from {INIT_STRATEGIES}")
    layout = ParameterLayout.from_spec(spec)
    theta = np.zeros(layout.size)
    if strategy == "zero":
        return ParameterVector(theta, layout)
    pooled: dict[str, list[tuple[float, float]]] = {s: [] for s in spec.shared}
    for fit in unshared:
        j = fit.stage
        theta[list(layout.main_cols[j - 1])] = fit.main_coef
        for k, (slot, col) in enumerate(zip(fit.inter_names, layout.inter_cols[j - 1])):
            if slot in pooled:
                pooled[slot].append((float(fit.inter_coef[k]), float(fit.inter_var[k])))
            else:
                theta[col] = fit.inter_coef[k]
    for k, slot in enumerate(spec.shared):
        est = np.array([e for e, _ in pooled[slot]])
        var = np.array([v for _, v in pooled[slot]])
        col = layout.psi.start + k
        if strategy == "sa":
            theta[col] = est.mean()
        elif strategy == "max":
            theta[col] = est.max()
        elif strategy == "min":
            theta[col] = est.min()
        else:
            if not np.all(var > 0) or not np.all(np.isfinite(var)):
                raise ValueError(f"IVWA needs positive finite variances for {slot!r}, got {var}")
            w = 1.0 / var
            theta[col] = float(w @ est / w.sum())
    return ParameterVector(theta, layout)


# ---------------------------------------------------------------------------
# Decision rules
# ---------------------------------------------------------------------------


def decision_rule(
    theta_hat: ParameterVector,
    spec: ModelSpec,
    coding: TreatmentCoding,
    history: Trajectory,
    stage: int,
) -> float:
    """Recommended treatment at ``stage``; exact ties go to ``coding.t2``."""
    _, h1 = stage_features(history, stage, spec)
    cols = list(theta_hat.layout.inter_cols[stage - 1])
    contrast = float(h1 @ theta_hat.values[cols]) if cols else 0.0
    return float(coding.choose(contrast))


def policy(theta_hat: ParameterVector, spec: ModelSpec, coding: TreatmentCoding) -> PolicyFn:
    """Vectorised decision rule: ``fn(data, stage)`` gives the treatment for
    every patient present at ``stage``, in patient order."""
    values = theta_hat.values

    def decide(data: SmartDataset, stage: int) -> np.ndarray:
        _, _, H1 = stage_feature_matrices(data, spec, stage)
        cols = list(theta_hat.layout.inter_cols[stage - 1])
        contrast = H1 @ values[cols] if cols else np.zeros(H1.shape[0])
        return np.asarray(coding.choose(contrast), dtype=float).reshape(-1)

    return decide
