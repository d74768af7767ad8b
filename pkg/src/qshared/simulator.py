"""Three-stage SMART generator, the exact oracle regimen and allocation matching.

Stage outcomes follow::

    Y1 = g1 + g2 O1 + g3 A1 + g4 O1 A1 + e1
    Y2 = Y1 + 1.5 (g5 O2 + g6 A2 + g7 O2 A2 + g8 A1 A2) + e2
    Y3 = Y2 + 3 (g9 O3 + g10 A3 + g11 O3 A3 + g12 A2 A3 + g13 A1 A2 A3) + e3

with logistic covariate transitions and responders leaving after stage 1
(prob ``p_R1``) or stage 2 (prob ``p_R2``).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .config import load_yaml
from .model import ModelSpec, PolicyFn, SmartDataset, TreatmentCoding, compose_primary

__all__ = [
    "Scenario",
    "MatchingReport",
    "generate_smart",
    "oracle_policy",
    "oracle_contrasts",
    "nonregularity",
    "allocation_matching",
    "constant_policy",
    "ComparisonCell",
    "run_comparison",
]

NUM_STAGES = 3
TIE_TOL = 1e-12


def _expit(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class Scenario:
    gamma: tuple[float, ...]
    delta2: tuple[float, float] = (0.0, 0.0)
    delta3: tuple[float, float, float] = (0.0, 0.0, 0.0)
    response_probs: tuple[float, float] = (0.38, 0.18)
    coding: TreatmentCoding = field(default_factory=TreatmentCoding)
    noise_sd: float = 1.0
    n: int = 300
    seed: int = 0
    name: str = "scenario"

    def __post_init__(self) -> None:
        g = tuple(float(v) for v in self.gamma)
        if len(g) != 13:
            raise ValueError(f"gamma needs 13 coefficients, got {len(g)}")
        object.__setattr__(self, "gamma", g)
        d2 = tuple(float(v) for v in self.delta2)
        d3 = tuple(float(v) for v in self.delta3)
        if len(d2) != 2 or len(d3) != 3:
            raise ValueError("delta2 needs 2 and delta3 needs 3 coefficients")
        object.__setattr__(self, "delta2", d2)
        object.__setattr__(self, "delta3", d3)
        p = tuple(float(v) for v in self.response_probs)
        if len(p) != 2 or not all(0.0 <= v <= 1.0 for v in p):
            raise ValueError(f"response_probs must be two values in [0, 1], got {p}")
        object.__setattr__(self, "response_probs", p)
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if int(self.n) < 1:
            raise ValueError("n must be >= 1")

    @property
    def true_psi(self) -> np.ndarray:
        """Stage-3 contrast coefficients on ``(1, O3, A2, A1 A2)``."""
        return np.array(self.gamma[9:13])

    @classmethod
    def from_dict(cls, cfg: Mapping[str, Any]) -> "Scenario":
        coding = cfg.get("coding", [-1.0, 1.0])
        return cls(
            gamma=tuple(cfg["gamma"]),
            delta2=tuple(cfg.get("delta2", (0.0, 0.0))),
            delta3=tuple(cfg.get("delta3", (0.0, 0.0, 0.0))),
            response_probs=tuple(cfg.get("response_probs", (0.38, 0.18))),
            coding=TreatmentCoding(*coding),
            noise_sd=float(cfg.get("noise_sd", 1.0)),
            n=int(cfg.get("n", 300)),
            seed=int(cfg.get("seed", 0)),
            name=str(cfg.get("name", "scenario")),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        cfg = load_yaml(path)
        cfg.setdefault("name", Path(path).stem)
        return cls.from_dict(cfg)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _stage_terms(g: Sequence[float]):
    s1 = lambda o1, a1: g[0] + g[1] * o1 + g[2] * a1 + g[3] * o1 * a1  # noqa: E731
    s2 = lambda a1, o2, a2: g[4] * o2 + g[5] * a2 + g[6] * o2 * a2 + g[7] * a1 * a2  # noqa: E731
    s3 = lambda a1, a2, o3, a3: (  # noqa: E731
        g[8] * o3 + g[9] * a3 + g[10] * o3 * a3 + g[11] * a2 * a3 + g[12] * a1 * a2 * a3
    )
    return s1, s2, s3


def _p_o2(sc: Scenario, o1, a1):
    return _expit(sc.delta2[0] * o1 + sc.delta2[1] * a1)


def _p_o3(sc: Scenario, a1, o2, a2):
    return _expit(sc.delta3[0] * o2 + sc.delta3[1] * a2 + sc.delta3[2] * a1 * a2)


def generate_smart(
    scenario: Scenario,
    n: int | None = None,
    seed: int | np.random.SeedSequence | np.random.Generator | None = None,
) -> SmartDataset:
    """Simulate ``n`` patients (defaults from the scenario)."""
    n = scenario.n if n is None else int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        scenario.seed if seed is None else seed
    )
    t1, t2 = scenario.coding.values
    s1, s2, s3 = _stage_terms(scenario.gamma)

    # every variate is drawn for every patient so that streams line up across n
    u = rng.random((n, 8))
    eps = rng.standard_normal((n, 3)) * scenario.noise_sd
    o1 = np.where(u[:, 0] < 0.5, -1.0, 1.0)
    a1 = np.where(u[:, 1] < 0.5, t1, t2)
    o2 = np.where(u[:, 2] < _p_o2(scenario, o1, a1), 1.0, -1.0)
    a2 = np.where(u[:, 3] < 0.5, t1, t2)
    o3 = np.where(u[:, 4] < _p_o3(scenario, a1, o2, a2), 1.0, -1.0)
    a3 = np.where(u[:, 5] < 0.5, t1, t2)
    r1 = (u[:, 6] < scenario.response_probs[0]).astype(float)
    r2 = (u[:, 7] < scenario.response_probs[1]).astype(float)

    y1 = s1(o1, a1) + eps[:, 0]
    y2 = y1 + 1.5 * s2(a1, o2, a2) + eps[:, 1]
    y3 = y2 + 3.0 * s3(a1, a2, o3, a3) + eps[:, 2]

    X = np.column_stack([o1, o2, o3])
    A = np.column_stack([a1, a2, a3])
    Y = np.column_stack([y1, y2, y3])
    R = np.column_stack([r1, r2])
    at2 = r1 == 0
    at3 = at2 & (r2 == 0)
    for col, here in ((1, at2), (2, at3)):
        X[~here, col] = np.nan
        A[~here, col] = np.nan
        Y[~here, col] = np.nan
    R[~at2, 1] = np.nan
    exit_stage = 1 + at2.astype(int) + at3.astype(int)
    primary = compose_primary(Y, exit_stage)
    return SmartDataset(X[:, :, None], A, R, Y, primary, scenario.coding)


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


def oracle_contrasts(scenario: Scenario, data: SmartDataset, stage: int) -> np.ndarray:
    """True ``Q_j(h, t1) - Q_j(h, t2)`` for every patient present at ``stage``.

    Q-functions are computed exactly by backward induction over the binary
    covariates of the generative model, with the optimal treatment at every
    later stage.
    """
    t1, t2 = scenario.coding.values
    pR1, pR2 = scenario.response_probs
    s1, s2, s3 = _stage_terms(scenario.gamma)
    rows = data.present(stage)
    O = data.covariates[rows, :, 0]
    A = data.treatments[rows]

    def v3(a1, a2, o3):
        return np.maximum(s3(a1, a2, o3, t1), s3(a1, a2, o3, t2))

    def q2(o1, a1, o2, a2):
        # primary outcome minus stage-1 terms, given stage-2 presence
        p = _p_o3(scenario, a1, o2, a2)
        ev3 = p * v3(a1, a2, 1.0) + (1 - p) * v3(a1, a2, -1.0)
        return (pR2 * 0.75 + (1 - pR2)) * s2(a1, o2, a2) + (1 - pR2) * ev3

    def q1(o1, a1):
        p = _p_o2(scenario, o1, a1)
        best = lambda o2: np.maximum(q2(o1, a1, o2, t1), q2(o1, a1, o2, t2))  # noqa: E731
        return s1(o1, a1) + (1 - pR1) * (p * best(1.0) + (1 - p) * best(-1.0))

    if stage == 1:
        return q1(O[:, 0], t1) - q1(O[:, 0], t2)
    if stage == 2:
        return q2(O[:, 0], A[:, 0], O[:, 1], t1) - q2(O[:, 0], A[:, 0], O[:, 1], t2)
    if stage == 3:
        return s3(A[:, 0], A[:, 1], O[:, 2], t1) - s3(A[:, 0], A[:, 1], O[:, 2], t2)
    raise ValueError(f"stage {stage} out of range 1..3")


def oracle_policy(scenario: Scenario, spec: ModelSpec | None = None) -> PolicyFn:
    """Optimal regimen under the true generative model.

    Contrasts within ``1e-12`` of zero are ties and resolve to ``t2``.
    """
    if spec is not None and spec.num_stages != NUM_STAGES:
        raise ValueError(f"oracle is defined for the {NUM_STAGES}-stage design, spec has {spec.num_stages}")
    t1, t2 = scenario.coding.values

    def decide(data: SmartDataset, stage: int) -> np.ndarray:
        diff = oracle_contrasts(scenario, data, stage)
        return np.where(diff > TIE_TOL, t1, t2).astype(float)

    return decide


def nonregularity(scenario: Scenario, psi: Sequence[float] | None = None) -> tuple[float, float]:
    """``(p3, p2)``: probability that the shared linear contrast is exactly zero.

    Stage 3 uses features ``(1, O3, A2, A1 A2)``, stage 2 ``(1, O2, A1)``,
    evaluated by enumerating the binary history distribution of patients
    present at that stage.
    """
    psi = np.asarray(scenario.true_psi if psi is None else psi, dtype=float)
    t1, t2 = scenario.coding.values
    p3 = p2 = 0.0
    for o1, a1, a2 in itertools.product((-1.0, 1.0), (t1, t2), (t1, t2)):
        for o2 in (-1.0, 1.0):
            po2 = _p_o2(scenario, o1, a1)
            w2 = 0.25 * (po2 if o2 == 1 else 1 - po2)  # P(o1) P(a1) P(o2 | .)
            c2 = psi[0] + psi[1] * o2 + psi[2] * a1
            p2 += 0.5 * w2 * (abs(c2) <= TIE_TOL)  # a2 is summed over twice
            for o3 in (-1.0, 1.0):
                po3 = _p_o3(scenario, a1, o2, a2)
                w3 = w2 * 0.5 * (po3 if o3 == 1 else 1 - po3)
                c3 = psi[0] + psi[1] * o3 + psi[2] * a2 + psi[3] * a1 * a2
                p3 += w3 * (abs(c3) <= TIE_TOL)
    return float(p3), float(p2)


# ---------------------------------------------------------------------------
# Allocation matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchingReport:
    stage_matching: tuple[float, ...]
    M: float
    M_tilde: float
    stage_sizes: tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "M_j": list(self.stage_matching),
            "M": self.M,
            "M_tilde": self.M_tilde,
            "n_j": list(self.stage_sizes),
        }


def constant_policy(value: float) -> PolicyFn:
    def decide(data: SmartDataset, stage: int) -> np.ndarray:
        return np.full(int(data.present(stage).sum()), float(value))

    return decide


def allocation_matching(
    fitted: PolicyFn,
    oracle: PolicyFn | Sequence[np.ndarray],
    eval_data: SmartDataset,
) -> MatchingReport:
    """Agreement of two regimens on the histories in ``eval_data``.

    ``oracle`` may be a policy or its precomputed per-stage decisions.
    """
    if eval_data.n == 0:
        raise ValueError("empty evaluation set")
    J = eval_data.num_stages
    all_match = np.ones(eval_data.n, dtype=bool)
    Mj, nj = [], []
    for j in range(1, J + 1):
        rows = np.flatnonzero(eval_data.present(j))
        d_fit = np.asarray(fitted(eval_data, j))
        d_or = np.asarray(oracle(eval_data, j) if callable(oracle) else oracle[j - 1])
        same = d_fit == d_or
        all_match[rows[~same]] = False
        nj.append(rows.size)
        Mj.append(float(same.mean()) if rows.size else float("nan"))
    total = sum(nj)
    M = float(sum(n * m for n, m in zip(nj, Mj) if n) / total)
    return MatchingReport(tuple(Mj), M, float(all_match.mean()), tuple(nj))


# ---------------------------------------------------------------------------
# Monte Carlo comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonCell:
    scenario: str
    method: str
    init: str
    bias: float
    M: float
    M_tilde: float
    reps: int
    failures: int
    converged: int
    mean_lambda: float = float("nan")

    def as_row(self) -> dict:
        return {
            "scenario": self.scenario,
            "method": self.method,
            "init": self.init,
            "bias": self.bias,
            "M": 100.0 * self.M,
            "M_tilde": 100.0 * self.M_tilde,
            "reps": self.reps,
            "failures": self.failures,
            "converged": self.converged,
            "lambda": self.mean_lambda,
        }


def _one_replication(
    scenario: Scenario,
    spec: ModelSpec,
    methods: Sequence[str],
    inits: Sequence[str],
    seq: np.random.SeedSequence,
    eval_n: int,
    cfg,
    lambda_grid,
    cv_folds: int,
) -> dict[tuple[str, str], tuple[float, float, float, str, float]]:
    from .estimators import (
        LeastSquares,
        fit_problem,
        initial_values,
        policy,
        q_unshared_fit,
    )
    from .model import build_problem
    from .resampling import select_lambda

    train_seq, eval_seq, cv_seq = seq.spawn(3)
    train = generate_smart(scenario, scenario.n, train_seq)
    evaluation = generate_smart(scenario, eval_n, eval_seq)
    oracle = oracle_policy(scenario)
    oracle_dec = [oracle(evaluation, j) for j in range(1, NUM_STAGES + 1)]
    truth0 = float(scenario.true_psi[0])
    out: dict[tuple[str, str], tuple[float, float, float, str, float]] = {}

    if "oracle" in methods:
        rep = allocation_matching(oracle, oracle_dec, evaluation)
        for init in inits:
            out[("oracle", init)] = (0.0, rep.M, rep.M_tilde, "Converged", float("nan"))

    fitted_methods = [m for m in methods if m != "oracle"]
    if not fitted_methods:
        return out
    problem = build_problem(train, spec)
    solver = LeastSquares(problem.design)
    try:
        unshared = q_unshared_fit(train, spec)
    except np.linalg.LinAlgError:
        unshared = None
    cv_seed = int(cv_seq.generate_state(1)[0])
    for init in inits:
        if unshared is None and init != "zero":
            for method in fitted_methods:
                out[(method, init)] = (np.nan, np.nan, np.nan, "Failed", np.nan)
            continue
        theta0 = initial_values(unshared, spec, init) if unshared is not None else None
        for method in fitted_methods:
            lam = 0.0
            try:
                if method == "penalized":
                    cv = select_lambda(train, spec, train.coding, init, lambda_grid, cv_seed, cfg=cfg, folds=cv_folds)
                    lam = cv.lambda_hat
                    res = fit_problem(problem, theta0, replace(cfg, lam=lam), penalized=True, solver=solver,
                                      diagnose=False)
                elif method == "q_shared":
                    res = fit_problem(problem, theta0, cfg, penalized=False, solver=solver, diagnose=False)
                else:
                    raise ValueError(f"unknown method {method!r}")
            except np.linalg.LinAlgError:
                out[(method, init)] = (np.nan, np.nan, np.nan, "Failed", lam)
                continue
            rep = allocation_matching(policy(res.theta_hat, spec, train.coding), oracle_dec, evaluation)
            bias = float(res.theta_hat.psi[0]) - truth0
            out[(method, init)] = (bias, rep.M, rep.M_tilde, res.status.value, lam)
    return out


def run_comparison(
    scenario: Scenario,
    spec: ModelSpec,
    methods: Sequence[str] = ("q_shared", "penalized"),
    init_strategies: Sequence[str] = ("sa", "ivwa", "max", "min", "zero"),
    reps: int = 200,
    seed: int = 0,
    *,
    eval_n: int = 10_000,
    cfg=None,
    lambda_grid: Sequence[float] | None = None,
    cv_folds: int = 10,
    workers: int = 1,
    progress: Callable[[int], None] | None = None,
) -> list[ComparisonCell]:
    """Monte Carlo bias of psi0 and allocation matching per (method, init).

    Each replication draws a training cohort and an independent evaluation
    cohort of ``eval_n`` patients from its own substream, so results do not
    depend on ``workers``.  For the penalized method lambda is chosen by
    cross-validation on the training cohort with the same starting values.
    """
    from .estimators import FitConfig
    from .resampling import DEFAULT_LAMBDA_GRID, parallel_map

    if reps < 1:
        raise ValueError("reps must be >= 1")
    cfg = cfg or FitConfig()
    grid = DEFAULT_LAMBDA_GRID if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    inits = [i.lower() for i in init_strategies]
    seqs = np.random.SeedSequence(seed).spawn(reps)

    def job(r: int):
        res = _one_replication(scenario, spec, methods, inits, seqs[r], eval_n, cfg, grid, cv_folds)
        if progress is not None:
            progress(r)
        return res

    results = parallel_map(job, range(reps), workers)
    cells = []
    for method in methods:
        for init in inits:
            vals = [res[(method, init)] for res in results]
            ok = [v for v in vals if v[3] != "Failed"]
            arr = np.array([v[:3] for v in ok]) if ok else np.full((1, 3), np.nan)
            lam = np.array([v[4] for v in ok]) if ok else np.array([np.nan])
            cell = ComparisonCell(
                scenario=scenario.name,
                method=method,
                init=init,
                bias=float(arr[:, 0].mean()),
                M=float(arr[:, 1].mean()),
                M_tilde=float(arr[:, 2].mean()),
                reps=reps,
                failures=len(vals) - len(ok),
                converged=sum(v[3] == "Converged" for v in ok),
                mean_lambda=float(np.mean(lam)) if method == "penalized" else float("nan"),
            )
            if cell.M_tilde > cell.M + 1e-12:
                warnings.warn(f"{scenario.name}/{method}/{init}: M_tilde {cell.M_tilde:.4f} exceeds M {cell.M:.4f}")
            cells.append(cell)
    return cells
