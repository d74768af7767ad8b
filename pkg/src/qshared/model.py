"""Multi-stage trajectories, Q-function specifications and the stacked regression system.

A Q-function at stage ``j`` is linear in two feature vectors built from the
history ``H_j = (O_1, A_1, ..., O_j)``::

    Q_j = beta_j' H_j0 + (psi' H_j1) A_j

Interaction slots named in ``ModelSpec.shared`` map to one column of the
shared ``psi`` block whatever stage they appear in; any other interaction
slot is a stage-local coefficient stored at the end of that stage's beta
block.  Stacking every (patient, stage) row gives ``Y*(theta) = Z theta``
with ``Z`` fixed and ``Y*`` depending on ``theta`` through the Bellman
backup of the next stage.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "TreatmentCoding",
    "Trajectory",
    "SmartDataset",
    "Feature",
    "StageSpec",
    "ModelSpec",
    "ParameterLayout",
    "ParameterVector",
    "StackedSystem",
    "StackedProblem",
    "primary_outcome",
    "compose_primary",
    "stage_features",
    "stage_feature_matrices",
    "pseudo_outcome",
    "build_problem",
    "assemble_stacked",
    "recode",
]


# ---------------------------------------------------------------------------
# Treatment coding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreatmentCoding:
    """The two numeric values a binary treatment is coded with."""

    t1: float = -1.0
    t2: float = 1.0

    def __post_init__(self) -> None:
        t1, t2 = float(self.t1), float(self.t2)
        if not (math.isfinite(t1) and math.isfinite(t2)):
            raise ValueError("treatment codes must be finite")
        if t1 == t2:
            raise ValueError(f"treatment codes must differ, got {t1} twice")
        object.__setattr__(self, "t1", t1)
        object.__setattr__(self, "t2", t2)

    @property
    def values(self) -> tuple[float, float]:
        return (self.t1, self.t2)

    def max_term(self, contrast: np.ndarray | float) -> np.ndarray | float:
        """``max(t1 * c, t2 * c)``, the value of the best treatment."""
        return np.maximum(self.t1 * contrast, self.t2 * contrast)

    def choose(self, contrast: np.ndarray | float) -> np.ndarray | float:
        """Treatment maximising ``a * c``; exact ties go to ``t2``."""
        c = np.asarray(contrast, dtype=float)
        out = np.where(self.t1 * c > self.t2 * c, self.t1, self.t2)
        return out if out.ndim else float(out)

    def contains(self, values: np.ndarray) -> np.ndarray:
        return (values == self.t1) | (values == self.t2)


# ---------------------------------------------------------------------------
# Primary outcome
# ---------------------------------------------------------------------------


def primary_outcome(y1: float, y2: float, y3: float, r1: int, r2: int) -> float:
    """Responder-weighted primary outcome of a three-stage trial."""
    vals = (y1, y2, y3, r1, r2)
    if not all(math.isfinite(float(v)) for v in vals):
        raise ValueError(f"primary_outcome needs finite inputs, got {vals}")
    if r1 not in (0, 1) or r2 not in (0, 1):
        raise ValueError("responder flags must be 0 or 1")
    return (
        r1 * y1
        + (1 - r1) * r2 * (y1 + y2) / 2.0
        + (1 - r1) * (1 - r2) * (y1 + y2 + y3) / 3.0
    )


def compose_primary(stage_outcomes: np.ndarray, exit_stage: np.ndarray) -> np.ndarray:
    """Mean of the stage outcomes up to each patient's exit stage.

    For three stages this is exactly :func:`primary_outcome`; it also works
    for arrays holding NaN beyond the exit stage.
    """
    y = np.asarray(stage_outcomes, dtype=float)
    exit_stage = np.asarray(exit_stage, dtype=int)
    n, J = y.shape
    mask = np.arange(1, J + 1)[None, :] <= exit_stage[:, None]
    total = np.where(mask, y, 0.0).sum(axis=1)
    return total / exit_stage


# ---------------------------------------------------------------------------
# Trajectories and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """One patient's record; stages after a response are absent."""

    patient_id: Any
    covariates: Mapping[int, tuple[float, ...]]
    treatments: Mapping[int, float]
    responders: Mapping[int, int]
    stage_outcomes: Mapping[int, float]
    primary_outcome: float

    @property
    def last_stage(self) -> int:
        return max(self.treatments)

    def is_present(self, stage: int) -> bool:
        return stage in self.treatments


def _frozen(a: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SmartDataset:
    """Column-oriented store of ``n`` trajectories over ``J`` stages.

    Arrays hold NaN wherever a patient has left the study.  ``covariates``
    has shape ``(n, J, d)``; ``treatments`` and ``stage_outcomes`` are
    ``(n, J)``; ``responders`` is ``(n, J - 1)``.
    """

    covariates: np.ndarray
    treatments: np.ndarray
    responders: np.ndarray
    stage_outcomes: np.ndarray
    primary: np.ndarray
    coding: TreatmentCoding = field(default_factory=TreatmentCoding)
    patient_ids: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        A = _frozen(self.treatments)
        if A.ndim != 2:
            raise ValueError("treatments must be a 2-d array (patients x stages)")
        n, J = A.shape
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        if X.shape[:2] != (n, J):
            raise ValueError(f"covariates shape {X.shape} does not match {(n, J)}")
        R = np.asarray(self.responders, dtype=float).reshape(n, max(J - 1, 0))
        Y = np.asarray(self.stage_outcomes, dtype=float)
        if Y.shape != (n, J):
            raise ValueError(f"stage_outcomes shape {Y.shape} does not match {(n, J)}")
        P = np.asarray(self.primary, dtype=float).reshape(n)
        ids = np.arange(n) if self.patient_ids is None else np.asarray(self.patient_ids)
        if ids.shape != (n,):
            raise ValueError("patient_ids must have one entry per patient")
        object.__setattr__(self, "treatments", A)
        object.__setattr__(self, "covariates", _frozen(X))
        object.__setattr__(self, "responders", _frozen(R))
        object.__setattr__(self, "stage_outcomes", _frozen(Y))
        object.__setattr__(self, "primary", _frozen(P))
        object.__setattr__(self, "patient_ids", _frozen(ids, dtype=ids.dtype))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        self._validate()

    def _validate(self) -> None:
        n, J = self.treatments.shape
        present = ~np.isnan(self.treatments)
        if n and not present[:, 0].all():
            raise ValueError("every patient must have a stage-1 treatment")
        for j in range(J - 1):
            r = self.responders[:, j]
            here = present[:, j]
            if np.any(here & ~np.isin(r, (0.0, 1.0))):
                raise ValueError(f"responder flag R{j + 1} must be 0/1 for patients at stage {j + 1}")
            expected = here & (r == 0)
            bad = np.flatnonzero(expected != present[:, j + 1])
            if bad.size:
                raise ValueError(
                    f"patient row {int(bad[0])}: stage {j + 2} presence inconsistent with R{j + 1}"
                )
        vals = self.treatments[present]
        if not self.coding.contains(vals).all():
            odd = vals[~self.coding.contains(vals)][0]
            raise ValueError(f"treatment value {odd} is not one of {self.coding.values}")
        if not np.isfinite(self.primary).all():
            raise ValueError("primary outcome must be finite for every patient")

    # -- shape -------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.treatments.shape[0]

    @property
    def num_stages(self) -> int:
        return self.treatments.shape[1]

    @property
    def num_covariates(self) -> int:
        return self.covariates.shape[2]

    def __len__(self) -> int:
        return self.n

    def present(self, stage: int) -> np.ndarray:
        """Boolean mask of patients still in the study at ``stage``."""
        self._check_stage(stage)
        return ~np.isnan(self.treatments[:, stage - 1])

    def exit_stage(self) -> np.ndarray:
        return (~np.isnan(self.treatments)).sum(axis=1)

    def stage_sizes(self) -> tuple[int, ...]:
        return tuple(int(self.present(j).sum()) for j in range(1, self.num_stages + 1))

    def _check_stage(self, stage: int) -> None:
        if not 1 <= stage <= self.num_stages:
            raise ValueError(f"stage {stage} out of range 1..{self.num_stages}")

    # -- conversions -------------------------------------------------------

    def subset(self, index: Sequence[int] | np.ndarray) -> "SmartDataset":
        """Dataset of the given patient rows (duplicates allowed)."""
        idx = np.asarray(index, dtype=int)
        return SmartDataset(
            covariates=self.covariates[idx],
            treatments=self.treatments[idx],
            responders=self.responders[idx],
            stage_outcomes=self.stage_outcomes[idx],
            primary=self.primary[idx],
            coding=self.coding,
            patient_ids=self.patient_ids[idx],
            covariate_names=self.covariate_names,
        )

    def trajectory(self, i: int) -> Trajectory:
        last = int(self.exit_stage()[i])
        return Trajectory(
            patient_id=self.patient_ids[i].item(),
            covariates={j: tuple(float(v) for v in self.covariates[i, j - 1]) for j in range(1, last + 1)},
            treatments={j: float(self.treatments[i, j - 1]) for j in range(1, last + 1)},
            responders={j: int(self.responders[i, j - 1]) for j in range(1, min(last, self.num_stages - 1) + 1)},
            stage_outcomes={
                j: float(self.stage_outcomes[i, j - 1])
                for j in range(1, last + 1)
                if not np.isnan(self.stage_outcomes[i, j - 1])
            },
            primary_outcome=float(self.primary[i]),
        )

    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(self.n)]

    @classmethod
    def from_trajectories(
        cls,
        trajectories: Iterable[Trajectory],
        coding: TreatmentCoding | None = None,
        num_stages: int | None = None,
        covariate_names: Sequence[str] = (),
    ) -> "SmartDataset":
        trajs = list(trajectories)
        if not trajs:
            raise ValueError("no trajectories")
        J = num_stages or max(t.last_stage for t in trajs)
        d = max(len(v) for t in trajs for v in t.covariates.values())
        n = len(trajs)
        X = np.full((n, J, d), np.nan)
        A = np.full((n, J), np.nan)
        R = np.full((n, max(J - 1, 0)), np.nan)
        Y = np.full((n, J), np.nan)
        P = np.empty(n)
        ids = []
        for i, t in enumerate(trajs):
            for j, o in t.covariates.items():
                X[i, j - 1, : len(o)] = o
            for j, a in t.treatments.items():
                A[i, j - 1] = a
            for j, r in t.responders.items():
                if j < J:
                    R[i, j - 1] = r
            for j, y in t.stage_outcomes.items():
                Y[i, j - 1] = y
            P[i] = t.primary_outcome
            ids.append(t.patient_id)
        return cls(X, A, R, Y, P, coding or TreatmentCoding(), np.asarray(ids), covariate_names)


def recode(
    data: SmartDataset,
    treatment_coding: TreatmentCoding | None = None,
    covariate_coding: tuple[float, float] | None = None,
) -> SmartDataset:
    """Map treatments ``t1 -> new.t1``, ``t2 -> new.t2`` and binary covariates
    ``-1 -> c[0]``, ``1 -> c[1]``.  Outcomes are left untouched."""
    A = np.array(data.treatments)
    coding = data.coding
    if treatment_coding is not None:
        A = np.where(A == data.coding.t1, treatment_coding.t1, np.where(A == data.coding.t2, treatment_coding.t2, A))
        coding = treatment_coding
    X = np.array(data.covariates)
    if covariate_coding is not None:
        lo, hi = covariate_coding
        known = np.isnan(X) | (X == -1.0) | (X == 1.0)
        if not known.all():
            raise ValueError("covariate recoding needs covariates coded -1/1")
        X = np.where(X == -1.0, lo, np.where(X == 1.0, hi, X))
    return SmartDataset(X, A, data.responders, data.stage_outcomes, data.primary, coding,
                        data.patient_ids, data.covariate_names)


# ---------------------------------------------------------------------------
# Feature expressions
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"^(?P<name>[A-Za-z_.]+?)_?(?P<stage>\d+)(?:\[(?P<idx>\d+)\])?$")


@dataclass(frozen=True)
class Feature:
    """A product of history variables, e.g. ``"1"``, ``"O3"``, ``"A1*A2"``.

    Variables are ``A<k>`` (treatment at stage k), ``O<k>`` or ``O<k>[i]``
    (covariate i at stage k) and ``<name><k>`` for covariates declared by
    name, e.g. ``start.QIDS3``.
    """

    expr: str
    factors: tuple[tuple[str, int, int], ...]

    @classmethod
    def parse(cls, expr: str, covariate_names: Sequence[str] = ()) -> "Feature":
        text = str(expr).strip()
        factors: list[tuple[str, int, int]] = []
        for raw in text.split("*"):
            tok = raw.strip()
            if tok == "1":
                continue
            m = _TOKEN.match(tok)
            if m is None:
                raise ValueError(f"cannot parse feature term {tok!r} in {text!r}")
            name, stage = m.group("name"), int(m.group("stage"))
            if stage < 1:
                raise ValueError(f"stage index must be >= 1 in {tok!r}")
            if name == "A":
                if m.group("idx") is not None:
                    raise ValueError(f"treatments are scalar: {tok!r}")
                factors.append(("A", stage, 0))
            elif name == "O":
                factors.append(("O", stage, int(m.group("idx") or 0)))
            elif name in covariate_names:
                factors.append(("O", stage, list(covariate_names).index(name)))
            else:
                raise ValueError(f"unknown variable {name!r} in {text!r}")
        if not factors and text != "1":
            raise ValueError(f"empty feature expression {text!r}")
        return cls(text, tuple(factors))

    def max_stage(self) -> tuple[int, int]:
        """Latest covariate stage and latest treatment stage referenced."""
        o = max((s for k, s, _ in self.factors if k == "O"), default=0)
        a = max((s for k, s, _ in self.factors if k == "A"), default=0)
        return o, a

    def column(self, data: SmartDataset, rows: np.ndarray) -> np.ndarray:
        out = np.ones(int(np.count_nonzero(rows)) if rows.dtype == bool else len(rows))
        for kind, stage, idx in self.factors:
            if kind == "A":
                out = out * data.treatments[rows, stage - 1]
            else:
                out = out * data.covariates[rows, stage - 1, idx]
        return out

    def value(self, traj: Trajectory) -> float:
        out = 1.0
        for kind, stage, idx in self.factors:
            if kind == "A":
                out *= traj.treatments[stage]
            else:
                out *= traj.covariates[stage][idx]
        return out


@dataclass(frozen=True)
class StageSpec:
    main: tuple[Feature, ...]
    interaction: tuple[tuple[str, Feature], ...]


@dataclass(frozen=True)
class ModelSpec:
    """Per-stage main-effect and interaction features plus the sharing map."""

    stages: tuple[StageSpec, ...]
    shared: tuple[str, ...]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("a model needs at least one stage")
        seen: set[str] = set()
        for j, st in enumerate(self.stages, start=1):
            names = [name for name, _ in st.interaction]
            if len(set(names)) != len(names):
                raise ValueError(f"stage {j}: duplicate interaction slot")
            seen.update(names)
            for f in st.main + tuple(f for _, f in st.interaction):
                o, a = f.max_stage()
                if o > j or a >= j:
                    raise ValueError(f"stage {j}: feature {f.expr!r} uses information beyond H_{j}")
        if len(set(self.shared)) != len(self.shared):
            raise ValueError("duplicate shared slot names")
        unused = [s for s in self.shared if s not in seen]
        if unused:
            raise ValueError(f"shared slots {unused} appear in no stage")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage(self, j: int) -> StageSpec:
        if not 1 <= j <= self.num_stages:
            raise ValueError(f"stage {j} out of range 1..{self.num_stages}")
        return self.stages[j - 1]

    def local_slots(self, j: int) -> list[str]:
        return [name for name, _ in self.stage(j).interaction if name not in self.shared]

    @classmethod
    def from_dict(cls, cfg: Mapping[str, Any]) -> "ModelSpec":
        cov_names = tuple(cfg.get("covariates", ()))
        raw_stages = cfg.get("stages")
        if not isinstance(raw_stages, Mapping) or not raw_stages:
            raise ValueError("model config needs a 'stages' mapping keyed by stage number")
        J = int(cfg.get("num_stages", len(raw_stages)))
        keys = {int(k): v for k, v in raw_stages.items()}
        if sorted(keys) != list(range(1, J + 1)):
            raise ValueError(f"stages must be numbered 1..{J}, got {sorted(keys)}")
        stages = []
        first_seen: list[str] = []
        for j in range(1, J + 1):
            body = keys[j] or {}
            main = tuple(Feature.parse(e, cov_names) for e in body.get("main", []))
            inter_raw = body.get("interaction", {}) or {}
            if not isinstance(inter_raw, Mapping):
                raise ValueError(f"stage {j}: 'interaction' must map slot names to expressions")
            inter = tuple((str(k), Feature.parse(v, cov_names)) for k, v in inter_raw.items())
            stages.append(StageSpec(main, inter))
        for j in range(J, 0, -1):
            for name, _ in stages[j - 1].interaction:
                if name not in first_seen:
                    first_seen.append(name)
        shared = cfg.get("shared")
        shared = tuple(first_seen) if shared is None else tuple(str(s) for s in shared)
        return cls(tuple(stages), shared, cov_names)

    @classmethod
    def load(cls, path) -> "ModelSpec":
        from .config import load_yaml

        return cls.from_dict(load_yaml(path))


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterLayout:
    """Column positions of ``(beta_J, ..., beta_1, psi)`` for a spec."""

    blocks: tuple[tuple[str, int, int], ...]  # (block name, start, stop)
    names: tuple[str, ...]
    main_cols: tuple[tuple[int, ...], ...]  # per stage (index j - 1)
    inter_cols: tuple[tuple[int, ...], ...]  # per stage, aligned with StageSpec.interaction
    shared: tuple[str, ...]

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "ParameterLayout":
        J = spec.num_stages
        blocks, names = [], []
        main_cols: list[tuple[int, ...]] = [()] * J
        local_at: dict[tuple[int, str], int] = {}
        pos = 0
        for j in range(J, 0, -1):
            st = spec.stage(j)
            start = pos
            main_cols[j - 1] = tuple(range(pos, pos + len(st.main)))
            names += [f"beta{j}[{f.expr}]" for f in st.main]
            pos += len(st.main)
            for slot in spec.local_slots(j):
                local_at[(j, slot)] = pos
                names.append(f"beta{j}[{slot}]")
                pos += 1
            blocks.append((f"beta{j}", start, pos))
        psi_at = {s: pos + k for k, s in enumerate(spec.shared)}
        names += list(spec.shared)
        blocks.append(("psi", pos, pos + len(spec.shared)))
        inter_cols = tuple(
            tuple(psi_at[s] if s in psi_at else local_at[(j, s)] for s, _ in spec.stage(j).interaction)
            for j in range(1, J + 1)
        )
        return cls(tuple(blocks), tuple(names), tuple(main_cols), inter_cols, spec.shared)

    @property
    def size(self) -> int:
        return len(self.names)

    def block(self, name: str) -> slice:
        for b, start, stop in self.blocks:
            if b == name:
                return slice(start, stop)
        raise KeyError(name)

    @property
    def psi(self) -> slice:
        return self.block("psi")


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Stacked ``theta`` with its layout."""

    values: np.ndarray
    layout: ParameterLayout

    def __post_init__(self) -> None:
        v = _frozen(self.values)
        if v.shape != (self.layout.size,):
            raise ValueError(f"theta has {v.shape} entries, layout needs {self.layout.size}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParameterVector":
        layout = ParameterLayout.from_spec(spec)
        return cls(np.zeros(layout.size), layout)

    @classmethod
    def from_values(cls, spec: ModelSpec, values: Sequence[float]) -> "ParameterVector":
        return cls(np.asarray(values, dtype=float), ParameterLayout.from_spec(spec))

    def beta(self, j: int) -> np.ndarray:
        return self.values[self.layout.block(f"beta{j}")]

    @property
    def psi(self) -> np.ndarray:
        return self.values[self.layout.psi]

    @property
    def names(self) -> tuple[str, ...]:
        return self.layout.names

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in zip(self.layout.names, self.values)}

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)


# ---------------------------------------------------------------------------
# Stage features and pseudo-outcomes
# ---------------------------------------------------------------------------


def stage_features(traj: Trajectory, stage: int, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(H_j0, H_j1)`` for one patient; ``H_j1`` is ordered as the spec's slots."""
    st = spec.stage(stage)
    if not traj.is_present(stage):
        raise ValueError(f"patient {traj.patient_id!r} is not present at stage {stage}")
    h0 = np.array([f.value(traj) for f in st.main], dtype=float)
    h1 = np.array([f.value(traj) for _, f in st.interaction], dtype=float)
    return h0, h1


def stage_feature_matrices(
    data: SmartDataset, spec: ModelSpec, stage: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised features for every patient present at ``stage``.

    Returns ``(rows, H0, H1)`` where ``rows`` indexes patients.
    """
    st = spec.stage(stage)
    rows = np.flatnonzero(data.present(stage))
    H0 = np.column_stack([f.column(data, rows) for f in st.main]) if st.main else np.zeros((rows.size, 0))
    H1 = (
        np.column_stack([f.column(data, rows) for _, f in st.interaction])
        if st.interaction
        else np.zeros((rows.size, 0))
    )
    return rows, H0, H1


def _contrast_coefs(theta: ParameterVector, stage: int) -> np.ndarray:
    cols = theta.layout.inter_cols[stage - 1]
    return theta.values[list(cols)] if cols else np.zeros(0)


def pseudo_outcome(
    theta: ParameterVector,
    traj: Trajectory,
    stage: int,
    spec: ModelSpec,
    coding: TreatmentCoding,
) -> float:
    """Stage-``stage`` regression target for one patient.

    Responders at the end of ``stage`` contribute their observed primary
    outcome; everyone else gets the maximised next-stage Q-value.
    """
    J = spec.num_stages
    if stage >= J:
        raise ValueError(f"stage {stage} is final; it uses the observed outcome")
    if not traj.is_present(stage):
        raise ValueError(f"patient {traj.patient_id!r} is not present at stage {stage}")
    if traj.responders.get(stage) == 1 or not traj.is_present(stage + 1):
        return float(traj.primary_outcome)
    h0, h1 = stage_features(traj, stage + 1, spec)
    main = float(h0 @ theta.beta(stage + 1)[: h0.size])
    contrast = float(h1 @ _contrast_coefs(theta, stage + 1))
    return main + float(coding.max_term(contrast))


# ---------------------------------------------------------------------------
# Stacked system
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StackedSystem:
    """``Z``, ``Y*(theta)`` and the (patient, stage) behind every row."""

    design: np.ndarray
    response: np.ndarray
    row_patient: np.ndarray
    row_stage: np.ndarray
    patient_ids: np.ndarray

    @property
    def row_provenance(self) -> list[tuple[Any, int]]:
        return [(self.patient_ids[p].item(), int(s)) for p, s in zip(self.row_patient, self.row_stage)]


@dataclass(frozen=True, eq=False)
class StackedProblem:
    """Everything needed to evaluate ``Y*(theta)`` quickly for a fixed dataset.

    ``Y*(theta) = observed`` on terminal rows and, on the others,
    ``next_main @ theta + max(t1 * c, t2 * c)`` with ``c = next_contrast @ theta``.
    """

    design: np.ndarray
    observed: np.ndarray
    backup_rows: np.ndarray
    next_main: np.ndarray
    next_contrast: np.ndarray
    contrast: np.ndarray
    coding: TreatmentCoding
    layout: ParameterLayout
    row_patient: np.ndarray
    row_stage: np.ndarray
    patient_ids: np.ndarray

    @property
    def has_backup(self) -> bool:
        return self.backup_rows.size > 0

    def response(self, theta: np.ndarray) -> np.ndarray:
        y = self.observed.copy()
        if self.backup_rows.size:
            c = self.next_contrast @ theta
            y[self.backup_rows] = self.next_main @ theta + self.coding.max_term(c)
        return y

    def system(self, theta: ParameterVector | np.ndarray) -> StackedSystem:
        vals = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta, dtype=float)
        return StackedSystem(self.design, self.response(vals), self.row_patient, self.row_stage, self.patient_ids)

    def rows_of(self, patients: np.ndarray) -> np.ndarray:
        return np.flatnonzero(np.isin(self.row_patient, patients))


def build_problem(data: SmartDataset, spec: ModelSpec, coding: TreatmentCoding | None = None) -> StackedProblem:
    """Lay out the stacked regression (rows for stage J first, then J-1, ...)."""
    if data.n == 0:
        raise ValueError("empty dataset")
    J = spec.num_stages
    if data.num_stages < J:
        raise ValueError(f"dataset has {data.num_stages} stages, spec needs {J}")
    coding = coding or data.coding
    layout = ParameterLayout.from_spec(spec)
    p = layout.size
    blocks_Z, blocks_main, blocks_C, pats, stages = [], [], [], [], []
    row_of: dict[tuple[int, int], int] = {}
    offset = 0
    for j in range(J, 0, -1):
        rows, H0, H1 = stage_feature_matrices(data, spec, j)
        nj = rows.size
        A = data.treatments[rows, j - 1]
        M = np.zeros((nj, p))
        C = np.zeros((nj, p))
        if H0.shape[1]:
            M[:, list(layout.main_cols[j - 1])] = H0
        for k, col in enumerate(layout.inter_cols[j - 1]):
            C[:, col] = H1[:, k]
        blocks_Z.append(M + C * A[:, None])
        blocks_main.append(M)
        blocks_C.append(C)
        pats.append(rows)
        stages.append(np.full(nj, j))
        for r, i in enumerate(rows):
            row_of[(int(i), j)] = offset + r
        offset += nj
    Z = np.vstack(blocks_Z)
    main_all = np.vstack(blocks_main)
    C_all = np.vstack(blocks_C)
    row_patient = np.concatenate(pats)
    row_stage = np.concatenate(stages)
    if not np.any(Z):
        raise ValueError("design matrix has rank 0")

    # terminal rows: final stage, or the patient responded and exited
    exit_stage = np.minimum(data.exit_stage(), J)
    terminal = row_stage >= exit_stage[row_patient]
    observed = np.where(terminal, data.primary[row_patient], 0.0)
    backup = np.flatnonzero(~terminal)
    nxt = np.array([row_of[(int(row_patient[r]), int(row_stage[r]) + 1)] for r in backup], dtype=int)
    for a in (Z, observed, row_patient, row_stage):
        a.setflags(write=False)
    return StackedProblem(
        design=Z,
        observed=observed,
        backup_rows=backup,
        next_main=main_all[nxt] if nxt.size else np.zeros((0, p)),
        next_contrast=C_all[nxt] if nxt.size else np.zeros((0, p)),
        contrast=C_all,
        coding=coding,
        layout=layout,
        row_patient=row_patient,
        row_stage=row_stage,
        patient_ids=data.patient_ids,
    )


def assemble_stacked(
    data: SmartDataset,
    spec: ModelSpec,
    theta: ParameterVector,
    coding: TreatmentCoding | None = None,
) -> StackedSystem:
    problem = build_problem(data, spec, coding)
    if theta.layout.names != problem.layout.names:
        raise ValueError("theta layout does not match the model spec")
    return problem.system(theta)


PolicyFn = Callable[[SmartDataset, int], np.ndarray]
