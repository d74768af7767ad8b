"""Command-line entry point: ``qshared {simulate,fit,diagnose,bootstrap,cv,compare}``.

Exit codes: 0 success, 1 diagnose gate (hat matrix expands), 2 invalid
input or configuration, 3 numerical failure (singular design, divergence).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import bundled
from .dataio import SchemaError, ingest_csv, write_csv
from .diagnostics import nonexpansion_check
from .estimators import (
    INIT_STRATEGIES,
    FitConfig,
    FitResult,
    FitStatus,
    fit_problem,
    initial_values,
    q_unshared_fit,
)
from .model import ModelSpec, SmartDataset, TreatmentCoding, build_problem, recode
from .resampling import (
    DEFAULT_B,
    DEFAULT_LAMBDA_GRID,
    DEFAULT_M_EXPONENT,
    choose_m,
    m_out_of_n_bootstrap,
    select_lambda,
)
from .simulator import Scenario, generate_smart, run_comparison

__all__ = ["RunConfig", "ingest_csv", "run", "main", "build_parser"]

DEFAULT_SEED = 2016
EXIT_OK, EXIT_GATE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3
METHODS = ("q_shared", "penalized", "unshared")


@dataclass
class RunConfig:
    subcommand: str
    dataset_path: Path | None = None
    spec_path: Path | None = None
    scenario_paths: list[Path] = field(default_factory=list)
    method: str = "q_shared"
    fit: FitConfig = field(default_factory=FitConfig)
    lam: str = "cv"
    init: str = "zero"
    coding: TreatmentCoding | None = None
    truncate: bool = False
    seed: int = DEFAULT_SEED
    output: Path | None = None
    # simulate
    n: int | None = None
    treatment_coding: TreatmentCoding | None = None
    covariate_coding: tuple[float, float] | None = None
    # bootstrap
    B: int = DEFAULT_B
    m: int | None = None
    m_exponent: float = DEFAULT_M_EXPONENT
    trace_reps: int = 0
    # cv
    grid: np.ndarray = field(default_factory=lambda: DEFAULT_LAMBDA_GRID.copy())
    # compare
    reps: int = 200
    eval_n: int = 10_000
    methods: tuple[str, ...] = ("q_shared", "penalized")
    inits: tuple[str, ...] = INIT_STRATEGIES
    workers: int = 1
    trace: bool = False


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _coding(text: str) -> TreatmentCoding:
    try:
        return TreatmentCoding(*_pair(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _grid(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad lambda grid {text!r}") from None


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _require(value, flag: str, sub: str):
    if value is None:
        raise UsageError(f"{sub}: {flag} is required")
    return value


def _load_inputs(cfg: RunConfig) -> tuple[SmartDataset, ModelSpec]:
    data = ingest_csv(_require(cfg.dataset_path, "--data", cfg.subcommand), cfg.coding, truncate=cfg.truncate)
    spec = ModelSpec.load(cfg.spec_path or bundled("smart3.yaml"))
    return data, spec


def _theta0(data: SmartDataset, spec: ModelSpec, init: str):
    if init == "zero":
        return None
    return initial_values(q_unshared_fit(data, spec), spec, init)


def _resolve_lambda(cfg: RunConfig, data: SmartDataset, spec: ModelSpec) -> float:
    if cfg.method != "penalized":
        return 0.0
    if cfg.lam == "cv":
        return select_lambda(data, spec, data.coding, cfg.init, cfg.grid, cfg.seed, cfg=cfg.fit).lambda_hat
    return float(cfg.lam)


def _fit(data: SmartDataset, spec: ModelSpec, method: str, init: str, fit_cfg: FitConfig,
         diagnose: bool = True) -> FitResult:
    problem = build_problem(data, spec)
    return fit_problem(problem, _theta0(data, spec, init), fit_cfg, penalized=method == "penalized",
                       diagnose=diagnose)


def _trace_rows(res: FitResult) -> list[dict]:
    names = res.theta_hat.names
    return [
        {"iter": k, "param_name": name, "value": float(v)}
        for k, row in enumerate(res.trace)
        for name, v in zip(names, row)
    ]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(cfg: RunConfig) -> int:
    if len(cfg.scenario_paths) != 1:
        raise UsageError("simulate: exactly one --scenario is required")
    sc = Scenario.load(cfg.scenario_paths[0])
    data = generate_smart(sc, cfg.n, cfg.seed)
    if cfg.treatment_coding is not None or cfg.covariate_coding is not None:
        data = recode(data, cfg.treatment_coding, cfg.covariate_coding)
    out = _require(cfg.output, "--out", "simulate")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, out)
    print(f"wrote {data.n} patients (stage sizes {data.stage_sizes()}) to {out}")
    return EXIT_OK


def _cmd_fit(cfg: RunConfig) -> int:
    data, spec = _load_inputs(cfg)
    out = cfg.output or Path(".")
    if cfg.method == "unshared":
        fits = q_unshared_fit(data, spec)
        report = {
            "method": "unshared",
            "stages": [
                {
                    "stage": f.stage,
                    "n": f.n,
                    "main": [float(v) for v in f.main_coef],
                    "interaction": {k: float(v) for k, v in zip(f.inter_names, f.inter_coef)},
                    "interaction_variance": {k: float(v) for k, v in zip(f.inter_names, f.inter_var)},
                }
                for f in fits
            ],
        }
        _write_json(out / "fit_report.json", report)
        print(json.dumps(report, indent=2))
        return EXIT_OK
    lam = _resolve_lambda(cfg, data, spec)
    res = _fit(data, spec, cfg.method, cfg.init, replace(cfg.fit, lam=lam))
    report = res.report()
    report["init"] = cfg.init
    report["n"] = data.n
    _write_json(out / "fit_report.json", report)
    if cfg.trace:
        _write_rows(out / "trace.csv", _trace_rows(res))
    print(f"{cfg.method}: {res.status.value} after {res.iterations} iterations "
          f"(lambda={lam:g}, ||H||_inf={res.hat_inf_norm:.4f})")
    for name, v in zip(res.theta_hat.names, res.theta_hat.values):
        if name in spec.shared:
            print(f"  {name:>8s} {v: .6g}")
    return EXIT_NUMERIC if res.status is FitStatus.DIVERGED else EXIT_OK


def _cmd_diagnose(cfg: RunConfig) -> int:
    data, spec = _load_inputs(cfg)
    report = nonexpansion_check(build_problem(data, spec).design)
    text = json.dumps(report.as_dict(), indent=2)
    print(text)
    if cfg.output is not None:
        _write_json(cfg.output, report.as_dict())
    return EXIT_OK if report.is_nonexpansion else EXIT_GATE


def _cmd_bootstrap(cfg: RunConfig) -> int:
    data, spec = _load_inputs(cfg)
    if cfg.method == "unshared":
        raise UsageError("bootstrap: use --method q_shared or penalized")
    lam = _resolve_lambda(cfg, data, spec)
    fit_cfg = replace(cfg.fit, lam=lam)
    m = cfg.m if cfg.m is not None else choose_m(data.n, cfg.m_exponent)
    summary = m_out_of_n_bootstrap(
        data, lambda d: _fit(d, spec, cfg.method, cfg.init, fit_cfg, diagnose=False),
        m=m, B=cfg.B, seed=cfg.seed, workers=cfg.workers,
    )
    rows = summary.rows(list(spec.shared))
    print(f"{cfg.method} (lambda={lam:g}), m={summary.m} of n={summary.n}, B={summary.B}, "
          f"replicate status {summary.status_counts}")
    print(f"{'Parameter':>10s} {'Estimate':>12s} {'Variance':>12s}  CI")
    for r in rows:
        print(f"{r['Parameter']:>10s} {r['Estimate']:12.4g} {r['Variance']:12.4g}  "
              f"({r['CI_low']:.4g}, {r['CI_high']:.4g})")
    out = cfg.output or Path("bootstrap.csv")
    _write_rows(out, rows)
    if cfg.trace_reps:
        seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.B)
        trace_rows = []
        for b in range(min(cfg.trace_reps, cfg.B)):
            idx = np.random.default_rng(seqs[b]).integers(0, data.n, size=m)
            res = _fit(data.subset(idx), spec, cfg.method, cfg.init, fit_cfg, diagnose=False)
            trace_rows += [{"rep": b, **r} for r in _trace_rows(res) if r["param_name"] in spec.shared]
        _write_rows(out.with_name(out.stem + "_traces.csv"), trace_rows)
    return EXIT_OK


def _cmd_cv(cfg: RunConfig) -> int:
    data, spec = _load_inputs(cfg)
    res = select_lambda(data, spec, data.coding, cfg.init, cfg.grid, cfg.seed, cfg=cfg.fit)
    _write_rows(cfg.output or Path("cv.csv"), res.rows())
    print(f"lambda_hat = {res.lambda_hat:g}")
    return EXIT_OK


def _cmd_compare(cfg: RunConfig) -> int:
    if not cfg.scenario_paths:
        raise UsageError("compare: at least one --scenario is required")
    spec = ModelSpec.load(cfg.spec_path or bundled("smart3.yaml"))
    rows = []
    for path in cfg.scenario_paths:
        sc = Scenario.load(path)
        cells = run_comparison(sc, spec, cfg.methods, cfg.inits, cfg.reps, cfg.seed, eval_n=cfg.eval_n,
                               cfg=cfg.fit, lambda_grid=cfg.grid, workers=cfg.workers)
        rows += [c.as_row() for c in cells]
        for c in cells:
            print(f"{c.scenario:>10s} {c.method:>10s} {c.init:>5s} bias={c.bias: .4f} "
                  f"M={100 * c.M:6.2f} M~={100 * c.M_tilde:6.2f}")
    _write_rows(cfg.output or Path("compare.csv"), rows)
    return EXIT_OK


COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "diagnose": _cmd_diagnose,
    "bootstrap": _cmd_bootstrap,
    "cv": _cmd_cv,
    "compare": _cmd_compare,
}


def run(config: RunConfig) -> int:
    """Dispatch a subcommand; every failure becomes a message and an exit code."""
    try:
        return COMMANDS[config.subcommand](config)
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, SchemaError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = argparse.ArgumentParser(prog="qshared", description="Shared-parameter Q-learning toolkit.",
                                 formatter_class=fmt)
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--data", type=Path, help="wide CSV dataset")
            p.add_argument("--coding", type=_coding, default=None,
                           help="treatment coding t1,t2, e.g. --coding=-1,1 (default: inferred from the A columns)")
            p.add_argument("--truncate", action="store_true",
                           help="drop cells recorded after a patient responded instead of rejecting the file")
        p.add_argument("--spec", type=Path, default=None, help="model spec YAML (default: bundled smart3.yaml)")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="root random seed")
        p.add_argument("--out", type=Path, default=None, help="output path")

    def fitflags(p, method=True):
        if method:
            p.add_argument("--method", choices=METHODS, default="q_shared", help="estimator")
        p.add_argument("--epsilon", type=float, default=FitConfig.epsilon, help="convergence threshold")
        p.add_argument("--max-iters", type=int, default=FitConfig.max_iters, help="iteration cap")
        p.add_argument("--divergence-guard", type=float, default=FitConfig.divergence_guard,
                       help="abort when ||theta|| exceeds this")
        p.add_argument("--lambda", dest="lam", default="cv",
                       help="ridge weight for --method penalized, or 'cv' for 10-fold CV")
        p.add_argument("--init", choices=INIT_STRATEGIES, default="zero", help="starting values")
        p.add_argument("--standardize", action="store_true", help="scale design columns before the ridge solve")
        p.add_argument("--grid", type=_grid, default=DEFAULT_LAMBDA_GRID,
                       help="comma-separated lambda grid for CV (default: 25 log-spaced points on [1e-4, 1e2])")

    p = sub.add_parser("simulate", help="simulate a three-stage SMART dataset", formatter_class=fmt)
    p.add_argument("--scenario", type=Path, action="append", default=[], help="scenario YAML")
    p.add_argument("--n", type=int, default=None, help="patients (default: scenario n)")
    p.add_argument("--treatment-coding", type=_coding, default=None, help="recode treatments to t1,t2")
    p.add_argument("--covariate-coding", type=_pair, default=None, help="recode -1/1 covariates to c1,c2, e.g. --covariate-coding=-0.01,0.01")
    common(p, data=False)

    p = sub.add_parser("fit", help="fit a regimen", formatter_class=fmt)
    common(p)
    fitflags(p)
    p.add_argument("--trace", action="store_true", help="also write trace.csv (iter, param_name, value)")

    p = sub.add_parser("diagnose", help="hat-matrix infinity-norm check; exit 1 if it expands",
                       formatter_class=fmt)
    common(p)

    p = sub.add_parser("bootstrap", help="m-out-of-n bootstrap of the shared parameters", formatter_class=fmt)
    common(p)
    fitflags(p)
    p.add_argument("--B", type=int, default=DEFAULT_B, help="bootstrap replications")
    p.add_argument("--m-exponent", type=float, default=DEFAULT_M_EXPONENT, help="m = ceil(n ** exponent)")
    p.add_argument("--m", type=int, default=None, help="resample size (overrides --m-exponent)")
    p.add_argument("--trace-reps", type=int, default=0,
                   help="write iteration traces of the first N replicates next to --out")
    p.add_argument("--workers", type=int, default=1, help="threads for replicates")

    p = sub.add_parser("cv", help="10-fold CV curve for lambda", formatter_class=fmt)
    common(p)
    fitflags(p, method=False)

    p = sub.add_parser("compare", help="Monte Carlo comparison over scenarios", formatter_class=fmt)
    p.add_argument("--scenario", type=Path, action="append", default=[], help="scenario YAML (repeatable)")
    common(p, data=False)
    fitflags(p, method=False)
    p.add_argument("--reps", type=int, default=200, help="training datasets per scenario")
    p.add_argument("--eval-n", type=int, default=10_000, help="evaluation cohort size")
    p.add_argument("--methods", default="q_shared,penalized", help="comma-separated methods")
    p.add_argument("--inits", default=",".join(INIT_STRATEGIES), help="comma-separated init strategies")
    p.add_argument("--workers", type=int, default=1, help="threads for replications")
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    g = lambda name, default=None: getattr(ns, name, default)  # noqa: E731
    fit = FitConfig(
        epsilon=g("epsilon", FitConfig.epsilon),
        max_iters=g("max_iters", FitConfig.max_iters),
        divergence_guard=g("divergence_guard", FitConfig.divergence_guard),
        standardize=g("standardize", False),
    )
    lam = g("lam", "cv")
    if lam != "cv":
        try:
            if float(lam) < 0:
                raise ValueError
        except ValueError:
            raise UsageError(f"--lambda must be 'cv' or a non-negative number, got {lam!r}") from None
    methods = tuple(m.strip() for m in g("methods", "q_shared,penalized").split(",") if m.strip())
    inits = tuple(i.strip().lower() for i in g("inits", ",".join(INIT_STRATEGIES)).split(",") if i.strip())
    return RunConfig(
        subcommand=ns.subcommand,
        dataset_path=g("data"),
        spec_path=g("spec"),
        scenario_paths=list(g("scenario", []) or []),
        method=g("method", "q_shared"),
        fit=fit,
        lam=lam,
        init=g("init", "zero"),
        coding=g("coding"),
        truncate=g("truncate", False),
        seed=g("seed", DEFAULT_SEED),
        output=g("out"),
        n=g("n"),
        treatment_coding=g("treatment_coding"),
        covariate_coding=g("covariate_coding"),
        B=g("B", DEFAULT_B),
        m=g("m"),
        m_exponent=g("m_exponent", DEFAULT_M_EXPONENT),
        trace_reps=g("trace_reps", 0),
        grid=g("grid", DEFAULT_LAMBDA_GRID),
        reps=g("reps", 200),
        eval_n=g("eval_n", 10_000),
        methods=methods,
        inits=inits,
        workers=g("workers", 1),
        trace=g("trace", False),
    )


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    try:
        cfg = config_from_args(ns)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
