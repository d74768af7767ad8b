"""Worked examples: the non-expansion check under two codings and the bootstrap pathology.

    python scripts/run_examples.py --B 200
"""

from __future__ import annotations

import argparse
import sys

from qshared.config import bundled
from qshared.diagnostics import nonexpansion_check
from qshared.estimators import FitConfig, fit_problem
from qshared.model import ModelSpec, TreatmentCoding, build_problem, recode
from qshared.resampling import choose_m, m_out_of_n_bootstrap, select_lambda
from qshared.simulator import Scenario, generate_smart


def _table(title: str, summary) -> None:
    print(f"\n{title}")
    print(f"{'Parameter':<16}{'Estimate':>12}{'Variance':>14}{'CI_low':>12}{'CI_high':>12}")
    for row in summary.rows():
        print(f"{row['Parameter']:<16}{row['Estimate']:>12.4g}{row['Variance']:>14.4g}"
              f"{row['CI_low']:>12.4g}{row['CI_high']:>12.4g}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--B", type=int, default=200, help="bootstrap replicates")
    ap.add_argument("--seed", type=int, default=2016)
    args = ap.parse_args(argv)

    spec = ModelSpec.load(bundled("smart3.yaml"))
    base = generate_smart(Scenario.load(bundled("scenarios/reference.yaml")))
    codings = {
        "treatments -0.1/0.1": recode(base, TreatmentCoding(-0.1, 0.1)),
        "treatments 0.250/0.248, covariates -0.01/0.01": recode(base, TreatmentCoding(0.250, 0.248), (-0.01, 0.01)),
    }
    for label, data in codings.items():
        rep = nonexpansion_check(build_problem(data, spec).design)
        print(f"{label}: ||H||_inf = {rep.inf_op_norm:.3f} ({rep.message})")

    data = codings["treatments 0.250/0.248, covariates -0.01/0.01"]
    m = choose_m(data.n, 0.8)
    lam = select_lambda(data, spec, seed=args.seed).lambda_hat
    print(f"\nn = {data.n}, m = {m}, B = {args.B}, CV lambda = {lam:g}")

    def fit_q(d):
        return fit_problem(build_problem(d, spec), None, FitConfig(), diagnose=False)

    def fit_p(d):
        return fit_problem(build_problem(d, spec), None, FitConfig(lam=lam), penalized=True, diagnose=False)

    q = m_out_of_n_bootstrap(data, fit_q, m=m, B=args.B, seed=args.seed)
    p = m_out_of_n_bootstrap(data, fit_p, m=m, B=args.B, seed=args.seed)
    _table(f"Q-shared (status counts {dict(q.status_counts)})", q)
    _table(f"Penalized Q-shared (status counts {dict(p.status_counts)})", p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
