from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qshared.config import bundled
from qshared.estimators import (
    FitConfig,
    FitStatus,
    SingularDesignError,
    StageFit,
    decision_rule,
    fit_problem,
    initial_values,
    ols_solve,
    penalized_q_shared_fit,
    policy,
    q_shared_fit,
    q_unshared_fit,
    ridge_solve,
)
from qshared.model import (
    ModelSpec,
    ParameterLayout,
    ParameterVector,
    SmartDataset,
    Trajectory,
    TreatmentCoding,
    build_problem,
)
from qshared.simulator import generate_smart

# ---------------------------------------------------------------------------
# one-shot solvers
# ---------------------------------------------------------------------------


def test_ols_identity_design():
    y = np.array([3.0, -1.0, 2.5])
    np.testing.assert_allclose(ols_solve(np.eye(3), y), y, atol=1e-14)


def test_ols_mean():
    np.testing.assert_allclose(ols_solve(np.ones((3, 1)), [1.0, 2.0, 3.0]), [2.0], atol=1e-14)


def test_ols_line_through_points():
    Z = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(ols_solve(Z, [0.0, 1.0, 2.0]), [0.0, 1.0], atol=1e-12)


def test_ridge_by_hand():
    np.testing.assert_allclose(ridge_solve(np.ones((2, 1)), [2.0, 2.0], 2.0), [1.0], atol=1e-14)


def test_ridge_shrinks_to_zero(rng):
    Z = rng.normal(size=(30, 4))
    y = rng.normal(size=30)
    assert np.linalg.norm(ridge_solve(Z, y, 1e9)) < 1e-3


def test_singular_design_raises():
    Z = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(SingularDesignError):
        ols_solve(Z, [1.0, 2.0, 3.0])
    # ridge still has a unique solution
    assert np.all(np.isfinite(ridge_solve(Z, [1.0, 2.0, 3.0], 0.5)))


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        ridge_solve(np.eye(2), [1.0, 1.0], -1.0)
    with pytest.raises(ValueError):
        FitConfig(lam=-1.0)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (12, 4), elements=st.floats(-10, 10)),
    arrays(np.float64, 12, elements=st.floats(-10, 10)),
)
def test_ridge_zero_equals_ols(Z, y):
    s = np.linalg.svd(Z, compute_uv=False)
    if s[-1] < 1e-3 * max(s[0], 1.0):
        return
    ref = np.linalg.lstsq(Z, y, rcond=None)[0]
    np.testing.assert_allclose(ridge_solve(Z, y, 0.0), ols_solve(Z, y), atol=1e-10)
    np.testing.assert_allclose(ols_solve(Z, y), ref, atol=1e-8 * (1 + np.abs(ref).max()))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (10, 3), elements=st.floats(-5, 5)),
    arrays(np.float64, 10, elements=st.floats(-5, 5)),
    st.floats(1e-3, 1e3),
)
def test_ridge_matches_normal_equations(Z, y, lam):
    direct = np.linalg.solve(Z.T @ Z + lam * np.eye(3), Z.T @ y)
    np.testing.assert_allclose(ridge_solve(Z, y, lam), direct, rtol=1e-8, atol=1e-10)


# ---------------------------------------------------------------------------
# iterative fits
# ---------------------------------------------------------------------------


def _single_stage_data(rng, n=50):
    O = rng.choice([-1.0, 1.0], n)
    A = rng.choice([-1.0, 1.0], n)
    Y = 0.3 + 0.5 * O + A * (0.2 - 0.4 * O) + rng.normal(size=n)
    return SmartDataset(O[:, None, None], A[:, None], np.zeros((n, 0)), Y[:, None], Y)


def test_single_stage_converges_in_one_iteration(rng):
    spec = ModelSpec.load(bundled("single_stage.yaml"))
    data = _single_stage_data(rng)
    Z = build_problem(data, spec).design
    res = q_shared_fit(data, spec)
    assert res.status is FitStatus.CONVERGED and res.iterations == 1
    np.testing.assert_allclose(res.theta_hat.values, ols_solve(Z, data.primary), atol=1e-12)
    pen = penalized_q_shared_fit(data, spec, cfg=FitConfig(lam=3.0))
    assert pen.iterations == 1
    np.testing.assert_allclose(pen.theta_hat.values, ridge_solve(Z, data.primary, 3.0), atol=1e-12)


def test_unshared_single_stage_is_one_regression(rng):
    spec = ModelSpec.load(bundled("single_stage.yaml"))
    data = _single_stage_data(rng)
    (fit,) = q_unshared_fit(data, spec)
    joint = ols_solve(build_problem(data, spec).design, data.primary)
    np.testing.assert_allclose(np.r_[fit.main_coef, fit.inter_coef], joint, atol=1e-12)


EXACT_SPEC = ModelSpec.from_dict(
    {
        "num_stages": 2,
        "shared": ["psi0", "psi1"],
        "stages": {
            1: {"main": ["1", "O1"], "interaction": {"psi0": "1", "psi1": "O1"}},
            2: {"main": ["1", "O1", "A1", "O1*A1", "O2"], "interaction": {"psi0": "1", "psi1": "O1"}},
        },
    }
)


def _exact_truth(psi0=0.3, psi1=-0.5, c0=1.0, c1=0.7):
    """Parameters for which the stacked system holds with zero residual.

    With beta2 = (c0, c1, psi0, psi1, 0) the stage-1 backup is
    c0 + c1 O1 + A1 (psi0 + psi1 O1) + |psi0 + psi1 O1|, and
    |psi0 + psi1 O1| = a + b O1 with a, b the half sum and half difference
    of |psi0 + psi1| and |psi0 - psi1|.
    """
    a = (abs(psi0 + psi1) + abs(psi0 - psi1)) / 2
    b = (abs(psi0 + psi1) - abs(psi0 - psi1)) / 2
    beta2 = [c0, c1, psi0, psi1, 0.0]
    beta1 = [c0 + a, c1 + b]
    return ParameterVector.from_values(EXACT_SPEC, beta2 + beta1 + [psi0, psi1])


def _exact_data(truth: ParameterVector) -> SmartDataset:
    trajs = []
    for i, (o1, a1, o2, a2) in enumerate(itertools.product([-1.0, 1.0], repeat=4)):
        for rep in range(2):
            h20 = np.array([1, o1, a1, o1 * a1, o2])
            y = float(h20 @ truth.beta(2) + a2 * (truth.psi[0] + truth.psi[1] * o1))
            trajs.append(
                Trajectory(
                    patient_id=f"{i}-{rep}",
                    covariates={1: (o1,), 2: (o2,)},
                    treatments={1: a1, 2: a2},
                    responders={1: 0},
                    stage_outcomes={1: y, 2: y},
                    primary_outcome=y,
                )
            )
    return SmartDataset.from_trajectories(trajs, num_stages=2)


def test_truth_is_a_fixed_point():
    truth = _exact_truth()
    data = _exact_data(truth)
    res = q_shared_fit(data, EXACT_SPEC, theta0=truth, cfg=FitConfig(max_iters=1))
    np.testing.assert_allclose(res.trace[1], truth.values, atol=1e-8)
    # and the iteration from zero lands on it
    res0 = q_shared_fit(data, EXACT_SPEC)
    assert res0.converged
    np.testing.assert_allclose(res0.theta_hat.values, truth.values, atol=1e-6)


def test_unshared_recovers_shared_truth():
    truth = _exact_truth(psi0=-0.2, psi1=0.6)
    fits = q_unshared_fit(_exact_data(truth), EXACT_SPEC)
    for fit in fits:
        np.testing.assert_allclose(fit.inter_coef, truth.psi, atol=1e-6)


def test_reference_setup_converges(spec3, ref_data):
    res = q_shared_fit(ref_data, spec3)
    assert res.status is FitStatus.CONVERGED
    assert res.iterations <= 50
    np.testing.assert_array_equal(res.trace[0], 0.0)
    assert res.trace.shape == (res.iterations + 1, res.theta_hat.layout.size)


def _lipschitz(problem) -> float:
    tmax = max(abs(problem.coding.t1), abs(problem.coding.t2))
    return np.linalg.norm(problem.next_main, 2) + tmax * np.linalg.norm(problem.next_contrast, 2)


@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_fixed_point_certificate(spec3, ref_data, lam):
    problem = build_problem(ref_data, spec3)
    cfg = FitConfig(epsilon=1e-8, lam=lam)
    res = fit_problem(problem, None, cfg, penalized=lam > 0)
    assert res.converged
    Z, theta = problem.design, res.theta_hat.values
    resid = Z.T @ problem.response(theta) - (Z.T @ Z + lam * np.eye(Z.shape[1])) @ theta
    # the last step moved theta by < epsilon, so Y* moved by at most L * epsilon
    tol = np.linalg.norm(Z, 2) * _lipschitz(problem) * cfg.epsilon
    assert np.abs(resid).max() < tol


def test_reduction_iterate_for_iterate(spec3, ref_data):
    a = q_shared_fit(ref_data, spec3)
    b = penalized_q_shared_fit(ref_data, spec3, cfg=FitConfig(lam=0.0))
    assert a.trace.shape == b.trace.shape
    np.testing.assert_allclose(a.trace, b.trace, rtol=0, atol=1e-10)


def test_large_lambda_shrinks(spec3, ref_data):
    res = penalized_q_shared_fit(ref_data, spec3, cfg=FitConfig(lam=1e9))
    assert res.converged and res.iterations <= 5
    assert np.abs(res.theta_hat.values).max() < 1e-3


def test_fit_is_deterministic(spec3, ex1_data):
    a = q_shared_fit(ex1_data, spec3)
    b = q_shared_fit(ex1_data, spec3)
    np.testing.assert_array_equal(a.trace, b.trace)
    assert a.status == b.status and a.hat_inf_norm == b.hat_inf_norm


def test_status_max_iters_and_diverged(spec3, ref_data):
    res = q_shared_fit(ref_data, spec3, cfg=FitConfig(max_iters=2))
    assert res.status is FitStatus.MAX_ITERS and res.iterations == 2
    res = q_shared_fit(ref_data, spec3, cfg=FitConfig(divergence_guard=1e-3))
    assert res.status is FitStatus.DIVERGED


def test_bad_theta0_shape(spec3, ref_data):
    with pytest.raises(ValueError):
        q_shared_fit(ref_data, spec3, theta0=np.zeros(3))


def test_report_is_json_ready(spec3, ref_data):
    import json

    rep = q_shared_fit(ref_data, spec3).report()
    assert json.loads(json.dumps(rep))["status"] == "Converged"


# ---------------------------------------------------------------------------
# initial values
# ---------------------------------------------------------------------------

ONE_SLOT = ModelSpec.from_dict(
    {
        "num_stages": 3,
        "shared": ["psi0"],
        "stages": {j: {"main": ["1"], "interaction": {"psi0": "1"}} for j in (1, 2, 3)},
    }
)


def _fits(est, var):
    return [
        StageFit(j, np.array([10.0 * j]), np.array([e]), ("psi0",), np.array([v]), 1.0, 10)
        for j, (e, v) in enumerate(zip(est, var), start=1)
    ]


@pytest.mark.parametrize("strategy, expected", [("sa", 2.0), ("max", 3.0), ("min", 1.0), ("zero", 0.0)])
def test_initial_value_strategies(strategy, expected):
    theta = initial_values(_fits([1.0, 2.0, 3.0], [1.0, 1.0, 1.0]), ONE_SLOT, strategy)
    assert theta.psi[0] == expected
    if strategy == "zero":
        assert not theta.values.any()
    else:
        assert theta.beta(2)[0] == 20.0


def test_ivwa_equal_weights_is_average():
    two = ModelSpec.from_dict(
        {
            "num_stages": 2,
            "shared": ["psi0"],
            "stages": {j: {"main": ["1"], "interaction": {"psi0": "1"}} for j in (1, 2)},
        }
    )
    assert initial_values(_fits([1.0, 3.0], [1.0, 1.0]), two, "IVWA").psi[0] == pytest.approx(2.0)
    assert initial_values(_fits([1.0, 3.0], [1.0, 3.0]), two, "ivwa").psi[0] == pytest.approx(1.5)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        initial_values(_fits([1.0], [1.0]), ONE_SLOT, "median")


def test_unshared_variances_positive(spec3, ref_data):
    for fit in q_unshared_fit(ref_data, spec3):
        assert np.all(fit.inter_var > 0)


# ---------------------------------------------------------------------------
# decision rules
# ---------------------------------------------------------------------------


def _one_stage_traj(o, a=1.0):
    return Trajectory(0, {1: (o,)}, {1: a}, {}, {1: 0.0}, 0.0)


@pytest.mark.parametrize("psi0, expected", [(0.4, 1.0), (-0.4, -1.0), (0.0, 1.0)])
def test_sign_rule(psi0, expected):
    spec = ModelSpec.load(bundled("single_stage.yaml"))
    theta = ParameterVector.from_values(spec, [0.0, 0.0, psi0, 0.0])
    assert decision_rule(theta, spec, TreatmentCoding(), _one_stage_traj(1.0), 1) == expected


def test_fitted_depression_rule_example():
    spec = ModelSpec.load(bundled("stard.yaml"))
    layout = ParameterLayout.from_spec(spec)
    values = np.zeros(layout.size)
    values[layout.psi.start : layout.psi.start + 3] = [-0.0298, 0.0052, -0.0700]
    traj = Trajectory(0, {1: (10.0, 1.0, 0.0)}, {1: 1.0}, {1: 1}, {1: 0.0}, 0.0)
    theta = ParameterVector(values, layout)
    assert decision_rule(theta, spec, TreatmentCoding(), traj, 1) == -1.0


@settings(max_examples=30, deadline=None)
@given(
    psi=arrays(np.float64, 4, elements=st.floats(-2, 2)),
    scale=st.floats(1e-3, 1e3),
)
def test_argmax_invariant_to_positive_scaling(psi, scale, spec3, ref_data):
    layout = ParameterLayout.from_spec(spec3)
    base = np.zeros(layout.size)
    base[layout.psi] = psi
    scaled = base.copy()
    scaled[layout.psi] = psi * scale
    for j in (1, 2, 3):
        d0 = policy(ParameterVector(base, layout), spec3, ref_data.coding)(ref_data, j)
        d1 = policy(ParameterVector(scaled, layout), spec3, ref_data.coding)(ref_data, j)
        np.testing.assert_array_equal(d0, d1)


def test_policy_matches_decision_rule(spec3, ref_data):
    theta = q_shared_fit(ref_data, spec3).theta_hat
    trajs = ref_data.trajectories()
    for j in (1, 2, 3):
        rows = np.flatnonzero(ref_data.present(j))
        vec = policy(theta, spec3, ref_data.coding)(ref_data, j)
        for r, i in enumerate(rows[:30]):
            assert vec[r] == decision_rule(theta, spec3, ref_data.coding, trajs[i], j)


def test_generated_data_fits_with_other_codings(spec3, reference):
    data = generate_smart(reference, n=200, seed=5)
    assert q_shared_fit(data, spec3).converged
