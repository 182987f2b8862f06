"""
hdquantile numerical test suite
===============================
Phases: conditional model, lasso, QP backend, debiasing weights, estimator.
Runs under pytest, or directly: python test_suite.py
"""

import contextlib
import math
import os
import sys
import traceback
from decimal import Decimal

import numpy as np
from scipy import optimize, special, stats

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.core.config import RunConfig, settings
from app.core.estimator import (adjusted_solve, confidence_interval, contrast, estimate,
                                pilot_quantile, variance_estimate)
from app.core.lasso import (_cd_quadratic, _select, cross_validate_lambda, cross_validation_curve,
                            default_lambda_grid, fit_lasso, fit_lasso_cv, fit_logistic_lasso,
                            fold_ids, lambda_max, logistic_lambda_max, logistic_probabilities)
from app.core.model import NormalLinearModel, get_conditional_model
from app.core.normalizer import Dataset
from app.core.resilience import (InfeasibleWeightsError, InputError, ModelInputError,
                                 StageError, VarianceError, escalate_to)
from app.core.weights import (BalanceProblem, OsqpProgram, compute_weights, delta_schedule,
                              inverse_tau_weights, min_imbalance, select_zeta, solve_qp,
                              solve_weights_capped, solve_weights_dual, solve_weights_primal,
                              zeta_criterion)

results = []


def log_result(phase, test, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    results.append({"phase": phase, "test": test, "status": status, "detail": detail})
    icon = "\033[92m[PASS]\033[0m" if passed else "\033[91m[FAIL]\033[0m"
    print(f"  {icon} {test}")
    if detail and not passed:
        for line in str(detail).split("\n")[:3]:
            print(f"        {line}")


@contextlib.contextmanager
def _override(**values):
    saved = {k: getattr(settings, k) for k in values}
    for k, v in values.items():
        setattr(settings, k, v)
    try:
        yield
    finally:
        for k, v in saved.items():
            setattr(settings, k, v)


def _normal_data(n, p, seed, observe=0.7, signal=(0.5, -0.25), center=True):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    beta = np.zeros(p)
    beta[:len(signal)] = signal[:p]
    y = x @ beta + rng.standard_normal(n)
    delta = (rng.random(n) < observe).astype(int)
    delta[:2] = 1
    return Dataset.from_arrays(x, np.where(delta == 1, y, np.nan), delta, center=center)


def _random_balance_problem(rng, quantile=0.3):
    """Small instance whose cap leaves a known set of feasible weight vectors."""
    n1 = int(rng.integers(3, 13))
    p = int(rng.integers(1, 5))
    tau = rng.uniform(0.05, 0.25, n1)
    b = rng.normal(size=(n1, p))
    a = b.mean(axis=0) + rng.normal(scale=0.3, size=p)
    candidates = rng.dirichlet(np.ones(n1), 400)
    imbalance = np.max(np.abs(a[None, :] - candidates @ b), axis=1)
    cap = float(np.quantile(imbalance, quantile))
    prob = BalanceProblem.from_arrays(tau, b, a, cap, n=2 * n1)
    return prob, candidates[imbalance <= cap]


# ---------------------------------------------------------------------------
# Phase 1: conditional model
# ---------------------------------------------------------------------------

def test_normal_model_matches_scipy():
    model = NormalLinearModel(response_scale=1.5)
    rng = np.random.default_rng(1)
    y, u = rng.normal(scale=3, size=200), rng.normal(scale=3, size=200)
    np.testing.assert_allclose(model.cdf(y, u), stats.norm.cdf(y, loc=u, scale=1.5),
                               rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(model.density(y, u), stats.norm.pdf(y, loc=u, scale=1.5),
                               rtol=1e-12, atol=1e-15)
    assert abs(model.neg_log_density(0.0, 0.0) - (math.log(1.5) + 0.5 * math.log(2 * math.pi))) < 1e-12


def test_cdf_index_derivative_matches_finite_differences():
    model = get_conditional_model("normal")
    rng = np.random.default_rng(2)
    y, u = rng.uniform(-4, 4, 1000), rng.uniform(-4, 4, 1000)
    eps = 1e-5
    numeric = (model.cdf(y, u + eps) - model.cdf(y, u - eps)) / (2 * eps)
    assert np.max(np.abs(numeric - model.cdf_index_deriv(y, u))) <= 1e-6


def test_model_rejects_bad_inputs():
    model = NormalLinearModel()
    for bad in ((float("nan"), 0.0), (0.0, float("inf"))):
        try:
            model.cdf(*bad)
            raise AssertionError("non-finite input accepted")
        except ModelInputError:
            pass
    try:
        model.neg_log_density(0.0, 100.0)
        raise AssertionError("underflowing density accepted")
    except ModelInputError:
        pass
    try:
        get_conditional_model("cauchy")
        raise AssertionError("unknown model accepted")
    except ModelInputError:
        pass


# ---------------------------------------------------------------------------
# Phase 2: lasso
# ---------------------------------------------------------------------------

def test_lasso_soft_thresholds_on_orthonormal_design():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.normal(size=(40, 5)))
    y = q @ np.array([2.0, -1.0, 0.3, 0.0, 0.0]) + 0.1 * rng.normal(size=40)
    data = Dataset.from_arrays(q, y, center=False)
    score = q.T @ y
    lam = 0.5 * float(np.max(np.abs(score)))
    fit = fit_lasso(data, NormalLinearModel(), lam)
    expected = np.sign(score) * np.maximum(np.abs(score) - lam, 0.0)
    np.testing.assert_allclose(fit.beta, expected, atol=1e-8)
    assert fit.converged


def test_lasso_kkt_conditions():
    data = _normal_data(80, 12, seed=4)
    lam = 0.2 * lambda_max(data, NormalLinearModel())
    fit = fit_lasso(data, NormalLinearModel(), lam)
    grad = data.x_observed.T @ (data.x_observed @ fit.beta - data.y_observed)
    active = fit.beta != 0
    assert np.all(np.abs(grad[~active]) <= lam + 1e-5)
    np.testing.assert_allclose(grad[active], -lam * np.sign(fit.beta[active]), atol=1e-5)


def test_lambda_max_zeroes_the_fit():
    data = _normal_data(60, 6, seed=5)
    lam = lambda_max(data, NormalLinearModel())
    assert np.all(fit_lasso(data, NormalLinearModel(), lam * 1.0001).beta == 0.0)
    assert np.any(fit_lasso(data, NormalLinearModel(), lam * 0.9).beta != 0.0)


def test_lasso_rejects_nonpositive_lambda():
    data = _normal_data(20, 3, seed=6)
    try:
        fit_lasso(data, NormalLinearModel(), 0.0)
        raise AssertionError("lambda = 0 accepted")
    except InputError:
        pass


def test_fold_ids_are_seeded_and_balanced():
    a, b = fold_ids(103, 10, seed=7), fold_ids(103, 10, seed=7)
    assert np.array_equal(a, b)
    counts = np.bincount(a, minlength=10)
    assert counts.max() - counts.min() <= 1
    assert not np.array_equal(a, fold_ids(103, 10, seed=8))


def test_cv_prefers_larger_lambda_on_ties():
    assert _select([3.0, 2.0, 1.0], np.array([0.5, 0.5, 0.7])) == 3.0
    assert _select([3.0, 2.0, 1.0], np.array([0.9, 0.5, 0.7])) == 2.0


def test_cross_validation_curve_is_deterministic():
    data = _normal_data(60, 8, seed=9)
    first = cross_validation_curve(data, NormalLinearModel(), folds=5, seed=3)
    second = cross_validation_curve(data, NormalLinearModel(), folds=5, seed=3)
    assert first.selected == second.selected
    assert first.selected in first.grid
    assert len(first.mean_loss) == len(first.grid) == settings.lambda_grid_size
    assert cross_validate_lambda(data, NormalLinearModel(), first.grid, 5, 3) == first.selected


def test_logistic_lasso_kkt_and_constant_outcome():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(150, 6))
    delta = (rng.random(150) < 1 / (1 + np.exp(-(0.5 + x[:, 0])))).astype(int)
    data = Dataset.from_arrays(x, np.where(delta == 1, 0.0, np.nan), delta)
    lam = 0.3 * logistic_lambda_max(data)
    fit = fit_logistic_lasso(data, lam)
    assert fit.converged and not fit.separation
    probs = logistic_probabilities(fit, data.x)
    grad = np.hstack([np.ones((150, 1)), data.x]).T @ (probs - delta)
    assert abs(grad[0]) <= 1e-3
    zero = fit.beta == 0
    assert np.all(np.abs(grad[1:][zero]) <= lam + 1e-3)
    assert fit.beta[0] > 0.0

    flat = fit_logistic_lasso(data, 1e6)
    assert np.all(flat.beta == 0.0)
    assert abs(flat.intercept - special.logit(delta.mean())) <= 1e-4

    full = Dataset.from_arrays(x, np.zeros(150))
    constant = fit_logistic_lasso(full, 1.0)
    assert constant.separation and np.all(constant.beta == 0.0)
    assert np.all(logistic_probabilities(constant, full.x) >= 1 - 1e-6)


def test_lasso_matches_brute_force_grid():
    rng = np.random.default_rng(28)
    x = rng.normal(size=(10, 2))
    y = x @ np.array([1.0, -0.5]) + 0.3 * rng.normal(size=10)
    data = Dataset.from_arrays(x, y)
    lam = 1.5
    fit = fit_lasso(data, NormalLinearModel(), lam)

    def objective(points):
        resid = data.y[None, :] - points @ data.x.T
        return 0.5 * np.sum(resid ** 2, axis=1) + lam * np.sum(np.abs(points), axis=1)

    coarse = np.arange(-3.0, 3.0 + 5e-3, 1e-2)
    b1, b2 = np.meshgrid(coarse, coarse, indexing="ij")
    points = np.column_stack([b1.ravel(), b2.ravel()])
    centre = points[np.argmin(objective(points))]
    fine = np.arange(-0.02, 0.02 + 5e-4, 1e-3)
    f1, f2 = np.meshgrid(centre[0] + fine, centre[1] + fine, indexing="ij")
    points = np.column_stack([f1.ravel(), f2.ravel()])
    best = points[np.argmin(objective(points))]
    assert np.all(np.abs(fit.beta - best) <= 2e-3), (fit.beta, best)


def test_lasso_permutation_equivariance():
    data = _normal_data(70, 8, seed=29)
    perm = np.random.default_rng(29).permutation(8)
    shuffled = Dataset.from_arrays(data.x[:, perm], data.y, data.delta, center=False)
    model = NormalLinearModel()
    lam = 0.3 * lambda_max(data, model)
    np.testing.assert_allclose(fit_lasso(shuffled, model, lam).beta,
                               fit_lasso(data, model, lam).beta[perm], atol=1e-7)


def test_lasso_path_l1_norm_is_monotone():
    data = _normal_data(80, 10, seed=30)
    model = NormalLinearModel()
    grid = sorted(default_lambda_grid(lambda_max(data, model), size=30))
    norms = [float(np.sum(np.abs(fit_lasso(data, model, lam).beta))) for lam in grid]
    assert all(later <= earlier + 1e-8 for earlier, later in zip(norms, norms[1:]))
    assert np.all(fit_lasso(data, model, 1e6).beta == 0.0)


def test_coordinate_descent_objective_never_increases():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(50, 12))
    x[:, 1] = x[:, 0] + 0.1 * rng.normal(size=50)
    y = x[:, 0] - x[:, 1] + rng.normal(size=50)
    hess, lin = x.T @ x, -x.T @ y
    penalty = np.full(12, 2.0)

    def objective(theta):
        return 0.5 * theta @ hess @ theta + lin @ theta + penalty @ np.abs(theta)

    values = []
    for sweeps in range(1, 40):
        theta, _, _, _ = _cd_quadratic(hess, lin, penalty, np.zeros(12), 0.0, 0.0, sweeps)
        values.append(objective(theta))
    assert values[0] < 0.0
    assert all(b <= a + 1e-9 * abs(a) for a, b in zip(values, values[1:]))


def test_cv_on_pure_noise_picks_the_largest_lambda():
    grid = list(np.logspace(-3, 3, 25))
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        x = rng.normal(size=(100, 10))
        data = Dataset.from_arrays(x, rng.standard_normal(100))
        hits += cross_validate_lambda(data, NormalLinearModel(), grid, 10, seed) == max(grid)
    assert hits >= 45, hits


def test_cv_recovers_strong_single_signal():
    rng = np.random.default_rng(32)
    x = rng.normal(size=(200, 20))
    y = 2.0 * x[:, 0] + 0.5 * rng.standard_normal(200)
    fit = fit_lasso_cv(Dataset.from_arrays(x, y), NormalLinearModel(), folds=10, seed=4)
    assert abs(fit.beta[0] - 2.0) <= 0.3
    assert np.sum(np.abs(fit.beta[1:])) <= 0.3
    assert fit.cv_curve is not None and fit.lambda_ in [g for g, _ in fit.cv_curve]


def test_cv_minimum_rule_is_available():
    data = _normal_data(60, 8, seed=33)
    with _override(cv_rule="min"):
        curve = cross_validation_curve(data, NormalLinearModel(), folds=5, seed=3)
    assert not curve.std_error
    assert curve.mean_loss[curve.grid.index(curve.selected)] == min(curve.mean_loss)
    one_se = cross_validation_curve(data, NormalLinearModel(), folds=5, seed=3)
    assert len(one_se.std_error) == len(one_se.grid)
    assert one_se.selected >= curve.selected
    assert _select([3.0, 2.0, 1.0], np.array([0.55, 0.5, 0.7]), np.array([0.1, 0.1, 0.1])) == 3.0



# ---------------------------------------------------------------------------
# Phase 3: QP backend
# ---------------------------------------------------------------------------

def _slsqp(P, q, A, l, u, x0):
    cons = []
    for row, lo, hi in zip(A, l, u):
        if lo == hi:
            cons.append({"type": "eq", "fun": lambda x, r=row, v=lo: r @ x - v})
            continue
        if np.isfinite(lo):
            cons.append({"type": "ineq", "fun": lambda x, r=row, v=lo: r @ x - v})
        if np.isfinite(hi):
            cons.append({"type": "ineq", "fun": lambda x, r=row, v=hi: v - r @ x})
    res = optimize.minimize(lambda x: 0.5 * x @ P @ x + q @ x, x0, jac=lambda x: P @ x + q,
                            constraints=cons, method="SLSQP",
                            options={"ftol": 1e-14, "maxiter": 1000})
    return res.x


def test_qp_matches_slsqp_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        m = rng.normal(size=(6, 6))
        P = m @ m.T + np.eye(6)
        q = rng.normal(size=6)
        A = np.vstack([np.ones(6), rng.normal(size=(4, 6))])
        l = np.concatenate([[0.5], np.full(4, -1.0)])
        u = np.concatenate([[0.5], np.full(4, 1.0)])
        res = solve_qp(P, q, A, l, u)
        assert res.solved
        oracle = _slsqp(P, q, A, l, u, np.full(6, 0.5 / 6))
        f = lambda x: 0.5 * x @ P @ x + q @ x
        assert abs(f(res.x) - f(oracle)) <= 1e-6
        assert max(res.kkt.values()) <= settings.qp_kkt_tol


def test_qp_warm_start_from_solution():
    rng = np.random.default_rng(12)
    m = rng.normal(size=(5, 5))
    P = m @ m.T + np.eye(5)
    q = rng.normal(size=5) * 3
    A = np.eye(5)
    l, u = np.full(5, -0.2), np.full(5, 0.2)
    cold = solve_qp(P, q, A, l, u)
    warm = solve_qp(P, q, A, l, u, warm_start=(cold.x, cold.y))
    assert warm.solved and warm.iterations <= cold.iterations
    np.testing.assert_allclose(warm.x, cold.x, atol=1e-7)


def test_qp_diagonal_update_matches_fresh_setup():
    rng = np.random.default_rng(27)
    A = np.vstack([np.ones(6), rng.normal(size=(3, 6))])
    l = np.concatenate([[1.0], np.full(3, -0.1)])
    u = np.concatenate([[1.0], np.full(3, 0.1)])
    program = OsqpProgram(np.diag(rng.uniform(0.5, 2.0, 6)), np.zeros(6), A, l, u)
    program.solve()
    for _ in range(3):
        diag = rng.uniform(0.5, 2.0, 6)
        program.update_diagonal(diag)
        updated = program.solve()
        fresh = solve_qp(np.diag(diag), np.zeros(6), A, l, u)
        assert updated.solved and fresh.solved
        np.testing.assert_allclose(updated.x, fresh.x, atol=1e-6)
        np.testing.assert_allclose(updated.y, fresh.y, atol=1e-5)


# ---------------------------------------------------------------------------
# Phase 4: debiasing weights
# ---------------------------------------------------------------------------

def test_delta_schedule_formula_and_errors():
    expected = 256 ** (-5 / 16) * math.log(2981) ** (1 / 8)
    assert abs(delta_schedule(256, 2981, 1.0) - expected) < 1e-14
    assert abs(delta_schedule(256, 2981, 1.0) - 0.22925) < 1e-4
    for args in ((256, 1, 1.0), (256, 10, 0.0), (1, 10, 1.0)):
        try:
            delta_schedule(*args)
            raise AssertionError(f"accepted {args}")
        except InputError:
            pass


def test_vacuous_balance_gives_inverse_tau_weights():
    rng = np.random.default_rng(13)
    tau = rng.uniform(0.05, 0.25, 8)
    prob = BalanceProblem.from_arrays(tau, np.zeros((8, 2)), np.array([0.1, -0.2]), 0.5, n=16)
    zeta, solutions = select_zeta(prob)
    assert zeta == 0.0
    expected = (1 / tau) / np.sum(1 / tau)
    np.testing.assert_allclose(solutions[0.0].w, expected, atol=1e-6)
    np.testing.assert_allclose(solve_weights_capped(prob).w, expected, atol=1e-6)
    np.testing.assert_allclose(solve_weights_dual(prob).w, expected, atol=1e-6)


def test_zeta_selection_maximises_the_criterion():
    prob, _ = _random_balance_problem(np.random.default_rng(14))
    zeta, solutions = select_zeta(prob)
    values = {z: zeta_criterion(s, prob.delta_cap) for z, s in solutions.items()}
    best = max(values.values())
    assert values[zeta] == best
    assert zeta == min(z for z, v in values.items() if v == best)


def test_primal_solution_respects_constraints():
    prob, _ = _random_balance_problem(np.random.default_rng(15))
    for zeta in (0.0, 0.3, 0.9):
        sol = solve_weights_primal(prob, zeta)
        assert sol.sum_residual <= 1e-8
        if zeta > 0:
            assert sol.constraint_residual <= sol.gamma + 1e-6
    try:
        solve_weights_primal(prob, 1.0)
        raise AssertionError("zeta = 1 accepted")
    except InputError:
        pass


def test_capped_weights_beat_every_feasible_point():
    rng = np.random.default_rng(16)
    for _ in range(100):
        prob, feasible = _random_balance_problem(rng)
        sol = solve_weights_capped(prob)
        assert sol.sum_residual <= 1e-8
        assert sol.constraint_residual <= prob.delta_cap + 1e-6
        objectives = np.sum(feasible ** 2 * prob.tau[None, :], axis=1)
        assert sol.objective <= objectives.min() + 1e-8


def test_primal_and_dual_weights_agree():
    rng = np.random.default_rng(17)
    for _ in range(50):
        prob, _ = _random_balance_problem(rng)
        primal = solve_weights_capped(prob)
        dual = solve_weights_dual(prob)
        assert abs(primal.objective - dual.objective) <= 1e-5
        assert np.max(np.abs(primal.w - dual.w)) <= 1e-4


def test_dual_with_empty_design_is_inverse_tau():
    tau = np.array([0.1, 0.2, 0.25])
    prob = BalanceProblem.from_arrays(tau, np.zeros((3, 0)), np.zeros(0), 0.1, n=5)
    sol = solve_weights_dual(prob)
    np.testing.assert_allclose(sol.w, inverse_tau_weights(prob), atol=1e-10)
    assert sol.eta.shape == (1,)


def test_min_imbalance_is_attainable():
    prob, _ = _random_balance_problem(np.random.default_rng(18))
    floor = min_imbalance(prob)
    assert floor <= prob.imbalance(inverse_tau_weights(prob)) + 1e-12
    sol = solve_weights_capped(prob.with_cap(floor * 1.001 + 1e-9))
    assert sol.constraint_residual <= floor * 1.001 + 1e-6


def test_compute_weights_on_data():
    data = _normal_data(60, 5, seed=19)
    model = NormalLinearModel()
    beta = np.array([0.4, -0.2, 0.0, 0.0, 0.0])
    q_pilot = pilot_quantile(data, model, beta, 0.5)
    sol = compute_weights(data, model, beta, q_pilot, c0=0.1)
    assert sol.sum_residual <= 1e-8
    assert sol.constraint_residual <= sol.delta_cap + 1e-6
    assert sol.c_used >= 0.1 and not sol.failed_zetas
    assert len(sol.criterion_curve) == 100
    dual = compute_weights(data, model, beta, q_pilot, c0=0.1, route="dual")
    assert dual.c_used == sol.c_used
    assert abs(dual.objective - sol.objective) <= 1e-5


def test_infeasible_balance_is_reported():
    rng = np.random.default_rng(20)
    x = rng.normal(size=(30, 5))
    delta = np.zeros(30, dtype=int)
    delta[:2] = 1
    data = Dataset.from_arrays(x, np.where(delta == 1, 0.0, np.nan), delta)
    with _override(c_max=0.01):
        try:
            compute_weights(data, NormalLinearModel(), np.zeros(5), 0.0, c0=0.01)
            raise AssertionError("infeasible balance accepted")
        except InfeasibleWeightsError as e:
            assert e.min_imbalance > 0 and e.exit_code == 2


def test_dual_agrees_with_primal_at_recovered_zeta():
    rng = np.random.default_rng(34)
    compared = 0
    for _ in range(30):
        prob, _ = _random_balance_problem(rng)
        capped = solve_weights_capped(prob)
        if capped.zeta <= 0.0:
            continue
        primal = solve_weights_primal(prob, capped.zeta)
        dual = solve_weights_dual(prob)
        assert abs(primal.objective - dual.objective) <= 1e-5
        assert np.max(np.abs(primal.w - dual.w)) <= 1e-4
        compared += 1
    assert compared >= 10
    for seed in (35, 36, 37):
        data = _normal_data(70, 6, seed=seed)
        beta = np.array([0.4, -0.2, 0.0, 0.0, 0.0, 0.0])
        q_pilot = pilot_quantile(data, NormalLinearModel(), beta, 0.5)
        grid_route = compute_weights(data, NormalLinearModel(), beta, q_pilot, c0=0.1)
        dual_route = compute_weights(data, NormalLinearModel(), beta, q_pilot, c0=0.1,
                                     route="dual")
        assert abs(grid_route.objective - dual_route.objective) <= 1e-5
        assert np.max(np.abs(grid_route.w - dual_route.w)) <= 1e-4


def test_weight_objective_monotone_in_cap():
    rng = np.random.default_rng(38)
    for _ in range(20):
        prob, _ = _random_balance_problem(rng)
        floor = min_imbalance(prob)
        caps = floor + (prob.delta_cap + 0.5 - floor) * np.linspace(0.05, 1.0, 6)
        objectives = [solve_weights_capped(prob.with_cap(c)).objective for c in caps]
        assert all(b <= a + 1e-8 for a, b in zip(objectives, objectives[1:]))


def test_scaling_tau_leaves_weights_unchanged():
    rng = np.random.default_rng(39)
    prob, _ = _random_balance_problem(rng)
    scaled = prob.model_copy(update={"tau": 0.5 * prob.tau})
    np.testing.assert_allclose(solve_weights_primal(scaled, 0.0).w,
                               solve_weights_primal(prob, 0.0).w, rtol=0, atol=1e-14)
    np.testing.assert_allclose(solve_weights_capped(scaled).w, solve_weights_capped(prob).w,
                               atol=1e-6)


def test_escalation_jumps_to_first_feasible_constant():
    for start, needed in ((0.1, 0.05), (0.1, 0.1), (0.1, 0.1234), (0.1, 4.999), (0.37, 1.0)):
        walked = next(float(c) for c in
                      (Decimal(str(start)) + k * Decimal("0.01") for k in range(10000))
                      if float(c) >= needed)
        assert escalate_to(start, 0.01, 5.0, needed) == walked
    assert escalate_to(0.1, 0.01, 5.0, 5.0001) is None
    assert escalate_to(6.0, 0.01, 5.0, 2.0) == 6.0


def test_start_above_ceiling_is_still_tried():
    data = _normal_data(60, 5, seed=19)
    beta = np.array([0.4, -0.2, 0.0, 0.0, 0.0])
    q_pilot = pilot_quantile(data, NormalLinearModel(), beta, 0.5)
    with _override(c_max=0.05):
        sol = compute_weights(data, NormalLinearModel(), beta, q_pilot, c0=3.0)
    assert sol.c_used == 3.0
    assert sol.constraint_residual <= sol.delta_cap + 1e-6


# ---------------------------------------------------------------------------
# Phase 5: estimator
# ---------------------------------------------------------------------------

def test_pilot_quantile_oracles():
    model = NormalLinearModel()
    data = Dataset.from_arrays(np.zeros((10, 1)), np.linspace(-1, 1, 10), center=False)
    assert abs(pilot_quantile(data, model, np.zeros(1), 0.5)) < 1e-10
    assert abs(pilot_quantile(data, model, np.zeros(1), 0.975) - stats.norm.ppf(0.975)) < 1e-5
    mixed = Dataset.from_arrays(np.array([[-1.0], [1.0]] * 5), np.linspace(-1, 1, 10),
                                center=False)
    assert abs(pilot_quantile(mixed, model, np.ones(1), 0.5)) < 1e-10


def test_adjusted_solve_cancellation_identity():
    rng = np.random.default_rng(21)
    data = Dataset.from_arrays(rng.normal(size=(4, 2)), np.array([3.0, 1.0, 4.0, 2.0]))
    q_hat = adjusted_solve(data, NormalLinearModel(), np.array([0.3, -0.1]),
                           np.full(4, 0.25), 0.5)
    assert q_hat == 2.0


def test_adjusted_solve_is_global_minimum_on_dense_grid():
    rng = np.random.default_rng(22)
    model = NormalLinearModel()
    for _ in range(5):
        x = rng.normal(size=(6, 2))
        y = rng.normal(size=6)
        delta = np.array([1, 1, 0, 1, 0, 1])
        data = Dataset.from_arrays(x, np.where(delta == 1, y, np.nan), delta)
        beta = rng.normal(size=2)
        w = rng.dirichlet(np.ones(4))
        q_hat, residual = adjusted_solve(data, model, beta, w, 0.5, return_residual=True)
        grid = np.arange(data.y_observed.min() - 3, data.y_observed.max() + 3, 1e-4)
        u = data.x @ beta
        smooth = (model.cdf(grid[:, None], u[None, :]).mean(axis=1)
                  - model.cdf(grid[:, None], u[data.observed][None, :]) @ w)
        jumps = (data.y_observed[None, :] <= grid[:, None]).astype(float) @ w
        g = np.abs(smooth + jumps - 0.5)
        assert residual <= g.min() + 1e-9
        assert abs(q_hat - grid[np.argmin(g)]) <= 1e-3 or residual <= 1e-9


def test_adjusted_solve_beats_dense_grid_with_signed_weights():
    rng = np.random.default_rng(40)
    model = NormalLinearModel()
    for _ in range(60):
        n = int(rng.integers(4, 41))
        p = int(rng.integers(1, 4))
        x = rng.normal(size=(n, p))
        y = rng.normal(size=n)
        delta = (rng.random(n) < 0.6).astype(int)
        delta[:2] = 1
        data = Dataset.from_arrays(x, np.where(delta == 1, y, np.nan), delta)
        beta = rng.normal(scale=0.7, size=p)
        n1 = data.n_observed
        w = rng.normal(scale=1.5 / n1, size=n1)
        w += (1.0 - w.sum()) / n1
        tau_level = float(rng.uniform(0.1, 0.9))
        q_hat, residual = adjusted_solve(data, model, beta, w, tau_level, return_residual=True)
        u = data.x @ beta
        grid = np.union1d(np.arange(data.y_observed.min() - 4, data.y_observed.max() + 4, 1e-4),
                          data.y_observed)
        smooth = (model.cdf(grid[:, None], u[None, :]).mean(axis=1)
                  - model.cdf(grid[:, None], u[data.observed][None, :]) @ w)
        jumps = (data.y_observed[None, :] <= grid[:, None]).astype(float) @ w
        g = np.abs(smooth + jumps - tau_level)
        assert residual <= g.min() + 1e-9, (residual, g.min())


def test_variance_hand_instance():
    data = Dataset.from_arrays(np.zeros((3, 1)), np.array([0.1, -0.2, np.nan]),
                               np.array([1, 1, 0]), center=False)
    sigma2, t_hat, v1, v2 = variance_estimate(data, NormalLinearModel(), np.zeros(1), 0.0,
                                              np.array([0.5, 0.5]))
    assert abs(t_hat - 0.398942) < 1e-6
    assert abs(v1 - 0.375) < 1e-12 and v2 == 0.0
    assert abs(sigma2 - 2.356) < 1e-3
    assert abs(sigma2 * t_hat ** 2 - (v1 + v2)) <= 1e-12
    try:
        variance_estimate(data, NormalLinearModel(), np.zeros(1), 100.0, np.array([0.5, 0.5]))
        raise AssertionError("vanishing density accepted")
    except VarianceError:
        pass


def test_confidence_interval_oracles():
    assert confidence_interval(1.5, 0.0, 10) == (1.5, 1.5)
    lo, hi = confidence_interval(0.0, 1.0, 100, 0.05)
    assert abs(hi - 0.195996) < 1e-5 and abs(lo + 0.195996) < 1e-5
    ratio = (np.subtract(*confidence_interval(0, 1, 100, 0.5)[::-1])
             / np.subtract(*confidence_interval(0, 1, 100, 0.05)[::-1]))
    assert abs(ratio - 0.674490 / 1.959964) < 1e-5


def test_estimate_complete_data_near_sample_median():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(50, 1))
    y = rng.standard_normal(50)
    data = Dataset.from_arrays(x, y)
    config = RunConfig(seed=1)
    est = estimate(data, NormalLinearModel(), config)
    assert abs(est.q_hat - np.median(y)) <= 0.5
    assert est.ci_lower <= est.q_hat <= est.ci_upper
    assert abs(est.sigma2_hat * est.t_hat ** 2 - (est.v1_hat + est.v2_hat)) <= 1e-12 * max(1.0, est.v1_hat)
    again = estimate(data, NormalLinearModel(), config)
    assert again.model_dump(exclude={"weights"}) == est.model_dump(exclude={"weights"})
    assert np.array_equal(again.weights.w, est.weights.w)


def test_estimate_standardized_response_is_equivariant():
    data = _normal_data(60, 4, seed=24)
    shifted = Dataset.from_arrays(data.x, 10.0 * data.y + 5.0, data.delta, center=False)
    config = RunConfig(standardize_response=True)
    base = estimate(data, NormalLinearModel(1.0), config)
    scaled = estimate(shifted, NormalLinearModel(10.0), config)
    assert abs(scaled.q_hat - (10.0 * base.q_hat + 5.0)) <= 1e-8
    assert abs(scaled.sigma2_hat - 100.0 * base.sigma2_hat) <= 1e-8 * max(1.0, scaled.sigma2_hat)


def test_estimate_labels_failing_stage():
    # ten observed units cannot balance twenty covariates under a tiny cap
    rng = np.random.default_rng(25)
    x = rng.normal(size=(60, 20))
    delta = np.zeros(60, dtype=int)
    delta[:10] = 1
    data = Dataset.from_arrays(x, np.where(delta == 1, rng.normal(size=60), np.nan), delta)
    with _override(c_max=0.01):
        try:
            estimate(data, NormalLinearModel(), RunConfig(c0=0.01, cv_folds=2))
            raise AssertionError("infeasible run succeeded")
        except StageError as e:
            assert e.stage == "weights"
            assert e.exit_code == 2
            assert "q_pilot" in e.diagnostics and "lambda" in e.diagnostics


def test_contrast_of_identical_groups_is_zero():
    data = _normal_data(50, 3, seed=26)
    result = contrast(data, data, NormalLinearModel(), RunConfig())
    assert result.m_hat == 0.0
    assert abs(result.ci_lower + result.ci_upper) <= 1e-12
    est0, est1 = result.group_estimates
    half = stats.norm.ppf(0.975) * math.sqrt(est0.sigma2_hat / est0.n + est1.sigma2_hat / est1.n)
    assert abs((result.ci_upper - result.ci_lower) - 2 * half) <= 1e-10


PHASES = [
    ("P1", "Conditional model", [test_normal_model_matches_scipy,
                                 test_cdf_index_derivative_matches_finite_differences,
                                 test_model_rejects_bad_inputs]),
    ("P2", "Lasso", [test_lasso_soft_thresholds_on_orthonormal_design, test_lasso_kkt_conditions,
                     test_lambda_max_zeroes_the_fit, test_lasso_rejects_nonpositive_lambda,
                     test_fold_ids_are_seeded_and_balanced, test_cv_prefers_larger_lambda_on_ties,
                     test_cross_validation_curve_is_deterministic,
                     test_logistic_lasso_kkt_and_constant_outcome,
                     test_lasso_matches_brute_force_grid, test_lasso_permutation_equivariance,
                     test_lasso_path_l1_norm_is_monotone,
                     test_coordinate_descent_objective_never_increases,
                     test_cv_on_pure_noise_picks_the_largest_lambda,
                     test_cv_recovers_strong_single_signal, test_cv_minimum_rule_is_available]),
    ("P3", "QP backend", [test_qp_matches_slsqp_oracle, test_qp_warm_start_from_solution,
                          test_qp_diagonal_update_matches_fresh_setup]),
    ("P4", "Debiasing weights", [test_delta_schedule_formula_and_errors,
                                 test_vacuous_balance_gives_inverse_tau_weights,
                                 test_zeta_selection_maximises_the_criterion,
                                 test_primal_solution_respects_constraints,
                                 test_capped_weights_beat_every_feasible_point,
                                 test_primal_and_dual_weights_agree,
                                 test_dual_with_empty_design_is_inverse_tau,
                                 test_min_imbalance_is_attainable, test_compute_weights_on_data,
                                 test_infeasible_balance_is_reported,
                                 test_dual_agrees_with_primal_at_recovered_zeta,
                                 test_weight_objective_monotone_in_cap,
                                 test_scaling_tau_leaves_weights_unchanged,
                                 test_escalation_jumps_to_first_feasible_constant,
                                 test_start_above_ceiling_is_still_tried]),
    ("P5", "Estimator", [test_pilot_quantile_oracles, test_adjusted_solve_cancellation_identity,
                         test_adjusted_solve_is_global_minimum_on_dense_grid,
                         test_adjusted_solve_beats_dense_grid_with_signed_weights,
                         test_variance_hand_instance, test_confidence_interval_oracles,
                         test_estimate_complete_data_near_sample_median,
                         test_estimate_standardized_response_is_equivariant,
                         test_estimate_labels_failing_stage,
                         test_contrast_of_identical_groups_is_zero]),
]


def run_all_tests():
    print("\n" + "=" * 70)
    print("  HDQUANTILE NUMERICAL TEST SUITE")
    print("=" * 70)
    for phase, title, tests in PHASES:
        print(f"\n\033[96m--- {phase}: {title} ---\033[0m\n")
        for test in tests:
            try:
                test()
                log_result(phase, test.__name__, True)
            except Exception:
                log_result(phase, test.__name__, False, traceback.format_exc())
    failed = [r for r in results if r["status"] == "FAIL"]
    print(f"\n  {len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(run_all_tests())
