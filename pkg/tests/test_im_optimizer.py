import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize

from predhet.dataset import Dataset, GeneratorConfig, Task, generate
from predhet.families import FamilySpec, FitOptions, converged_options, fit_arrays
from predhet.im_optimizer import (IMConfig, find_elbow, harden, hypergradient, objective, one_hot,
                                  project_simplex_rows, regularizer, regularizer_grad, run_im, sweep_k,
                                  write_trace_csv)
from predhet.oracles import finite_difference_hypergradient, relative_error, row_center
from predhet.vinformation import empirical_conditional_entropy, empirical_marginal_entropy, evaluate_heterogeneity

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def qp_projection(v):
    """Reference projection by a generic constrained solver."""
    v = np.asarray(v, dtype=float)
    K = v.size
    res = optimize.minimize(lambda x: 0.5 * np.sum((x - v) ** 2), np.full(K, 1.0 / K), jac=lambda x: x - v,
                            bounds=[(0, 1)] * K, constraints=[{"type": "eq", "fun": lambda x: x.sum() - 1}],
                            method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x


def test_projection_examples():
    np.testing.assert_allclose(project_simplex_rows([1.2, 0.3]), [0.95, 0.05], atol=1e-12)
    np.testing.assert_allclose(qp_projection([1.2, 0.3]), [0.95, 0.05], atol=1e-7)
    np.testing.assert_allclose(project_simplex_rows([-1, -1, 5]), [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(qp_projection([-1, -1, 5]), [0, 0, 1], atol=1e-7)
    row = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_array_equal(project_simplex_rows(row), row)


def test_projection_matches_qp_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = 3 * rng.standard_normal(int(rng.integers(2, 6)))
        np.testing.assert_allclose(project_simplex_rows(v), qp_projection(v), atol=1e-6)


@settings(max_examples=1000, deadline=None)
@given(st.integers(2, 6).flatmap(lambda k: st.tuples(arrays(float, k, elements=finite),
                                                      arrays(float, k, elements=finite))))
def test_projection_properties(pair):
    a, b = pair
    pa, pb = project_simplex_rows(a), project_simplex_rows(b)
    assert np.all(pa >= 0) and abs(pa.sum() - 1) < 1e-9
    np.testing.assert_allclose(project_simplex_rows(pa), pa, atol=1e-12)
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-9


def test_projection_rejects_nan():
    with pytest.raises(ValueError):
        project_simplex_rows([np.nan, 1.0])


def test_harden():
    assert harden(np.array([[0.7, 0.3]]))[0] == 0
    assert harden(np.array([[0.5, 0.5]]))[0] == 0
    assert harden(np.array([[0.5, 0.5]]), "highest")[0] == 1
    with pytest.raises(ValueError):
        harden(np.array([[0.5, 0.5]]), "random")


def test_regularizer_examples():
    v1 = FamilySpec.v1()
    y = np.array([0.0, 2.0])
    assert regularizer(v1, np.ones((2, 1)), y) == pytest.approx(0.0, abs=1e-15)
    assert regularizer(v1, np.eye(2), y, mass_floor=None) == pytest.approx(1.0)
    v2 = FamilySpec.v2()
    lab = np.array([0, 0, 1, 1])
    assert regularizer(v2, one_hot(lab), lab, mass_floor=None) == 0.0
    assert regularizer(v2, np.ones((4, 1)), lab) == pytest.approx(-math.log(2))
    # K = 1: the only feasible W is all ones, so the gradient's simplex-tangent part is zero
    g = regularizer_grad(v1, np.ones((5, 1)), np.arange(5.0))
    np.testing.assert_array_equal(row_center(g), np.zeros((5, 1)))


def _fd_reg_grad(spec, W, y, h=1e-6):
    G = np.zeros_like(W)
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            E = np.zeros_like(W)
            E[i, j] = h
            G[i, j] = (regularizer(spec, W + E, y, None) - regularizer(spec, W - E, y, None)) / (2 * h)
    return G


@pytest.mark.parametrize("kind", ["V1", "V2"])
def test_regularizer_grad_matches_fd(kind):
    rng = np.random.default_rng(1)
    spec = FamilySpec.v1() if kind == "V1" else FamilySpec.v2(classes=3)
    for _ in range(20):
        n, K = 8, 3
        W = rng.dirichlet(np.ones(K), size=n)
        y = rng.standard_normal(n) if kind == "V1" else rng.integers(0, 3, n)
        G = regularizer_grad(spec, W, y, mass_floor=None)
        assert np.max(np.abs(G - _fd_reg_grad(spec, W, y))) < 1e-6


def _hyper_instance(rng, n=6, K=2):
    X = rng.standard_normal((n, 2))
    data = Dataset(X, X @ [1.0, -1.0] + 0.3 * rng.standard_normal(n), Task.regression())
    W = rng.dirichlet(np.ones(K), size=n)
    spec = FamilySpec.v1()
    warm = 0.5 * rng.standard_normal(spec.n_params(2))
    opts = FitOptions("gradient_descent", steps=1, init_theta=warm)
    return spec, data, W, opts


def _analytic(spec, data, W, opts, literal=False):
    params = [fit_arrays(spec, data.features, data.targets, W[:, j], opts) for j in range(W.shape[1])]
    return hypergradient(spec, W, params, data, opts, mass_floor=None, omit_step_factor=literal)


def test_hypergradient_matches_fd():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        spec, data, W, opts = _hyper_instance(rng)
        fd = finite_difference_hypergradient(spec, W, data, opts)
        worst = max(worst, relative_error(_analytic(spec, data, W, opts), fd))
    assert worst < 1e-4


def test_omit_step_factor_disagrees_with_fd():
    rng = np.random.default_rng(3)
    spec, data, W, opts = _hyper_instance(rng)
    fd = finite_difference_hypergradient(spec, W, data, opts)
    assert relative_error(_analytic(spec, data, W, opts, literal=True), fd) > 1e-2


def test_hypergradient_closed_form_and_v2():
    rng = np.random.default_rng(4)
    spec, data, W, _ = _hyper_instance(rng)
    cf = FitOptions("closed_form")
    assert relative_error(_analytic(spec, data, W, cf), finite_difference_hypergradient(spec, W, data, cf)) < 1e-5
    X = rng.standard_normal((6, 2))
    d2 = Dataset(X, (X[:, 0] > 0).astype(int), Task.classification(2))
    v2 = FamilySpec.v2()
    opts = FitOptions("gradient_descent", steps=2, init_theta=0.3 * rng.standard_normal(v2.n_params(2)), ridge=1e-2)
    assert relative_error(_analytic(v2, d2, W, opts), finite_difference_hypergradient(v2, W, d2, opts)) < 1e-4


def test_hypergradient_shape_errors():
    rng = np.random.default_rng(5)
    spec, data, W, opts = _hyper_instance(rng)
    with pytest.raises(ValueError):
        hypergradient(spec, W[:3], [None, None], data, opts)
    with pytest.raises(ValueError):
        hypergradient(spec, W, [None], data, opts)


def test_objective_equivalence_identity():
    # for hard W and converged fits: V1 h = cond - R, V2 h = cond - marg - R
    rng = np.random.default_rng(6)
    for t in range(20):
        n = int(rng.integers(6, 15))
        X = rng.standard_normal((n, 2))
        K = int(rng.integers(2, 4))
        labels = np.concatenate([np.arange(K), rng.integers(0, K, n - K)])
        W = one_hot(labels, K)
        if t % 2 == 0:
            spec = FamilySpec.v1()
            data = Dataset(X, X[:, 0] + rng.standard_normal(n), Task.regression())
        else:
            spec = FamilySpec.v2()
            data = Dataset(X, rng.integers(0, 2, n), Task.classification(2))
        opts = converged_options(spec, ridge=1e-2)
        rep = evaluate_heterogeneity(spec, data, W, opts, mass_floor=None)
        params = [fit_arrays(spec, data.features, data.targets, W[:, j], opts) for j in range(K)]
        R = objective(spec, W, params, data, mass_floor=None)
        cond, _ = empirical_conditional_entropy(spec, data, opts)
        rhs = cond - R if spec.kind == "V1" else cond - empirical_marginal_entropy(spec, data) - R
        assert rep.heterogeneity == pytest.approx(rhs, abs=1e-8)


def test_config_validation():
    for kw in ({"K": 1}, {"outer_lr": 0}, {"outer_iters": 0}, {"init": "x"}, {"noise_scale": 0.7},
               {"init": "labels"}, {"tie_break": "x"}, {"restarts": 0}, {"eval_every": 0}):
        with pytest.raises(ValueError):
            IMConfig(**kw)


@pytest.fixture(scope="module")
def small_selection_bias():
    return generate(GeneratorConfig("selection-bias", n=1000), seed=0)


def test_run_im_best_seen_and_nonnegative(small_selection_bias):
    spec = FamilySpec.v1()
    W, rep, trace = run_im(spec, small_selection_bias, IMConfig(K=2, outer_iters=40, eval_every=1))
    assert rep.heterogeneity >= -1e-6
    seen = [r["heterogeneity"] for r in trace if not math.isnan(r["heterogeneity"])]
    assert rep.heterogeneity == pytest.approx(max(seen + [0.0]))
    assert evaluate_heterogeneity(spec, small_selection_bias, W).heterogeneity == pytest.approx(rep.heterogeneity)
    assert W.shape == (1000, 2) and np.allclose(W.sum(axis=1), 1)


def test_run_im_deterministic(small_selection_bias):
    spec = FamilySpec.v1()
    cfg = IMConfig(K=2, outer_iters=15, seed=3)
    a = run_im(spec, small_selection_bias, cfg)
    b = run_im(spec, small_selection_bias, cfg)
    np.testing.assert_array_equal(a[0], b[0])


def test_run_im_label_init_and_trace_csv(small_selection_bias, tmp_path):
    spec = FamilySpec.v1()
    cfg = IMConfig(K=2, outer_iters=5, init="labels", init_labels=tuple(small_selection_bias.true_envs))
    W, rep, trace = run_im(spec, small_selection_bias, cfg)
    truth = evaluate_heterogeneity(spec, small_selection_bias, one_hot(small_selection_bias.true_envs)).heterogeneity
    assert rep.heterogeneity >= truth - 1e-9
    p = tmp_path / "trace.csv"
    write_trace_csv(trace, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "iter,objective,heterogeneity,mass_0,mass_1"
    assert len(lines) == len(trace) + 1


def test_run_im_rejects_small_n():
    d = Dataset(np.zeros((2, 1)), np.zeros(2), Task.regression())
    with pytest.raises(ValueError):
        run_im(FamilySpec.v1(), d, IMConfig(K=3))


def test_find_elbow():
    assert find_elbow([2, 3, 4, 5], [1.0, 2.0, 3.0, 3.1]) == 4
    assert find_elbow([2, 3, 4], [1.0, 2.0, 3.0]) is None


def test_sweep_k_plumbing(small_selection_bias):
    res = sweep_k(FamilySpec.v1(), small_selection_bias, [3, 2], IMConfig(outer_iters=5))
    assert [k for k, _ in res] == [2, 3]
    assert set(res.assignments) == {2, 3}
    with pytest.raises(ValueError):
        sweep_k(FamilySpec.v1(), small_selection_bias, [1, 2], IMConfig())
