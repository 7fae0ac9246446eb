import math

import numpy as np
import pytest

from predhet.dataset import Dataset, Task
from predhet.families import FamilySpec, FitOptions, converged_options
from predhet.im_optimizer import one_hot
from predhet.oracles import (Approximation, ReferenceScenario, brute_force_heterogeneity, compare_to_approximation,
                             hidden_variable_approximation, homogeneous_bound, restricted_growth_strings,
                             selection_bias_approximation, reference_dataset)
from predhet.vinformation import empirical_conditional_entropy

FOUR = np.array([(1.0, 1.0), (2.0, 2.0), (1.0, -1.0), (2.0, -2.0)])
EXACT = FitOptions("closed_form", ridge=0.0)


def sb(masses, r=(1.0, -1.0), sigma=(0.0, 0.0), Ef2=1.0):
    return ReferenceScenario("selection_bias", masses, r, sigma, Ef2)


def test_selection_bias_examples():
    assert selection_bias_approximation(sb((0.5, 0.5), r=(2.0, 2.0))).value == pytest.approx(0.0)
    assert selection_bias_approximation(sb((0.5, 0.5))).value == pytest.approx(1.0)
    assert selection_bias_approximation(sb((0.8, 0.2))).value == pytest.approx(0.64)


def test_hidden_variable_examples():
    s = ReferenceScenario("hidden_variable", (0.5, 0.5), (1.0, -1.0), (0.0, 0.0), 1.0, sigma_Y=1.0)
    assert hidden_variable_approximation(s).value == pytest.approx(2.0)
    # constant r: value reduces to E[s^2] / (E[r^2] F + E[s^2]) * F with F = Ef2 + sigma_Y^2
    s = ReferenceScenario("hidden_variable", (0.3, 0.7), (1.5, 1.5), (0.4, 0.9), 0.8, sigma_Y=0.6)
    F, Es2 = 0.8 + 0.36, 0.3 * 0.16 + 0.7 * 0.81
    expected = Es2 / (2.25 * F + Es2) * F
    assert hidden_variable_approximation(s).value == pytest.approx(expected, rel=1e-12)


def test_approximation_variant_checks():
    with pytest.raises(ValueError):
        hidden_variable_approximation(sb((0.5, 0.5)))
    with pytest.raises(ValueError):
        ReferenceScenario("other", (1.0,), (1.0,), (0.0,), 1.0)
    with pytest.raises(ValueError):
        sb((0.5, 0.6))


def test_l_condition_flag():
    weak = sb((0.5, 0.5), r=(0.1, -0.1), sigma=(1.0, 1.0))
    a = selection_bias_approximation(weak)
    assert not a.reliable and "unreliable" in a.note
    assert selection_bias_approximation(sb((0.5, 0.5), sigma=(0.05, 0.05))).reliable


def test_homogeneous_bound():
    assert homogeneous_bound(1.0) == pytest.approx(math.pi)
    assert homogeneous_bound(0.0) == 0.0
    assert homogeneous_bound(0.5) == pytest.approx(math.pi / 4)


def test_reference_dataset_moments():
    s = ReferenceScenario("selection_bias", (0.8, 0.2), (1.0, -1.0), (0.05, 0.05), 1.0, 0.5)
    d = reference_dataset(s, 200000, seed=0)
    S, V = d.features[:, 0], d.features[:, 1]
    f = (S * S - 1) / math.sqrt(2)
    assert np.mean(f * f) == pytest.approx(1.0, abs=0.02)
    assert abs(np.mean(f * S)) < 0.02
    g0 = d.true_envs == 0
    assert np.corrcoef(V[g0], f[g0])[0, 1] > 0.99


def test_compare_to_approximation():
    out = compare_to_approximation(Approximation(1.0, 0.1, True), 1.05)
    assert out["within_bound"] and out["reliable"]
    assert not compare_to_approximation(Approximation(1.0, 0.1, True), 1.2)["within_bound"]


def test_restricted_growth_strings_count():
    # labellings of n items into at most K unlabelled blocks: sum of Stirling numbers
    assert len(list(restricted_growth_strings(4, 2))) == 8
    assert len(list(restricted_growth_strings(5, 3))) == 1 + 15 + 25
    for s in restricted_growth_strings(5, 3):
        assert s[0] == 0 and all(s[i] <= max(s[:i]) + 1 for i in range(1, 5))


def test_brute_force_constant_targets():
    d = Dataset(np.arange(6.0)[:, None], np.ones(6, dtype=int), Task.classification(2))
    val, _ = brute_force_heterogeneity(FamilySpec.v2(), d, 2, converged_options(FamilySpec.v2(), 1e-2))
    assert val == pytest.approx(0.0, abs=1e-9)


def test_brute_force_four_points():
    d = Dataset(FOUR[:, :1], FOUR[:, 1], Task.regression())
    # without intercept the cross partition is best: env fits y = -0.6x and 0.6x
    # leave SSE 3.2 each, env variances 2.25 each, so (9 - 6.4) / 8 = 0.325
    val, W = brute_force_heterogeneity(FamilySpec.v1(intercept=False), d, 2, EXACT, mass_floor=None)
    assert val == pytest.approx(0.325, abs=1e-12)
    assert W.argmax(axis=1).tolist() in ([0, 1, 1, 0], [1, 0, 0, 1])
    # with an intercept every two-point env is fit exactly; a tiny ridge keeps
    # one-point environments solvable
    val, W = brute_force_heterogeneity(FamilySpec.v1(), d, 2, FitOptions(ridge=1e-12), mass_floor=None)
    assert val == pytest.approx(1.125, abs=1e-8)


def test_brute_force_size_guard():
    d = Dataset(np.zeros((30, 1)), np.zeros(30), Task.regression())
    with pytest.raises(ValueError, match="too large"):
        brute_force_heterogeneity(FamilySpec.v1(), d, 2)


def test_brute_force_partition_properties():
    rng = np.random.default_rng(0)
    for t in range(6):
        n = 7
        X = rng.standard_normal((n, 1))
        if t % 2:
            spec = FamilySpec.v2()
            d = Dataset(X, (X[:, 0] + rng.standard_normal(n) > 0).astype(int), Task.classification(2))
        else:
            spec = FamilySpec.v1()
            d = Dataset(X, X[:, 0] + rng.standard_normal(n), Task.regression())
        opts = converged_options(spec, ridge=1e-2)
        v2, _ = brute_force_heterogeneity(spec, d, 2, opts, mass_floor=None)
        v3, _ = brute_force_heterogeneity(spec, d, 3, opts, mass_floor=None)
        assert v2 >= -1e-12
        assert v3 >= v2 - 1e-12
        if spec.kind == "V2":
            cond, _ = empirical_conditional_entropy(spec, d, opts)
            assert v3 <= cond + 1e-9
