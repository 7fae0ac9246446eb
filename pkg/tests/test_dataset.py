import math

import numpy as np
import pytest

from predhet.dataset import (DataError, Dataset, GeneratorConfig, Task, generate, group_sizes, load_csv,
                             save_csv, split)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, "f0,f1,y\n1,2,3\n4,5,6\n7,8,9\n")
    d = load_csv(p, Task.regression())
    assert (d.n, d.d) == (3, 2)
    assert d.true_envs is None
    np.testing.assert_array_equal(d.targets, [3, 6, 9])


def test_load_env_column(tmp_path):
    p = _write(tmp_path, "f0,y,env\n1,0,0\n2,1,0\n3,0,1\n")
    d = load_csv(p, Task.classification(2))
    np.testing.assert_array_equal(d.true_envs, [0, 0, 1])
    assert d.targets.dtype == np.int64


def test_load_bad_cell_names_row_and_column(tmp_path):
    p = _write(tmp_path, "f0,y\n1,2\n3,abc\n")
    with pytest.raises(DataError, match=r"row 3.*'y'"):
        load_csv(p, Task.regression())


@pytest.mark.parametrize("text", ["", "f0,f1\n1,2\n", "f0,y\n1,2,3\n", "f0,y\n"])
def test_load_malformed(tmp_path, text):
    with pytest.raises(DataError):
        load_csv(_write(tmp_path, text), Task.regression())


def test_load_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv", Task.regression())


def test_classification_targets_checked(tmp_path):
    with pytest.raises(DataError):
        load_csv(_write(tmp_path, "f0,y\n1,0.5\n"), Task.classification(2))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), np.array([0, 3]), Task.classification(2))


def test_csv_round_trip(tmp_path):
    d = generate(GeneratorConfig("selection-bias", n=50), seed=3)
    p = tmp_path / "x.csv"
    save_csv(d, p)
    back = load_csv(p, Task.regression())
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.targets, d.targets)
    np.testing.assert_array_equal(back.true_envs, d.true_envs)


def test_selection_bias_layout():
    d = generate(GeneratorConfig("selection-bias"), seed=0)
    assert (d.n, d.d) == (10000, 10)
    assert np.bincount(d.true_envs).tolist() == [8000, 2000]
    assert len(d.meta["theta_s"]) == 5


def test_selection_bias_single_group():
    d = generate(GeneratorConfig("selection-bias", n=100, fractions=(1.0,), r=(1.9,)), seed=1)
    assert np.all(d.true_envs == 0)


def test_selection_bias_corr_sign():
    # within each group the V-Y correlation has the sign of r, 20 trials out of 20
    for t in range(20):
        d = generate(GeneratorConfig("selection-bias", n=5000), seed=100 + t)
        V = d.features[:, -1]
        for g, r in enumerate((1.9, -1.9)):
            m = d.true_envs == g
            assert np.sign(np.corrcoef(V[m], d.targets[m])[0, 1]) == np.sign(r)


def test_selection_bias_rejects_small_r():
    with pytest.raises(DataError):
        GeneratorConfig("selection-bias", r=(0.5, -1.9))


def test_hidden_variable_groups():
    d = generate(GeneratorConfig("hidden-variable", n=11000), seed=0)
    assert np.bincount(d.true_envs).tolist() == [8000, 1000, 1000, 1000]
    one = generate(GeneratorConfig("hidden-variable", n=500, counts=(500,), theta_v=(3.0,)), seed=0)
    assert np.all(one.true_envs == 0)
    with pytest.raises(DataError):
        GeneratorConfig("hidden-variable", n=10000)


def test_spurious_label_split_and_flip():
    d = generate(GeneratorConfig("spurious-label", n=10000, flip=0.2, agreement=0.85), seed=0)
    frac = np.mean(d.true_envs == 0)
    assert abs(frac - 0.85) < 3 * math.sqrt(0.85 * 0.15 / 10000)
    # flip rate: regenerate the clean labels from the same stream
    clean = np.random.default_rng(0).integers(0, 2, size=10000)
    rate = np.mean(clean != d.targets)
    assert abs(rate - 0.2) < 3 * math.sqrt(0.2 * 0.8 / 10000)


def test_spurious_label_perfect_coupling():
    d = generate(GeneratorConfig("spurious-label", n=2000, agreement=1.0), seed=4)
    pred = (d.features[:, -1] > 0).astype(int)
    assert np.mean(pred == d.targets) == 1.0


def test_flip_out_of_range():
    with pytest.raises(DataError, match="flip"):
        GeneratorConfig("spurious-label", flip=1.5)


def test_homogeneous_slope():
    d = generate(GeneratorConfig("homogeneous", n=1000, beta=1.0, sigma=0.5), seed=0)
    x = d.features[:, 0]
    slope = np.polyfit(x, d.targets, 1)[0]
    assert abs(slope - 1.0) < 0.1


def test_homogeneous_noiseless():
    d = generate(GeneratorConfig("homogeneous", n=200, sigma=1e-8), seed=0)
    assert np.max(np.abs(d.targets - d.features[:, 0])) < 1e-6


@pytest.mark.parametrize("variant,kw", [("homogeneous", {}), ("selection-bias", {}),
                                         ("hidden-variable", {"n": 11000}), ("spurious-label", {})])
def test_generators_deterministic(variant, kw):
    a = generate(GeneratorConfig(variant, **kw), seed=5)
    b = generate(GeneratorConfig(variant, **kw), seed=5)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.targets, b.targets)
    c = generate(GeneratorConfig(variant, **kw), seed=6)
    assert not np.array_equal(a.features, c.features)


def test_split_sizes_and_determinism():
    d = Dataset(np.arange(10.0)[:, None], np.arange(10.0), Task.regression())
    tr, te = split(d, 0.2, seed=0)
    assert (tr.n, te.n) == (8, 2)
    d11 = Dataset(np.arange(11.0)[:, None], np.arange(11.0), Task.regression())
    tr, te = split(d11, 0.5, seed=0)
    assert (tr.n, te.n) == (6, 5)
    a, b = split(d11, 0.5, seed=3), split(d11, 0.5, seed=3)
    np.testing.assert_array_equal(a[1].targets, b[1].targets)
    assert sorted(np.concatenate([tr.targets, te.targets]).tolist()) == list(range(11))


def test_split_rejects_bad_fraction():
    d = Dataset(np.zeros((3, 1)), np.zeros(3), Task.regression())
    for f in (0.0, 1.0, 0.1):
        with pytest.raises(DataError):
            split(d, f, 0)


def test_group_sizes_sum():
    assert group_sizes(10, (0.5, 0.5)) == [5, 5]
    assert sum(group_sizes(11, (0.8, 0.2))) == 11
