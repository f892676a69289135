import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixbart.ensemble import BartConfig
from mixbart.exceptions import ConfigError
from mixbart.randkit import RngStream
from mixbart.simlab import (
    PARAMETER_COLUMNS,
    TABLE_COLUMNS,
    ReplicateFit,
    SimConfig,
    SimTruth,
    default_exposure_correlation,
    friedman_surface,
    generate_replicate,
    read_metric_csv,
    run_study,
    score_parameters,
    score_replicates,
    write_metric_csv,
)


def tiny_config(**kw):
    base = dict(lattice=(2, 2), n_days=10, n_exposures=5, n_replicates=2, n_burn=10, n_save=5, thin=1,
                settings=[BartConfig(n_trees=3)], seed=11)
    return SimConfig(**{**base, **kw})


def test_friedman_centre_value():
    assert friedman_surface(np.full((1, 10), 0.5))[0] == pytest.approx(-8.0052, abs=1e-4)


@given(st.permutations(range(5, 10)), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_friedman_ignores_inert_columns(perm, seed):
    Z = np.random.default_rng(seed).random((20, 10))
    Zp = Z.copy()
    Zp[:, 5:] = Z[:, list(perm)]
    np.testing.assert_array_equal(friedman_surface(Zp), friedman_surface(Z))
    Zs = Z[:, [1, 0] + list(range(2, 10))]
    np.testing.assert_allclose(friedman_surface(Zs), friedman_surface(Z), atol=1e-12)


def test_default_correlation_is_valid():
    c = default_exposure_correlation(10)
    assert np.allclose(c, c.T) and np.linalg.eigvalsh(c).min() > 0
    assert c[0, 1] == 0.4 and c[4, 0] == -0.2 and c[6, 0] == 0
    with pytest.raises(ConfigError):
        default_exposure_correlation(4)


def test_generate_replicate_shapes_and_determinism():
    cfg = tiny_config()
    a, ta = generate_replicate(cfg, RngStream(1, 0, (0,)))
    b, tb = generate_replicate(cfg, RngStream(1, 0, (0,)))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(ta.f, tb.f)
    assert a.n_rows == 40 and a.Z.shape == (40, 5) and a.X.shape == (40, 4)
    assert a.Z.min() == 0 and a.Z.max() == 1
    np.testing.assert_allclose(ta.eta, np.log(a.population) + a.X @ ta.beta + ta.f + ta.nu[a.region])
    c, _ = generate_replicate(cfg, RngStream(1, 1, (0,)))
    assert not np.array_equal(a.y, c.y)


def test_negative_binomial_counts_moments():
    # eta fixed by a flat surface and no spatial or confounder signal
    cfg = tiny_config(lattice=(1, 2), n_days=100_000, beta=(0, 0, 0, 0), tau2=1e-10, rho=0.0, xi=2.0,
                      populations=[1.0, 1.0], surface=lambda Z: np.full(Z.shape[0], 0.5))
    data, truth = generate_replicate(cfg, RngStream(2))
    mu = 2.0 * math.exp(0.5)
    var = mu * (1 + math.exp(0.5))
    assert abs(data.y.mean() - mu) < 0.03
    assert abs(data.y.var() / var - 1) < 0.03


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(beta=(1.0,))
    with pytest.raises(ConfigError):
        tiny_config(correlation=np.ones((5, 5)))
    with pytest.raises(ConfigError):
        tiny_config(rho=1.0)
    with pytest.raises(ConfigError):
        tiny_config(settings=[])


def _fake_fit(f_mean, f_lo, f_hi, setting=None):
    setting = setting or BartConfig(n_trees=7, soft=False, sparse=True)
    summ = {"f": np.array([f_mean, f_lo, f_hi], dtype=float)}
    for name, d in (("beta", 4), ("rho", 1), ("tau2", 1), ("xi", 1), ("nu", 2)):
        summ[name] = np.zeros((3, d))
    return ReplicateFit(setting.to_dict(), 0, summ)


def _truth(f):
    return SimTruth(np.asarray(f, dtype=float), None, np.zeros(2), np.zeros(4), 0.9, 0.3, 1.0)


def test_scoring_hand_example():
    fits = [_fake_fit([1.0, 2.0], [0.0, 2.5], [2.0, 3.0]), _fake_fit([0.0, 0.0], [-1, -1], [1, 1])]
    truths = [_truth([0.0, 2.0]), _truth([1.0, 1.0])]
    row = score_replicates(fits, truths)
    # replicate 1: errors (1, 0); replicate 2: errors (-1, -1)
    assert row["bias"] == pytest.approx((0.5 - 1.0) / 2)
    assert row["coverage"] == pytest.approx((0.5 + 1.0) / 2)
    assert row["rmse"] == pytest.approx((math.sqrt(0.5) + 1.0) / 2)
    assert row["coverage_mcse"] == pytest.approx(np.std([0.5, 1.0], ddof=1) / math.sqrt(2))
    assert (row["T"], row["soft"], row["sparse"]) == (7, False, True)


def test_scoring_degenerate_cases():
    exact = score_replicates([_fake_fit([1.0, 2.0], [1.0, 2.0], [1.0, 2.0])], [_truth([1.0, 2.0])])
    assert exact["bias"] == 0 and exact["rmse"] == 0 and exact["coverage"] == 1
    assert math.isnan(exact["bias_mcse"])
    with pytest.raises(ValueError):
        score_replicates([], [])
    with pytest.raises(ValueError):
        score_replicates([_fake_fit([1.0], [0], [2])], [_truth([1.0, 2.0])])
    params = score_parameters([_fake_fit([1.0], [0], [2])], [_truth([1.0])])
    assert [p["parameter"] for p in params] == ["beta_1", "beta_2", "beta_3", "beta_4", "rho", "tau2", "xi", "nu"]
    assert params[4]["truth"] == 0.9 and params[4]["bias"] == pytest.approx(-0.9)
    assert math.isnan(params[-1]["truth"])


def test_metric_csv_round_trip(tmp_path):
    rows = [{"T": 25, "soft": True, "sparse": False, "bias": 0.1, "bias_mcse": math.nan, "coverage": 0.95,
             "coverage_mcse": 0.01, "rmse": 1 / 3, "rmse_mcse": np.float64(0.002)}]
    write_metric_csv(rows, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == ",".join(TABLE_COLUMNS)
    back = read_metric_csv(tmp_path / "t.csv")[0]
    assert back["rmse"] == 1 / 3 and back["soft"] is True and back["T"] == 25
    assert math.isnan(back["bias_mcse"])
    prow = {**rows[0], "parameter": "xi", "truth": 1.0}
    write_metric_csv([prow], tmp_path / "p.csv", PARAMETER_COLUMNS)
    assert read_metric_csv(tmp_path / "p.csv")[0]["parameter"] == "xi"


def test_run_study_is_deterministic_and_cached(tmp_path):
    cfg = tiny_config()
    table, params, fits = run_study(cfg, cache_dir=tmp_path)
    assert len(table) == 1 and len(fits[0]) == 2
    assert len(list(tmp_path.glob("*.npz"))) == 2
    again, _, _ = run_study(cfg, cache_dir=tmp_path)
    fresh, _, _ = run_study(cfg, threads=2)
    for other in (again, fresh):
        for c in ("bias", "coverage", "rmse"):
            assert other[0][c] == table[0][c]
    assert len(params) == 8
