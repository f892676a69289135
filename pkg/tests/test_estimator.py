import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mixbart import NegBinSoftBART
from mixbart.exceptions import DataError

from conftest import make_panel


@pytest.fixture(scope="module")
def fitted():
    data, car = make_panel(n_days=20, seed=2)
    est = NegBinSoftBART(n_trees=5, n_burn=30, n_save=20, thin=1, seed=1)
    est.fit(data.Z, data.y, X=data.X, population=data.population, regions=data.region, car=car)
    return est, data


def test_params_round_trip_through_clone():
    est = NegBinSoftBART(n_trees=7, soft=False, fix_rho=0.5)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.prior_config().bart.soft is False


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        NegBinSoftBART().predict_surface(np.zeros((2, 2)))


def test_fit_and_predict_shapes(fitted):
    est, data = fitted
    assert est.posterior_.n_draws == 20 and est.n_features_in_ == 2
    f = est.predict_surface(data.Z)
    assert f.shape == (data.n_rows,)
    assert est.surface_draws(data.Z).shape == (20, data.n_rows)
    mu = est.predict(data.Z, X=data.X, population=data.population, regions=data.region)
    assert mu.shape == (data.n_rows,) and np.all(mu > 0)
    # in-sample predictions track the counts
    assert np.corrcoef(mu, data.y)[0, 1] > 0.5


def test_predict_matches_stored_eta(fitted):
    est, data = fitted
    mu = est.predict(data.Z, X=data.X, population=data.population, regions=data.region)
    post = est.posterior_
    expected = np.mean(post["xi"][:, None] * np.exp(post.eta(data)), axis=0)
    np.testing.assert_allclose(mu, expected, rtol=1e-9)


def test_score_and_log_likelihood(fitted):
    est, data = fitted
    ll = est.log_likelihood()
    assert ll.shape == (20, data.n_rows)
    s = est.score(data.Z, data.y, X=data.X, population=data.population, regions=data.region)
    assert np.isfinite(s) and s < 0
    assert s >= ll.mean() - 1e-12


def test_input_validation(fitted):
    est, data = fitted
    with pytest.raises(DataError):
        est.predict_surface(data.Z[:, :1])
    with pytest.raises(DataError):
        est.predict(data.Z, X=data.X[:, :1].repeat(2, axis=1)[:-1], population=data.population,
                    regions=data.region)
    with pytest.raises(DataError):
        est.predict(data.Z, X=data.X, population=data.population, regions=data.region + 100)
    with pytest.raises(ValueError):
        NegBinSoftBART().fit(data.Z, data.y)
