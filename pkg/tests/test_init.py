import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import logit

from longfactor.errors import ConfigurationError, UnsupportedInitError
from longfactor.estimator import FitOptions, fit
from longfactor.init import (
    InitOptions,
    clipped_inverse_link,
    initial_values,
    random_init,
    sign_matrix,
    svd_init,
)
from longfactor.model import Dataset, Layout, ModelSpec, joint_loglik
from longfactor.simulate import SimConfig, generate

from conftest import ALL_VARIANTS, dataset_for_variant, make_dataset


def test_sign_mapping():
    y = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    r = np.array([[1.0, 0.0]])
    L = sign_matrix(y, r)
    np.testing.assert_array_equal(L, [[[1.0, 0.0], [-1.0, 0.0]]])


def test_clipping_examples():
    # logit(0.99) = log(99), evaluated independently
    assert clipped_inverse_link(1.5, 0.01) == pytest.approx(np.log(99.0), rel=1e-14)
    assert clipped_inverse_link(1.5, 0.01) == pytest.approx(4.59511985013459, rel=1e-13)
    assert clipped_inverse_link(-1.5, 0.01) == pytest.approx(-np.log(99.0), rel=1e-14)
    assert clipped_inverse_link(0.0, 0.01) == 0.0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(1e-4, 0.49))
def test_clipping_range(vals, eps):
    out = clipped_inverse_link(np.array(vals), eps)
    # the middle branch maps [-1+eps, 1-eps] onto [eps/2, 1-eps/2] before the logit
    assert np.all(out >= logit(eps / 2) - 1e-12)
    assert np.all(out <= logit(1 - eps / 2) + 1e-12)
    v = np.array(vals)
    np.testing.assert_allclose(out[v < -1 + eps], logit(eps))
    np.testing.assert_allclose(out[v > 1 - eps], logit(1 - eps))


def test_init_options_validation():
    for bad in (0.0, 0.5, -1.0):
        with pytest.raises(ConfigurationError):
            InitOptions(epsilon=bad)


def test_random_init_examples(rng):
    spec, data = dataset_for_variant(rng, "base", K=2)
    a, b = random_init(spec, data, 7), random_init(spec, data, 7)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert a.item_params.tobytes() == b.item_params.tobytes()
    c = random_init(spec, data, 8)
    assert not np.array_equal(a.theta, c.theta)
    lay = Layout.for_data(spec, data)
    assert np.all(np.abs(a.theta) <= 0.5)
    assert np.all(a.item_params[:, lay.gamma] == 0) and np.all(a.item_params[:, lay.beta] == 0)
    zero = random_init(spec.with_factors(0), data, 7)
    assert zero.theta.shape[1] == 0
    assert np.all(zero.item_params == 0)


def test_svd_init_rejects_counts(rng):
    data = make_dataset(rng, 20, 3, 2, family="poisson")
    with pytest.raises(UnsupportedInitError):
        svd_init(ModelSpec(1), data)
    fallback = initial_values(ModelSpec(1), data, seed=3)
    assert fallback.theta.tobytes() == random_init(ModelSpec(1), data, 3).theta.tobytes()


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_svd_init_shapes_and_finite(variant, rng):
    spec, data = dataset_for_variant(rng, variant, N=40, J=6, T=3, K=2)
    params = svd_init(spec, data)
    lay = Layout.for_data(spec, data)
    assert params.theta.shape == (40, 2)
    assert params.item_params.shape == (6, lay.P)
    assert np.isfinite(joint_loglik(spec, data, params))


def test_svd_init_wide_data(rng):
    # more items than persons goes through the transposed decomposition
    spec, data = dataset_for_variant(rng, "base", N=8, J=20, T=2, p=0, K=2)
    params = svd_init(spec, data)
    assert params.theta.shape == (8, 2)
    assert np.all(np.isfinite(params.item_params))


def test_svd_init_orders_intercepts():
    rng = np.random.default_rng(1)
    N, J, T = 400, 5, 2
    p = np.array([0.2, 0.4, 0.5, 0.6, 0.8])
    y = (rng.random((N, J, T)) < p[None, :, None]).astype(float)
    data = Dataset(y, np.ones((N, T)))
    params = svd_init(ModelSpec(1), data)
    lay = Layout.for_data(ModelSpec(1), data)
    g = params.item_params[:, lay.gamma].mean(axis=1)
    # a rough start: ordered like the true log-odds, with matching signs away from 0.5
    assert np.all(np.diff(g) > 0)
    assert g[0] < 0 < g[-1]


def test_svd_start_not_worse_than_random_restarts():
    cfg = SimConfig(J=100, N=500, T=4, K_star=3)
    truth = generate(cfg, 0)
    spec, data = cfg.spec(), truth.dataset
    opts = FitOptions()
    best_svd = fit(spec, data, svd_init(spec, data), opts).loglik
    best_random = max(fit(spec, data, random_init(spec, data, s), opts).loglik for s in range(3))
    assert best_svd >= best_random - 1e-6 * abs(best_random)
