import numpy as np
import pytest
from hypothesis import settings

from longfactor.model import VARIANTS, Dataset, Layout, ModelSpec, ParameterSet

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

ALL_VARIANTS = list(VARIANTS)


def make_dataset(rng, N, J, T, p=0, pz=0, family="bernoulli", miss_rate=0.3, eta=None):
    r = (rng.random((N, T)) > miss_rate).astype(float)
    r[np.arange(N), rng.integers(0, T, N)] = 1.0
    X = rng.normal(size=(N, p)) if p else None
    Z = rng.normal(size=(N, pz, T)) if pz else None
    if eta is None:
        eta = rng.normal(scale=0.8, size=(N, J, T))
    fam = (family,) * J if isinstance(family, str) else tuple(family)
    y = np.empty((N, J, T))
    for j, f in enumerate(fam):
        if f == "bernoulli":
            y[:, j] = rng.random((N, T)) < 1 / (1 + np.exp(-eta[:, j]))
        elif f == "poisson":
            y[:, j] = rng.poisson(np.exp(np.clip(eta[:, j], -5, 3)))
        else:
            y[:, j] = eta[:, j] + rng.normal(size=(N, T))
    return Dataset(y, r, X, Z, fam)


def random_params(rng, spec, data, scale=0.5):
    lay = Layout.for_data(spec, data)
    theta = rng.normal(scale=scale, size=(data.n_persons, lay.K))
    U = rng.normal(scale=scale, size=(data.n_items, lay.P))
    return ParameterSet(theta, U)


def dataset_for_variant(rng, variant, N=30, J=5, T=3, p=2, pz=1, K=2, family="bernoulli"):
    spec = ModelSpec.from_variant(variant, K)
    data = make_dataset(rng, N, J, T, p=p, pz=pz if spec.use_time_covariates else 0, family=family)
    return spec, data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(number, name, passed, detail):
    ACCEPTANCE[number] = (name, bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
