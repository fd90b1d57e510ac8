"""Data container, exponential-family cumulants and natural-parameter assembly.

Every model variant is expressed through a :class:`Layout`.  At a fixed time
point ``t`` the natural parameter of person ``i`` on item ``j`` is

    eta_ijt = sum_c  local_t[i, c] * u_j[index_t[c]]

where the local design row holds, in order, the intercept regressor (1, or the
time value ``t+1`` under a linear intercept), the static covariates ``x_i``,
the time covariates ``z_it`` and the factors ``theta_i``.  ``index_t`` places
those columns inside the full item vector ``u_j = (gamma, beta, v, a)``.  The
full design row ``e_it`` is the local row scattered into a zero vector of
length ``P``, so ``eta_ijt = u_j . e_it``.

Time indices are 0-based throughout the Python API.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, InputError, NumericError

FAMILIES = ("bernoulli", "poisson", "gaussian")
POISSON_ETA_MAX = 30.0

VARIANTS = {
    "base": {},
    "timecov": {"use_time_covariates": True},
    "tvload": {"time_varying_loadings": True, "time_varying_coefficients": True},
    "lineargamma": {"linear_intercept": True},
    "tvload+lineargamma": {
        "time_varying_loadings": True,
        "time_varying_coefficients": True,
        "linear_intercept": True,
    },
}


# ---------------------------------------------------------------------------
# Exponential family cumulants
# ---------------------------------------------------------------------------

def _check_family(family):
    fam = str(family).lower()
    if fam not in FAMILIES:
        raise ConfigurationError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return fam


def _poisson_exp(eta):
    eta = np.asarray(eta, dtype=float)
    over = eta > POISSON_ETA_MAX
    if np.any(over):
        warnings.warn(
            f"Poisson natural parameter clamped at {POISSON_ETA_MAX} in {int(over.sum())} cell(s)",
            RuntimeWarning,
            stacklevel=3,
        )
    return np.exp(np.minimum(eta, POISSON_ETA_MAX))


def family_b(family, order, eta):
    """Cumulant function ``b`` of an exponential family or one of its derivatives.

    Parameters
    ----------
    family : {"bernoulli", "poisson", "gaussian"}
    order : {0, 1, 2, 3}
        Derivative order.
    eta : float or ndarray
        Natural parameter(s).

    Returns
    -------
    float or ndarray
        ``b^(order)(eta)`` evaluated elementwise, overflow safe.
    """
    fam = _check_family(family)
    if order not in (0, 1, 2, 3):
        raise ConfigurationError(f"derivative order must be 0..3, got {order}")
    scalar = np.ndim(eta) == 0
    eta = np.asarray(eta, dtype=float)
    if fam == "bernoulli":
        if order == 0:
            out = np.logaddexp(0.0, eta)
        else:
            s = expit(eta)
            if order == 1:
                out = s
            elif order == 2:
                out = s * (1.0 - s)
            else:
                out = s * (1.0 - s) * (1.0 - 2.0 * s)
    elif fam == "poisson":
        out = _poisson_exp(eta)
    else:
        if order == 0:
            out = 0.5 * eta * eta
        elif order == 1:
            out = eta.copy()
        elif order == 2:
            out = np.ones_like(eta)
        else:
            out = np.zeros_like(eta)
    return float(out) if scalar else out


def cumulants(eta, families, orders=(0, 1, 2)):
    """Evaluate several cumulant derivatives with per-item families.

    ``eta`` has the item axis at position 1 (shape ``(N, J)`` or ``(N, J, T)``).
    Returns a tuple aligned with ``orders``.
    """
    eta = np.asarray(eta, dtype=float)
    fams = tuple(families)
    uniq = set(fams)
    if len(uniq) == 1:
        fam = fams[0]
        return tuple(family_b(fam, o, eta) for o in orders)
    outs = tuple(np.empty_like(eta) for _ in orders)
    for fam in uniq:
        cols = np.array([f == fam for f in fams])
        sub = eta[:, cols]
        for out, o in zip(outs, orders):
            out[:, cols] = family_b(fam, o, sub)
    return outs


# ---------------------------------------------------------------------------
# Data and specification containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    """Multivariate longitudinal responses with person-level missingness.

    ``responses[i, j, t]`` is ignored wherever ``missing[i, t] == 0``
    (``missing`` is the observation indicator r_it, 1 = observed).
    """

    responses: np.ndarray
    missing: np.ndarray
    covariates: np.ndarray | None = None
    time_covariates: np.ndarray | None = None
    family: tuple = "bernoulli"

    def __post_init__(self):
        y = np.asarray(self.responses, dtype=float)
        if y.ndim != 3:
            raise InputError(f"responses must be N x J x T, got shape {y.shape}")
        n, j, t = y.shape
        r = np.asarray(self.missing)
        if r.shape != (n, t):
            raise InputError(f"missing indicator must have shape {(n, t)}, got {r.shape}")
        if not np.all((r == 0) | (r == 1)):
            raise InputError("missing indicator entries must be 0 or 1")
        r = r.astype(float)
        if n and np.any(r.sum(axis=1) == 0):
            bad = int(np.flatnonzero(r.sum(axis=1) == 0)[0])
            raise InputError(f"person {bad} has no observed time point")
        x = np.zeros((n, 0)) if self.covariates is None else np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != n:
            raise InputError(f"covariates have {x.shape[0]} rows, expected {n}")
        z = self.time_covariates
        if z is not None:
            z = np.asarray(z, dtype=float)
            if z.ndim != 3 or z.shape[0] != n or z.shape[2] != t:
                raise InputError(f"time covariates must be N x p_z x T = ({n}, *, {t}), got {z.shape}")
            if not np.all(np.isfinite(z)):
                raise InputError("time covariates contain NaN or Inf")
        if not np.all(np.isfinite(x)):
            raise InputError("covariates contain NaN or Inf")
        fam = self.family
        if isinstance(fam, str):
            fam = (fam,) * j
        fam = tuple(_check_family(f) for f in fam)
        if len(fam) != j:
            raise InputError(f"family has {len(fam)} entries, expected {j}")
        obs = r.astype(bool)
        for f in set(fam):
            cols = np.array([g == f for g in fam])
            vals = y[:, cols, :].transpose(0, 2, 1)[obs]
            if not np.all(np.isfinite(vals)):
                raise InputError("responses contain NaN or Inf at observed cells")
            if f == "bernoulli" and not np.all((vals == 0) | (vals == 1)):
                raise InputError("Bernoulli responses must be 0 or 1")
            if f == "poisson" and not np.all((vals >= 0) & (vals == np.round(vals))):
                raise InputError("Poisson responses must be nonnegative integers")
        # unobserved cells carry no information; zero them so arithmetic stays finite
        y = np.where(obs[:, None, :], y, 0.0)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "missing", r)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "time_covariates", z)
        object.__setattr__(self, "family", fam)

    @property
    def n_persons(self):
        return self.responses.shape[0]

    @property
    def n_items(self):
        return self.responses.shape[1]

    @property
    def n_times(self):
        return self.responses.shape[2]

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    @property
    def n_time_covariates(self):
        return 0 if self.time_covariates is None else self.time_covariates.shape[1]

    def with_covariates(self, covariates, time_covariates=None):
        return replace(self, covariates=covariates, time_covariates=time_covariates)


@dataclass(frozen=True)
class ModelSpec:
    """Number of factors, model-variant switches and constraint radii."""

    n_factors: int
    time_varying_loadings: bool = False
    time_varying_coefficients: bool = False
    linear_intercept: bool = False
    use_time_covariates: bool = False
    c1: float = 5.0
    c2: float = 5.0

    def __post_init__(self):
        if int(self.n_factors) != self.n_factors or self.n_factors < 0:
            raise ConfigurationError(f"n_factors must be a nonnegative integer, got {self.n_factors}")
        if self.time_varying_coefficients and not self.time_varying_loadings:
            raise ConfigurationError("time-varying coefficients require time-varying loadings")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ConfigurationError("constraint radii c1, c2 must be positive")

    @classmethod
    def from_variant(cls, variant, n_factors, **kwargs):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
        return cls(n_factors=n_factors, **VARIANTS[variant], **kwargs)

    @property
    def variant(self):
        for name, flags in VARIANTS.items():
            if all(getattr(self, k) == flags.get(k, False) for k in
                   ("time_varying_loadings", "time_varying_coefficients",
                    "linear_intercept", "use_time_covariates")):
                return name
        return "custom"

    def with_factors(self, k):
        return replace(self, n_factors=int(k))


@dataclass(eq=False)
class ParameterSet:
    """Factor scores ``theta`` (N x K), item vectors ``item_params`` (J x P), scales (J,)."""

    theta: np.ndarray
    item_params: np.ndarray
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.item_params = np.asarray(self.item_params, dtype=float)
        if self.theta.ndim != 2 or self.item_params.ndim != 2:
            raise ConfigurationError("theta and item_params must be 2-D")
        if self.scale is None:
            self.scale = np.ones(self.item_params.shape[0])
        self.scale = np.asarray(self.scale, dtype=float)

    def copy(self):
        return ParameterSet(self.theta.copy(), self.item_params.copy(), self.scale.copy())


# ---------------------------------------------------------------------------
# Layout of u_j / e_it
# ---------------------------------------------------------------------------

class Layout:
    """Positions of gamma, beta, v and a inside the item vector ``u_j``."""

    def __init__(self, spec, n_times, n_covariates, n_time_covariates=0):
        self.spec = spec
        self.T = T = int(n_times)
        self.p = p = int(n_covariates)
        self.pz = pz = int(n_time_covariates) if spec.use_time_covariates else 0
        self.K = K = int(spec.n_factors)
        n_gamma = 1 if spec.linear_intercept else T
        n_beta = T * p if spec.time_varying_coefficients else p
        n_a = T * K if spec.time_varying_loadings else K
        start = 0
        self.gamma = slice(start, start + n_gamma)
        start += n_gamma
        self.beta = slice(start, start + n_beta)
        start += n_beta
        self.v = slice(start, start + pz)
        start += pz
        self.a = slice(start, start + n_a)
        start += n_a
        self.P = start
        self.q = 1 + p + pz + K
        self._index = [self._local_index(t) for t in range(T)]

    @classmethod
    def for_data(cls, spec, dataset):
        if spec.use_time_covariates and dataset.time_covariates is None:
            raise ConfigurationError("spec uses time covariates but the dataset has none")
        return cls(spec, dataset.n_times, dataset.n_covariates, dataset.n_time_covariates)

    def _local_index(self, t):
        s = self.spec
        g = self.gamma.start + (0 if s.linear_intercept else t)
        b0 = self.beta.start + (t * self.p if s.time_varying_coefficients else 0)
        a0 = self.a.start + (t * self.K if s.time_varying_loadings else 0)
        return np.concatenate([
            [g],
            np.arange(b0, b0 + self.p),
            np.arange(self.v.start, self.v.stop),
            np.arange(a0, a0 + self.K),
        ]).astype(np.intp)

    def index(self, t):
        """Positions in ``u_j`` of the local design columns at time ``t``."""
        return self._index[t]

    def intercept_value(self, t):
        return float(t + 1) if self.spec.linear_intercept else 1.0

    def local_design(self, dataset, theta, t, intercept_value=None):
        """Local design matrix (N x q) at time ``t``."""
        n = theta.shape[0]
        iv = self.intercept_value(t) if intercept_value is None else intercept_value
        cols = [np.full((n, 1), iv), dataset.covariates]
        if self.pz:
            cols.append(dataset.time_covariates[:, :, t])
        cols.append(theta)
        return np.hstack(cols)

    # -- views of the item matrix ------------------------------------------
    def beta_block(self, U, t=None):
        """Regression coefficients (J x p); requires ``t`` when time varying."""
        if self.spec.time_varying_coefficients:
            if t is None:
                return U[:, self.beta].reshape(U.shape[0], self.T, self.p)
            return U[:, self.beta.start + t * self.p: self.beta.start + (t + 1) * self.p]
        return U[:, self.beta]

    def loading_block(self, U, t=None):
        """Loadings (J x K); requires ``t`` when time varying."""
        if self.spec.time_varying_loadings:
            if t is None:
                return U[:, self.a].reshape(U.shape[0], self.T, self.K)
            return U[:, self.a.start + t * self.K: self.a.start + (t + 1) * self.K]
        return U[:, self.a]

    def intercepts(self, U):
        """Effective intercepts gamma_jt as a J x T matrix."""
        g = U[:, self.gamma]
        if self.spec.linear_intercept:
            return g * np.arange(1, self.T + 1)[None, :]
        return g.copy()

    def beta_positions(self, covariate_indices):
        """Positions in ``u_j`` of the coefficients of the given covariates (all t)."""
        cov = np.asarray(covariate_indices, dtype=np.intp)
        if self.spec.time_varying_coefficients:
            pos = [self.beta.start + t * self.p + cov for t in range(self.T)]
            return np.concatenate(pos)
        return self.beta.start + cov


def build_design_row(spec, dataset, theta_i, i, t):
    """Full design row ``e_it`` of length ``P`` for person ``i`` at time ``t``."""
    lay = Layout.for_data(spec, dataset)
    theta_i = np.asarray(theta_i, dtype=float).reshape(-1)
    if theta_i.size != lay.K:
        raise ConfigurationError(f"theta_i has {theta_i.size} entries, spec has K={lay.K}")
    if not 0 <= t < lay.T:
        raise ConfigurationError(f"time index {t} outside 0..{lay.T - 1}")
    if not np.all(np.isfinite(theta_i)):
        raise NumericError("theta_i is not finite")
    row = np.zeros(lay.P)
    local = [lay.intercept_value(t), *dataset.covariates[i]]
    if lay.pz:
        local.extend(dataset.time_covariates[i, :, t])
    local.extend(theta_i)
    row[lay.index(t)] = local
    return row


def check_params(layout, dataset, params):
    n, j = dataset.n_persons, dataset.n_items
    if params.theta.shape != (n, layout.K):
        raise ConfigurationError(f"theta has shape {params.theta.shape}, expected {(n, layout.K)}")
    if params.item_params.shape != (j, layout.P):
        raise ConfigurationError(
            f"item_params has shape {params.item_params.shape}, expected {(j, layout.P)}")
    if params.scale.shape != (j,):
        raise ConfigurationError(f"scale has shape {params.scale.shape}, expected {(j,)}")


def natural_params_all(layout, dataset, theta, U):
    """All natural parameters as an N x J x T array."""
    n, T = theta.shape[0], layout.T
    eta = np.empty((n, U.shape[0], T))
    for t in range(T):
        eta[:, :, t] = layout.local_design(dataset, theta, t) @ U[:, layout.index(t)].T
    return eta


def predict_natural_params(spec, dataset, params, t):
    """Natural parameters at time ``t`` for every person and item (N x J)."""
    lay = Layout.for_data(spec, dataset)
    check_params(lay, dataset, params)
    if not 0 <= t < lay.T:
        raise ConfigurationError(f"time index {t} outside 0..{lay.T - 1}")
    return lay.local_design(dataset, params.theta, t) @ params.item_params[:, lay.index(t)].T


def loglik_cells(eta, dataset, scale):
    """Per-cell contributions r_it (y eta - b(eta)) / phi_j, shape N x J x T."""
    (b0,) = cumulants(eta, dataset.family, orders=(0,))
    val = (dataset.responses * eta - b0) / scale[None, :, None]
    return val * dataset.missing[:, None, :]


def _raise_nonfinite(eta, dataset):
    bad = ~np.isfinite(eta) & (dataset.missing[:, None, :] > 0)
    if np.any(bad):
        i, j, t = (int(v) for v in np.argwhere(bad)[0])
        raise NumericError(f"non-finite natural parameter at (i={i}, j={j}, t={t})")


def joint_loglik(spec, dataset, params):
    """Joint log-likelihood summed over observed cells (normalizing term excluded)."""
    lay = Layout.for_data(spec, dataset)
    check_params(lay, dataset, params)
    eta = natural_params_all(lay, dataset, params.theta, params.item_params)
    _raise_nonfinite(eta, dataset)
    return float(loglik_cells(eta, dataset, params.scale).sum())
