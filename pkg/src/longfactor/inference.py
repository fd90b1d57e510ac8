"""Asymptotic covariance of item parameters, Wald tests, BY adjustment and a
permutation test for the overall covariate effect."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .errors import ConfigurationError, LongFactorError, NumericError
from .estimator import FitOptions, fit, item_gradient_hessian, person_gradient_hessian
from .init import InitOptions, initial_values
from .model import Dataset, Layout, check_params
from .normalize import normalize_full

log = logging.getLogger(__name__)

SINGULAR_TOL = 1e-10
MAX_DROP_FRACTION = 0.1


def phi_hat_all(spec, dataset, params):
    """Average information matrices for every item, shape J x P x P (negative definite)."""
    lay = Layout.for_data(spec, dataset)
    check_params(lay, dataset, params)
    _, H = item_gradient_hessian(lay, dataset, params.theta, params.item_params, params.scale)
    return -H / dataset.n_persons


def phi_hat(spec, dataset, params, j):
    """Average information matrix of item ``j`` (P x P)."""
    lay = Layout.for_data(spec, dataset)
    check_params(lay, dataset, params)
    _, H = item_gradient_hessian(lay, dataset, params.theta, params.item_params, params.scale, items=[j])
    return -H[0] / dataset.n_persons


def _inverse_negated(phi):
    """``(-phi)^{-1}`` for one matrix or a stack, refusing near-singular input."""
    neg = -np.asarray(phi, dtype=float)
    neg = 0.5 * (neg + np.swapaxes(neg, -1, -2))
    w = np.linalg.eigvalsh(neg)
    lo = w[..., 0]
    hi = np.maximum(np.abs(w[..., -1]), 1.0)
    bad = lo <= SINGULAR_TOL * hi
    if np.any(bad):
        k = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise NumericError(
            f"information matrix is near-singular (block {k}, smallest eigenvalue "
            f"{float(np.atleast_1d(lo)[k]):.3e})")
    inv = np.linalg.inv(neg)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def sigma_E(phi, layout):
    """Coefficient block of ``(-phi)^{-1}``; works on one matrix or a stack."""
    inv = _inverse_negated(phi)
    return inv[..., layout.beta, layout.beta]


def wald_test(beta_hat_sub, sigma_sub, n):
    """``n * b' S^{-1} b`` and its chi-square survival probability."""
    b = np.atleast_1d(np.asarray(beta_hat_sub, dtype=float))
    S = np.atleast_2d(np.asarray(sigma_sub, dtype=float))
    if S.shape != (b.size, b.size):
        raise ConfigurationError(f"sigma has shape {S.shape}, expected {(b.size, b.size)}")
    try:
        L = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        raise NumericError("covariance matrix of the tested coefficients is not positive definite") from None
    z = np.linalg.solve(L, b)
    stat = float(n * z @ z)
    return stat, float(chi2.sf(stat, b.size))


def by_adjust(p_values):
    """Benjamini-Yekutieli adjusted p-values (step-up, arbitrary dependence)."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ConfigurationError("p-values must lie in [0, 1]")
    m = p.size
    cm = np.sum(1.0 / np.arange(1, m + 1))
    order = np.argsort(p, kind="stable")
    scaled = m * cm * p[order] / np.arange(1, m + 1)
    adj = np.minimum(1.0, np.minimum.accumulate(scaled[::-1])[::-1])
    out = np.empty(m)
    out[order] = adj
    return out


@dataclass
class InferenceReport:
    """Item-level inference on the regression coefficients.

    ``beta`` holds each item's coefficient block (J x q); ``sigma_E`` the
    matching asymptotic covariances (J x q x q) of ``sqrt(N)(beta_hat - beta)``.
    Hypothesis results are keyed by hypothesis name, each an array over items.
    """

    n: int
    beta: np.ndarray
    sigma_E: np.ndarray = field(repr=False)
    hypotheses: dict = field(default_factory=dict)
    wald_stats: dict = field(default_factory=dict)
    p_values: dict = field(default_factory=dict)
    adj_p_values: dict = field(default_factory=dict)

    @property
    def beta_se(self):
        return np.sqrt(np.diagonal(self.sigma_E, axis1=1, axis2=2) / self.n)

    def confidence_intervals(self, z=1.959963984540054):
        se = self.beta_se
        return self.beta - z * se, self.beta + z * se

    def rejections(self, name, level=0.05):
        return self.adj_p_values[name] <= level


def default_hypotheses(n_covariates):
    return {f"x{l + 1}": (l,) for l in range(n_covariates)}


def infer(spec, dataset, params, hypotheses=None):
    """Covariances, Wald statistics and BY-adjusted p-values for every item.

    ``hypotheses`` maps a name to a tuple of covariate indices whose
    coefficients are jointly tested to be zero (all time points when
    coefficients vary over time).  Each hypothesis is adjusted across items.
    """
    lay = Layout.for_data(spec, dataset)
    if lay.p == 0:
        raise ConfigurationError("inference on coefficients requires covariates")
    hypotheses = default_hypotheses(lay.p) if hypotheses is None else dict(hypotheses)
    N = dataset.n_persons
    sig = sigma_E(phi_hat_all(spec, dataset, params), lay)
    beta = params.item_params[:, lay.beta]
    rep = InferenceReport(N, beta, sig, hypotheses)
    for name, cov in hypotheses.items():
        cov = tuple(int(c) for c in cov)
        if not cov or min(cov) < 0 or max(cov) >= lay.p:
            raise ConfigurationError(f"hypothesis {name!r} references unknown covariates {cov}")
        pos = lay.beta_positions(list(cov)) - lay.beta.start
        stats = np.empty(beta.shape[0])
        pv = np.empty(beta.shape[0])
        for j in range(beta.shape[0]):
            stats[j], pv[j] = wald_test(beta[j, pos], sig[j][np.ix_(pos, pos)], N)
        rep.wald_stats[name] = stats
        rep.p_values[name] = pv
        rep.adj_p_values[name] = by_adjust(pv)
    return rep


def factor_standard_errors(spec, dataset, params):
    """Experimental standard errors of loadings (J x K') and factor scores (N x K).

    Loadings use the loading block of ``(-Phi_j)^{-1} / N``; scores use
    ``(-Psi_i)^{-1} / J`` with ``Psi_i`` the per-person average information.
    """
    lay = Layout.for_data(spec, dataset)
    N, J = dataset.n_persons, dataset.n_items
    inv = _inverse_negated(phi_hat_all(spec, dataset, params))
    a_se = np.sqrt(np.diagonal(inv[:, lay.a, lay.a], axis1=1, axis2=2) / N)
    if lay.K == 0:
        return a_se, np.zeros((N, 0))
    _, Hp = person_gradient_hessian(lay, dataset, params.theta, params.item_params, params.scale)
    inv_p = _inverse_negated(-Hp / J)
    t_se = np.sqrt(np.diagonal(inv_p, axis1=1, axis2=2) / J)
    return a_se, t_se


# ---------------------------------------------------------------------------
# Permutation test
# ---------------------------------------------------------------------------

def _fit_normalized(spec, dataset, opts, init_opts, seed):
    init = initial_values(spec, dataset, seed=seed, opts=init_opts)
    res = fit(spec, dataset, init, opts)
    params, _ = normalize_full(spec, res.params, dataset)
    return params


def coefficient_norm(spec, dataset, params):
    lay = Layout.for_data(spec, dataset)
    return float(np.linalg.norm(params.item_params[:, lay.beta]))


def _perm_worker(args):
    spec, dataset, opts, init_opts, seed, l = args
    rng = np.random.default_rng([int(seed), int(l)])
    perm = rng.permutation(dataset.n_persons)
    z = None if dataset.time_covariates is None else dataset.time_covariates[perm]
    shuffled = Dataset(dataset.responses, dataset.missing, dataset.covariates[perm], z, dataset.family)
    try:
        params = _fit_normalized(spec, shuffled, opts, init_opts, seed + l)
    except LongFactorError as exc:
        return exc
    return coefficient_norm(spec, shuffled, params)


def permutation_test_B(spec, dataset, opts=FitOptions(), n_perm=100, seed=0,
                       init_opts=InitOptions(), mapper=map):
    """Permutation test of ``||B||_F`` with covariate rows shuffled across persons.

    Returns the observed statistic, the add-one p-value and the null draws.
    """
    if n_perm < 1:
        raise ConfigurationError("n_perm must be at least 1")
    observed = coefficient_norm(spec, dataset, _fit_normalized(spec, dataset, opts, init_opts, seed))
    jobs = [(spec, dataset, opts, init_opts, seed, l) for l in range(1, n_perm + 1)]
    null, dropped = [], 0
    for l, out in enumerate(mapper(_perm_worker, jobs), start=1):
        if isinstance(out, Exception):
            warnings.warn(f"permutation {l} failed and is dropped: {out}", RuntimeWarning, stacklevel=2)
            dropped += 1
        else:
            null.append(out)
    if dropped >= MAX_DROP_FRACTION * n_perm:
        raise NumericError(f"{dropped} of {n_perm} permutation fits failed")
    null = np.asarray(null)
    p = (1.0 + np.sum(null >= observed)) / (1.0 + null.size)
    return observed, float(p), null
