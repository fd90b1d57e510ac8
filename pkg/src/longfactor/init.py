"""Starting values: SVD-based algorithm for binary data and a random fallback."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from .errors import ConfigurationError, UnsupportedInitError
from .estimator import FitOptions, update_items
from .model import Layout, ParameterSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InitOptions:
    epsilon: float = 0.01
    target_k: int | None = None
    glm_iterations: int = 50
    glm_tol: float = 1e-10

    def __post_init__(self):
        if not 0 < self.epsilon < 0.5:
            raise ConfigurationError("epsilon must lie in (0, 0.5)")


def sign_matrix(responses, missing):
    """Entries 2y - 1 at observed cells and 0 elsewhere (N x J x T)."""
    return (2.0 * responses - 1.0) * missing[:, None, :]


def clipped_inverse_link(ltilde, epsilon):
    """Map truncated sign values to the logit scale with saturation at ``epsilon``."""
    ltilde = np.asarray(ltilde, dtype=float)
    lo, hi = logit(epsilon), logit(1.0 - epsilon)
    inner = np.clip(0.5 * (ltilde + 1.0), epsilon / 2.0, 1.0 - epsilon / 2.0)
    return np.where(ltilde < -1.0 + epsilon, lo,
                    np.where(ltilde > 1.0 - epsilon, hi, logit(inner)))


def _truncate(L, threshold, k):
    """Rank-``k~`` truncation, ``k~ = max(k + 1, #{sigma >= threshold})``."""
    n, m = L.shape
    if n >= m:
        Q, s, Ht = np.linalg.svd(L, full_matrices=False)
    else:
        # wide case: decompose the transpose and swap the singular vectors
        Hh, s, Qt = np.linalg.svd(L.T, full_matrices=False)
        Q, Ht = Qt.T, Hh.T
    above = int(np.sum(s >= threshold))
    if above == 0:
        log.info("no singular value reaches %.3g; truncating at rank %d", threshold, k + 1)
    rank = min(max(k + 1, above), s.size)
    return (Q[:, :rank] * s[:rank]) @ Ht[:rank]


def _leading_factors(M, k):
    n = M.shape[0]
    Q, s, Ht = np.linalg.svd(M, full_matrices=False)
    k_eff = min(k, s.size)
    theta = np.zeros((n, k))
    load = np.zeros((M.shape[1], k))
    theta[:, :k_eff] = np.sqrt(n) * Q[:, :k_eff]
    load[:, :k_eff] = Ht[:k_eff].T * s[:k_eff] / np.sqrt(n)
    return theta, load


def svd_init(spec, dataset, opts=InitOptions()):
    """SVD-based starting values for binary responses.

    Intercepts and factors come from a truncated SVD of the sign matrices;
    regression coefficients (and time-covariate effects) are then fitted item
    by item with everything else held fixed.
    """
    if any(f != "bernoulli" for f in dataset.family):
        raise UnsupportedInitError("SVD initialization requires all items to be Bernoulli")
    lay = Layout.for_data(spec, dataset)
    K = spec.n_factors if opts.target_k is None else int(opts.target_k)
    if K != spec.n_factors:
        raise ConfigurationError(f"target_k={K} disagrees with spec K={spec.n_factors}")
    N, J, T = dataset.responses.shape
    r = dataset.missing
    p_hat = r.mean(axis=0)
    signs = sign_matrix(dataset.responses, r)
    root = np.sqrt(max(N, J))
    eps = opts.epsilon

    if spec.time_varying_loadings:
        stacked = signs.transpose(0, 2, 1).reshape(N, T * J)
        tilde = _truncate(stacked, 2.0 * root * p_hat.mean(), K)
        M = clipped_inverse_link(tilde, eps).reshape(N, T, J).transpose(0, 2, 1)
    else:
        M = np.empty((N, J, T))
        for t in range(T):
            M[:, :, t] = clipped_inverse_link(_truncate(signs[:, :, t], 2.0 * root * p_hat[t], K), eps)

    times = np.arange(1, T + 1, dtype=float)
    if spec.linear_intercept:
        gamma = (M * times[None, None, :]).sum(axis=(0, 2)) / (N * np.sum(times ** 2))
        centred = M - gamma[None, :, None] * times[None, None, :]
    else:
        gamma = M.mean(axis=0)
        centred = M - gamma[None, :, :]

    U = np.zeros((J, lay.P))
    U[:, lay.gamma] = gamma.reshape(J, -1)
    if spec.time_varying_loadings:
        theta, load = _leading_factors(centred.transpose(0, 2, 1).reshape(N, T * J), K)
        # columns of the stacked matrix run over (t, j); regroup as (j, t, k)
        U[:, lay.a] = load.reshape(T, J, K).transpose(1, 0, 2).reshape(J, T * K)
    else:
        theta, load = _leading_factors(centred.mean(axis=2), K)
        U[:, lay.a] = load

    free = np.r_[np.arange(lay.beta.start, lay.beta.stop), np.arange(lay.v.start, lay.v.stop)]
    params = ParameterSet(theta, U)
    if free.size:
        params = _fit_coefficients(spec, lay, dataset, params, free, opts)
    return params


def _fit_coefficients(spec, lay, dataset, params, free, opts):
    """Per-item GLM for the listed positions of ``u_j`` with an offset."""
    fo = FitOptions()
    U = params.item_params
    prev = None
    for _ in range(opts.glm_iterations):
        U, _, f = update_items(spec, lay, dataset, params.theta, U, params.scale, fo, free=free)
        cur = float(f.sum())
        if prev is not None and abs(cur - prev) <= opts.glm_tol * (1.0 + abs(prev)):
            break
        prev = cur
    return ParameterSet(params.theta, U, params.scale)


def random_init(spec, dataset, seed=0):
    """Factor scores and loadings i.i.d. U[-0.5, 0.5]; all other entries zero."""
    lay = Layout.for_data(spec, dataset)
    rng = np.random.default_rng(seed)
    N, J = dataset.n_persons, dataset.n_items
    theta = rng.uniform(-0.5, 0.5, size=(N, lay.K))
    U = np.zeros((J, lay.P))
    U[:, lay.a] = rng.uniform(-0.5, 0.5, size=(J, lay.a.stop - lay.a.start))
    return ParameterSet(theta, U)


def initial_values(spec, dataset, seed=0, opts=InitOptions()):
    """SVD start when every item is binary, random start otherwise."""
    try:
        return svd_init(spec, dataset, opts)
    except UnsupportedInitError:
        log.info("falling back to random initialization")
        return random_init(spec, dataset, seed)
