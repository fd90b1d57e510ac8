"""Identifiability transforms that leave every natural parameter unchanged.

``normalize_beta_only`` enforces only ``Theta' X = 0``.  ``normalize_full``
additionally centres the factors (unless the intercept is linear in time),
makes ``A'A / J`` the identity and ``Theta'Theta / N`` diagonal with
non-increasing entries.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, RankDeficiencyError
from .model import Dataset, Layout, ParameterSet

EIG_FLOOR = 1e-12
EIGENGAP_TOL = 1e-10


def _resolve(spec, params, covariates, n_times, n_time_covariates):
    if isinstance(covariates, Dataset):
        lay = Layout.for_data(spec, covariates)
        X = covariates.covariates
    else:
        X = np.zeros((params.theta.shape[0], 0)) if covariates is None else np.asarray(covariates, float)
        if X.ndim == 1:
            X = X[:, None]
        if n_times is None:
            raise ConfigurationError("n_times is required when covariates are given as an array")
        lay = Layout(spec, n_times, X.shape[1], n_time_covariates)
    if params.item_params.shape[1] != lay.P:
        raise ConfigurationError(
            f"item_params have {params.item_params.shape[1]} columns, layout expects {lay.P}")
    if spec.time_varying_loadings and not spec.time_varying_coefficients and X.shape[1]:
        raise ConfigurationError(
            "time-varying loadings with static coefficients cannot absorb Theta's covariate component")
    return lay, X


def _projection_coefficients(D, theta, names):
    """Least-squares coefficients of ``theta`` on the columns of ``D``."""
    if D.shape[1] == 0:
        return np.zeros((0, theta.shape[1]))
    _, R, piv = scipy.linalg.qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(D.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < D.shape[1]:
        bad = [names[k] for k in sorted(piv[rank:])]
        raise RankDeficiencyError(f"design is rank deficient; dependent column(s): {', '.join(bad)}")
    return np.linalg.solve(D.T @ D, D.T @ theta)


def _absorb(lay, U, C, with_intercept):
    """Move ``D C`` from the factor term into intercepts and coefficients."""
    U = U.copy()
    T = lay.T
    for t in range(T if lay.spec.time_varying_loadings else 1):
        A = lay.loading_block(U, t if lay.spec.time_varying_loadings else None)
        shift = A @ C.T  # J x (1 + p) or J x p
        if with_intercept:
            gcols = [lay.gamma.start + t] if lay.spec.time_varying_loadings else \
                list(range(lay.gamma.start, lay.gamma.stop))
            U[:, gcols] += shift[:, [0]]
            shift = shift[:, 1:]
        if lay.p:
            if lay.spec.time_varying_coefficients:
                b0 = lay.beta.start + t * lay.p
                U[:, b0:b0 + lay.p] += shift
            else:
                U[:, lay.beta] += shift
    return U


def normalize_beta_only(spec, params, covariates, n_times=None, n_time_covariates=0):
    """Enforce ``Theta' X = 0`` by moving the covariate part of ``Theta`` into ``B``."""
    lay, X = _resolve(spec, params, covariates, n_times, n_time_covariates)
    if X.shape[1] == 0 or lay.K == 0:
        return params.copy()
    names = [f"x{k + 1}" for k in range(X.shape[1])]
    C = _projection_coefficients(X, params.theta, names)
    theta = params.theta - X @ C
    U = _absorb(lay, params.item_params, C, with_intercept=False)
    return ParameterSet(theta, U, params.scale.copy())


def _sym_sqrt(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    w = np.maximum(w, EIG_FLOOR)
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def normalize_full(spec, params, covariates, n_times=None, n_time_covariates=0):
    """Apply the full set of identifiability criteria.

    Returns the normalized parameters and the rotation ``H`` (K x K) with
    ``Theta_hat = Theta_tilde H^{-1}`` and ``A_hat = A H'``.
    """
    lay, X = _resolve(spec, params, covariates, n_times, n_time_covariates)
    K = lay.K
    N = params.theta.shape[0]
    J = params.item_params.shape[0]
    if K == 0:
        return params.copy(), np.zeros((0, 0))
    with_intercept = not spec.linear_intercept
    if with_intercept:
        D = np.hstack([np.ones((N, 1)), X])
        names = ["intercept"] + [f"x{k + 1}" for k in range(X.shape[1])]
    else:
        D = X
        names = [f"x{k + 1}" for k in range(X.shape[1])]
    C = _projection_coefficients(D, params.theta, names)
    theta_t = params.theta - D @ C
    U = _absorb(lay, params.item_params, C, with_intercept) if D.shape[1] else params.item_params.copy()

    tv = spec.time_varying_loadings
    A1 = lay.loading_block(U, 0 if tv else None)
    s_half, s_mhalf = _sym_sqrt(A1.T @ A1 / J)
    sigma_nt = theta_t.T @ theta_t / N
    inner = s_half @ sigma_nt @ s_half
    d, Q = np.linalg.eigh(0.5 * (inner + inner.T))
    order = np.argsort(d)[::-1]
    d, Q = d[order], Q[:, order]
    if K > 1 and np.min(-np.diff(d)) < EIGENGAP_TOL:
        warnings.warn("eigengap below tolerance; factors are not individually identified",
                      RuntimeWarning, stacklevel=2)
    H = Q.T @ s_mhalf
    H_inv = s_half @ Q
    theta_hat = theta_t @ H_inv
    # sign: largest-magnitude loading of each factor positive
    A1_hat = A1 @ H.T
    lead = A1_hat[np.argmax(np.abs(A1_hat), axis=0), np.arange(K)]
    flip = np.where(lead < 0, -1.0, 1.0)
    H = H * flip[:, None]
    theta_hat = theta_hat * flip[None, :]
    if tv:
        for t in range(lay.T):
            sl = slice(lay.a.start + t * K, lay.a.start + (t + 1) * K)
            U[:, sl] = U[:, sl] @ H.T
    else:
        U[:, lay.a] = U[:, lay.a] @ H.T
    return ParameterSet(theta_hat, U, params.scale.copy()), H
