"""Independent reference computations used by the tests.

Nothing here calls into the package's likelihood or gradient code, except
``numerical_gradients`` which only evaluates ``joint_loglik`` as a black box.
"""

import numpy as np
from scipy.optimize import minimize

from longfactor.model import ParameterSet, joint_loglik


def irls_logistic(X, y, iters=100, tol=1e-14):
    """Textbook iteratively reweighted least squares for logistic regression."""
    beta = np.zeros(X.shape[1])
    for _ in range(iters):
        mu = 1.0 / (1.0 + np.exp(-X @ beta))
        W = mu * (1 - mu)
        z = X @ beta + (y - mu) / W
        new = np.linalg.solve(X.T @ (W[:, None] * X), X.T @ (W * z))
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta


def grid_argmax(f, lo=-5.0, hi=5.0, step=1e-4):
    grid = np.arange(lo, hi + step / 2, step)
    vals = f(grid)
    return grid[int(np.argmax(vals))]


def numerical_gradients(spec, data, params, h=1e-5):
    """Central differences of the joint log-likelihood in every coordinate."""
    def f(theta, U):
        return joint_loglik(spec, data, ParameterSet(theta, U, params.scale))

    gU = np.zeros_like(params.item_params)
    for idx in np.ndindex(*gU.shape):
        Up, Um = params.item_params.copy(), params.item_params.copy()
        Up[idx] += h
        Um[idx] -= h
        gU[idx] = (f(params.theta, Up) - f(params.theta, Um)) / (2 * h)
    gT = np.zeros_like(params.theta)
    for idx in np.ndindex(*gT.shape):
        Tp, Tm = params.theta.copy(), params.theta.copy()
        Tp[idx] += h
        Tm[idx] -= h
        gT[idx] = (f(Tp, params.item_params) - f(Tm, params.item_params)) / (2 * h)
    return gU, gT


def _base_k1_loglik(y, r, theta, gamma, a):
    """Bernoulli log-likelihood of eta_ijt = gamma_jt + a_j theta_i, written out directly."""
    eta = gamma[None, :, :] + (theta[:, None] * a[None, :])[:, :, None]
    ll = y * eta - np.logaddexp(0.0, eta)
    return float((ll * r[:, None, :]).sum())


def slsqp_fit(y, r, theta0, gamma0, a0, c1=5.0, c2=5.0):
    """Maximize the K=1 base-model likelihood with a generic constrained optimizer.

    Parameters are ``theta`` (N), ``gamma`` (J x T) and ``a`` (J); item vectors
    are ``u_j = (gamma_j1..gamma_jT, a_j)`` with ``||u_j|| <= c2 sqrt(T + 1)`` and
    ``|theta_i| <= c1``.
    """
    N, J, T = y.shape

    def unpack(z):
        return z[:N], z[N:N + J * T].reshape(J, T), z[N + J * T:]

    def neg(z):
        th, g, a = unpack(z)
        return -_base_k1_loglik(y, r, th, g, a)

    def grad(z):
        th, g, a = unpack(z)
        eta = g[None, :, :] + (th[:, None] * a[None, :])[:, :, None]
        res = (y - 1.0 / (1.0 + np.exp(-eta))) * r[:, None, :]
        g_th = (res.sum(axis=2) * a[None, :]).sum(axis=1)
        g_g = res.sum(axis=0)
        g_a = (res.sum(axis=2) * th[:, None]).sum(axis=0)
        return -np.concatenate([g_th, g_g.ravel(), g_a])

    radius_u = c2 * np.sqrt(T + 1)

    def cons(z):
        th, g, a = unpack(z)
        return np.concatenate([c1 ** 2 - th ** 2, radius_u ** 2 - (g ** 2).sum(axis=1) - a ** 2])

    z0 = np.concatenate([theta0, gamma0.ravel(), a0])
    out = minimize(neg, z0, jac=grad, method="SLSQP",
                   constraints=[{"type": "ineq", "fun": cons}],
                   options={"maxiter": 5000, "ftol": 1e-12})
    return -out.fun, out


def normalization_residuals(spec, data, params):
    """Largest violation of each identifiability criterion, on a relative scale.

    Loadings are read from the first period's block when they vary over time.
    Returns a dict with entries ``orth`` (factors vs. covariates, and vs. the
    constant unless the intercept is linear), ``loadings`` (A'A/J - I) and
    ``diag`` (off-diagonal part of Theta'Theta/N), plus the diagonal itself.
    """
    from longfactor.model import Layout
    lay = Layout.for_data(spec, data)
    theta = params.theta
    N, K = theta.shape
    J = params.item_params.shape[0]
    cols = [] if spec.linear_intercept else [np.ones(N)]
    if data.covariates.shape[1]:
        cols += list(data.covariates.T)
    scale = 1.0 + np.abs(theta).max()
    orth = 0.0
    if cols:
        D = np.column_stack(cols)
        orth = np.abs(D.T @ theta).max() / (N * scale * (1.0 + np.abs(D).max()))
    a_cols = slice(lay.a.start, lay.a.start + K)
    A = params.item_params[:, a_cols]
    loadings = np.abs(A.T @ A / J - np.eye(K)).max()
    S = theta.T @ theta / N
    off = S - np.diag(np.diag(S))
    return {"orth": orth, "loadings": loadings,
            "diag": np.abs(off).max() / (1.0 + np.abs(S).max()), "diagonal": np.diag(S)}
