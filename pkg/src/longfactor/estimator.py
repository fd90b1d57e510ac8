"""Constrained joint maximum likelihood by alternating projected Newton steps.

One sweep updates every item vector ``u_j`` given the factor scores, then every
factor score ``theta_i`` given the new item vectors.  Each block takes a damped
Newton step, is projected back onto its norm ball and is accepted by monotone
backtracking, so the joint log-likelihood never decreases.

Item blocks are mutually independent given ``Theta`` (and person blocks given
``U``), so each half-sweep is evaluated for all blocks at once with batched
linear algebra; the result is identical to visiting the blocks one by one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError
from .model import (
    Layout,
    ParameterSet,
    check_params,
    cumulants,
    loglik_cells,
    natural_params_all,
)

log = logging.getLogger(__name__)

RIDGE_MAX = 1e-2


@dataclass(frozen=True)
class FitOptions:
    max_sweeps: int = 500
    rel_tol: float = 1e-7
    line_search_shrink: float = 0.5
    max_halvings: int = 30
    ridge: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ConfigurationError("rel_tol must be positive")
        if not 0 < self.line_search_shrink < 1:
            raise ConfigurationError("line_search_shrink must lie in (0, 1)")
        if self.max_sweeps < 0 or self.max_halvings < 0:
            raise ConfigurationError("max_sweeps and max_halvings must be nonnegative")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be nonnegative")


@dataclass
class FitResult:
    params: ParameterSet
    loglik: float
    sweeps_used: int
    converged: bool
    loglik_trace: np.ndarray = field(repr=False)


def prox(v, c):
    """Euclidean projection of ``v`` onto the ball of radius ``c``."""
    if not c > 0:
        raise ConfigurationError("projection radius must be positive")
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(v)
    if nrm <= c:
        return v.copy()
    return v * (c / nrm)


def prox_rows(M, c):
    """Row-wise :func:`prox`."""
    nrm = np.linalg.norm(M, axis=1)
    scale = np.where(nrm > c, c / np.where(nrm > 0, nrm, 1.0), 1.0)
    return M * scale[:, None]


def item_radius(spec, layout):
    return spec.c2 * np.sqrt(layout.P)


def person_radius(spec):
    return spec.c1 * np.sqrt(spec.n_factors)


# ---------------------------------------------------------------------------
# Gradients and Hessians
# ---------------------------------------------------------------------------

def _weights(eta, dataset, scale, items=slice(None)):
    fam = np.asarray(dataset.family, dtype=object)[items]
    mu, w = cumulants(eta, fam, orders=(1, 2))
    r = dataset.missing[:, None, :]
    phi = scale[items][None, :, None]
    resid = (dataset.responses[:, items, :] - mu) * r / phi
    return resid, w * r / phi


def item_gradient_hessian(layout, dataset, theta, U, scale, items=slice(None)):
    """Gradient and negated Hessian of each item block.

    Returns ``G`` (J x P) and ``H`` (J x P x P) with ``H`` positive
    semi-definite; the block Hessian of the log-likelihood is ``-H``.
    """
    Us = U[items]
    nj, P = Us.shape
    eta = np.empty((theta.shape[0], nj, layout.T))
    designs = []
    for t in range(layout.T):
        Lt = layout.local_design(dataset, theta, t)
        designs.append(Lt)
        eta[:, :, t] = Lt @ Us[:, layout.index(t)].T
    resid, W = _weights(eta, dataset, scale, items)
    G = np.zeros((nj, P))
    H = np.zeros((nj, P, P))
    q = layout.q
    for t, Lt in enumerate(designs):
        obs = dataset.missing[:, t] > 0
        if not obs.any():
            continue
        L = Lt[obs]
        idx = layout.index(t)
        G[:, idx] += resid[obs, :, t].T @ L
        outer = (L[:, :, None] * L[:, None, :]).reshape(L.shape[0], q * q)
        H[:, idx[:, None], idx[None, :]] += (W[obs, :, t].T @ outer).reshape(nj, q, q)
    return G, H


def person_gradient_hessian(layout, dataset, theta, U, scale, persons=slice(None)):
    """Gradient (N x K) and negated Hessian (N x K x K) of each person block."""
    th = theta[persons]
    K = layout.K
    sub = _subset_dataset_rows(dataset, persons)
    eta = natural_params_all(layout, sub, th, U)
    resid, W = _weights(eta, sub, scale)
    g = np.zeros((th.shape[0], K))
    H = np.zeros((th.shape[0], K, K))
    for t in range(layout.T):
        A = layout.loading_block(U, t)
        g += resid[:, :, t] @ A
        H += (W[:, :, t] @ (A[:, :, None] * A[:, None, :]).reshape(A.shape[0], K * K)).reshape(-1, K, K)
    return g, H


class _RowView:
    """Lightweight stand-in for a Dataset restricted to a subset of persons."""

    def __init__(self, dataset, rows):
        self.responses = dataset.responses[rows]
        self.missing = dataset.missing[rows]
        self.covariates = dataset.covariates[rows]
        self.time_covariates = None if dataset.time_covariates is None else dataset.time_covariates[rows]
        self.family = dataset.family


def _subset_dataset_rows(dataset, rows):
    if isinstance(rows, slice) and rows == slice(None):
        return dataset
    return _RowView(dataset, rows)


def newton_directions(H, G, ridge):
    """Solve ``(H + ridge I) d = G`` for a batch of blocks.

    The ridge is escalated tenfold up to 1e-2 for blocks whose solve fails; a
    block that still fails falls back to the gradient direction.
    """
    nb, P = G.shape
    if P == 0:
        return G.copy()
    eye = np.eye(P)
    try:
        d = np.linalg.solve(H + ridge * eye, G[..., None])[..., 0]
        if np.all(np.isfinite(d)):
            return d
    except np.linalg.LinAlgError:
        pass
    d = np.empty_like(G)
    for b in range(nb):
        lam = ridge
        while True:
            try:
                db = np.linalg.solve(H[b] + lam * eye, G[b])
                if np.all(np.isfinite(db)):
                    d[b] = db
                    break
            except np.linalg.LinAlgError:
                pass
            if lam >= RIDGE_MAX:
                log.warning("Newton solve failed for block %d; using gradient direction", b)
                d[b] = G[b]
                break
            lam = min(max(lam * 10.0, 1e-12), RIDGE_MAX)
    return d


# ---------------------------------------------------------------------------
# Half sweeps
# ---------------------------------------------------------------------------

def item_objective(layout, dataset, designs, Us, scale, items):
    """Per-item log-likelihood for item vectors ``Us`` of the listed items."""
    fam = np.asarray(dataset.family, dtype=object)[items]
    y = dataset.responses[:, items, :]
    out = np.zeros(Us.shape[0])
    for t, Lt in enumerate(designs):
        eta = Lt @ Us[:, layout.index(t)].T
        (b0,) = cumulants(eta, fam, orders=(0,))
        out += ((y[:, :, t] * eta - b0) * dataset.missing[:, t][:, None]).sum(axis=0)
    return out / scale[items]


def _line_search(objective, x0, d, f0, radius, opts):
    """Backtracking along ``prox(x0 + alpha d)`` for a batch of blocks.

    ``objective(cand, k)`` evaluates the blocks with row indices ``k``.  The
    first ``alpha`` that does not lower a block's objective is accepted.
    """
    x_new = x0.copy()
    f_new = f0.copy()
    pending = np.ones(x0.shape[0], bool)
    alpha = 1.0
    for _ in range(opts.max_halvings + 1):
        k = np.flatnonzero(pending)
        cand = prox_rows(x0[k] + alpha * d[k], radius)
        f = objective(cand, k)
        ok = np.isfinite(f) & (f >= f0[k])
        x_new[k[ok]] = cand[ok]
        f_new[k[ok]] = f[ok]
        pending[k[ok]] = False
        if not pending.any():
            break
        alpha *= opts.line_search_shrink
    return x_new, f_new


def ball_newton_point(x0, G, H, radius, ridge, iters=100):
    """Maximizer of the local quadratic model over the ball ``||x|| <= radius``.

    The model is ``G'(x - x0) - (x - x0)'H(x - x0)/2``; its constrained optimum
    is ``x = (H + lam I)^{-1}(H x0 + G)`` with the smallest ``lam >= 0`` that
    puts ``x`` inside the ball, found by bisection on the secular equation.
    """
    P = x0.shape[1]
    w, V = np.linalg.eigh(H + ridge * np.eye(P))
    w = np.maximum(w, 0.0)
    rhs = np.einsum("bpq,bq->bp", H, x0) + G
    beta = np.einsum("bpk,bp->bk", V, rhs)

    def norm2(lam):
        return np.sum((beta / (w + lam[:, None])) ** 2, axis=1)

    lo = np.zeros(x0.shape[0])
    hi = np.linalg.norm(beta, axis=1) / radius + 1e-300
    inside = norm2(np.zeros_like(lo) + 1e-300) <= radius ** 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        big = norm2(mid) > radius ** 2
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
    lam = np.where(inside, 0.0, hi)
    x = np.einsum("bpk,bk->bp", V, beta / (w + lam[:, None]))
    return prox_rows(x, radius)


def _projected_step(objective, x0, G, H, f0, radius, opts, d=None):
    """Damped Newton step kept inside the ball, with backtracking.

    When the full Newton point lies outside the ball, the step targets the
    maximizer of the quadratic model over the ball instead of the Euclidean
    projection of the Newton point; the latter need not be an ascent move
    for blocks on the boundary.  Blocks that still fail to improve retry along
    the projected gradient.
    """
    if d is None:
        d = newton_directions(H, G, opts.ridge)
    outside = np.linalg.norm(x0 + d, axis=1) > radius
    if outside.any():
        idx = np.flatnonzero(outside)
        d = d.copy()
        d[idx] = ball_newton_point(x0[idx], G[idx], H[idx], radius, opts.ridge) - x0[idx]
    x_new, f_new = _line_search(objective, x0, d, f0, radius, opts)
    stuck = np.flatnonzero(~(f_new > f0) & np.any(G != 0, axis=1))
    if stuck.size:
        lip = np.trace(H[stuck], axis1=1, axis2=2) + opts.ridge
        lip = np.where(lip > 0, lip, 1.0)
        dg = G[stuck] / lip[:, None]
        xg, fg = _line_search(lambda cand, k: objective(cand, stuck[k]), x0[stuck], dg, f0[stuck],
                              radius, opts)
        better = fg > f_new[stuck]
        x_new[stuck[better]] = xg[better]
        f_new[stuck[better]] = fg[better]
    return x_new, f_new


def update_items(spec, layout, dataset, theta, U, scale, opts, items=None, free=None):
    """One projected Newton step with backtracking for each listed item.

    ``free`` optionally restricts the step to a subset of positions of
    ``u_j``; the remaining coordinates are held fixed.

    Returns the new item matrix, a boolean ``improved`` flag per listed item
    and the per-item objective after the step.
    """
    items = np.arange(U.shape[0]) if items is None else np.asarray(items, dtype=np.intp)
    U_new = U.copy()
    if items.size == 0:
        return U_new, np.zeros(0, bool), np.zeros(0)
    c = item_radius(spec, layout)
    G, H = item_gradient_hessian(layout, dataset, theta, U, scale, items)
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite item gradient")
    if free is not None:
        free = np.asarray(free, dtype=np.intp)
        fixed = np.setdiff1d(np.arange(layout.P), free)
        G[:, fixed] = 0.0
        H[:, fixed, :] = 0.0
        H[:, :, fixed] = 0.0
        d = np.zeros_like(G)
        d[:, free] = newton_directions(H[:, free[:, None], free[None, :]], G[:, free], opts.ridge)
    else:
        d = None
    designs = [layout.local_design(dataset, theta, t) for t in range(layout.T)]
    U0 = U[items]
    f0 = item_objective(layout, dataset, designs, U0, scale, items)

    def objective(cand, k):
        return item_objective(layout, dataset, designs, cand, scale, items[k])

    U_items, f_new = _projected_step(objective, U0, G, H, f0, c, opts, d)
    U_new[items] = U_items
    return U_new, f_new > f0, f_new


def _person_objective(dataset, offsets, loadings, th, scale, persons):
    y = dataset.responses[persons]
    r = dataset.missing[persons]
    out = np.zeros(th.shape[0])
    for t, (off, A) in enumerate(zip(offsets, loadings)):
        eta = off[persons] + th @ A.T
        (b0,) = cumulants(eta, dataset.family, orders=(0,))
        out += (((y[:, :, t] * eta - b0) / scale[None, :]) * r[:, t][:, None]).sum(axis=1)
    return out


def update_persons(spec, layout, dataset, theta, U, scale, opts, persons=None):
    """One projected Newton step with backtracking for each listed person."""
    n = theta.shape[0]
    persons = np.arange(n) if persons is None else np.asarray(persons, dtype=np.intp)
    th_new = theta.copy()
    if layout.K == 0 or persons.size == 0:
        return th_new, np.zeros(persons.size, bool), np.zeros(persons.size)
    c = person_radius(spec)
    g, H = person_gradient_hessian(layout, dataset, theta, U, scale, persons)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite person gradient")
    loadings = [layout.loading_block(U, t) for t in range(layout.T)]
    eta = natural_params_all(layout, dataset, theta, U)
    offsets = [eta[:, :, t] - theta @ A.T for t, A in enumerate(loadings)]
    th0 = theta[persons]
    f0 = _person_objective(dataset, offsets, loadings, th0, scale, persons)

    def objective(cand, k):
        return _person_objective(dataset, offsets, loadings, cand, scale, persons[k])

    th_p, f_new = _projected_step(objective, th0, g, H, f0, c, opts)
    th_new[persons] = th_p
    return th_new, f_new > f0, f_new


def item_block_update(spec, dataset, params, j, opts=FitOptions()):
    """Update the single item vector ``u_j`` with ``Theta`` held fixed."""
    lay = Layout.for_data(spec, dataset)
    check_params(lay, dataset, params)
    U, improved, _ = update_items(spec, lay, dataset, params.theta, params.item_params,
                                  params.scale, opts, items=[j])
    return U[j], bool(improved[0])


def person_block_update(spec, dataset, params, i, opts=FitOptions()):
    """Update the single factor score ``theta_i`` with the item vectors fixed."""
    lay = Layout.for_data(spec, dataset)
    check_params(lay, dataset, params)
    th, improved, _ = update_persons(spec, lay, dataset, params.theta, params.item_params,
                                     params.scale, opts, persons=[i])
    return th[i], bool(improved[0]) if improved.size else False


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _update_gaussian_scale(layout, dataset, theta, U, scale):
    gauss = np.array([f == "gaussian" for f in dataset.family])
    if not gauss.any():
        return scale
    eta = natural_params_all(layout, dataset, theta, U)
    r = dataset.missing[:, None, :]
    sq = ((dataset.responses - eta) ** 2 * r).sum(axis=(0, 2))
    n_obs = dataset.missing.sum()
    out = scale.copy()
    out[gauss] = np.maximum(sq[gauss] / n_obs, 1e-12)
    return out


def fit(spec, dataset, init, opts=FitOptions()):
    """Maximize the joint log-likelihood under the norm-ball constraints.

    Parameters
    ----------
    spec : ModelSpec
    dataset : Dataset
    init : ParameterSet
        Starting values, typically from :func:`longfactor.init.svd_init`.
        They are projected onto the feasible set before the first sweep.
    opts : FitOptions

    Returns
    -------
    FitResult
    """
    lay = Layout.for_data(spec, dataset)
    check_params(lay, dataset, init)
    theta = init.theta.copy()
    if lay.K:
        theta = prox_rows(theta, person_radius(spec))
    U = prox_rows(init.item_params.copy(), item_radius(spec, lay))
    scale = init.scale.copy()

    def total(theta_, U_, scale_):
        eta = natural_params_all(lay, dataset, theta_, U_)
        return float(loglik_cells(eta, dataset, scale_).sum())

    prev = total(theta, U, scale)
    if not np.isfinite(prev):
        raise NumericError("log-likelihood at the starting values is not finite")
    trace = [prev]
    converged = False
    sweep = 0
    for sweep in range(1, opts.max_sweeps + 1):
        try:
            U, _, f_items = update_items(spec, lay, dataset, theta, U, scale, opts)
            if lay.K:
                theta, _, f_persons = update_persons(spec, lay, dataset, theta, U, scale, opts)
                cur = float(f_persons.sum())
            else:
                cur = float(f_items.sum())
        except NumericError as exc:
            raise NumericError(f"sweep {sweep}: {exc}") from exc
        trace.append(cur)
        done = abs(cur - prev) <= opts.rel_tol * (1.0 + abs(prev))
        new_scale = _update_gaussian_scale(lay, dataset, theta, U, scale)
        if new_scale is not scale:
            scale = new_scale
            cur = total(theta, U, scale)
        prev = cur
        if done:
            converged = True
            break
    else:
        sweep = opts.max_sweeps
    if not converged:
        log.warning("fit stopped after %d sweeps without meeting rel_tol=%g", sweep, opts.rel_tol)
    params = ParameterSet(theta, U, scale)
    return FitResult(params, total(theta, U, scale), sweep, converged, np.asarray(trace))
