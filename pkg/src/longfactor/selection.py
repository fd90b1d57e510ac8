"""Choice of the number of factors by an information criterion."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, LongFactorError, NumericError
from .estimator import FitOptions, fit
from .init import InitOptions, initial_values
from .model import Layout, ParameterSet

log = logging.getLogger(__name__)


@dataclass
class SelectionResult:
    k_hat: int
    ic_values: dict
    fits: dict = field(repr=False)
    failed: tuple = ()


def penalty_lambda(spec, dataset):
    """Per-factor penalty ``max(N, J') * log(J * sum(r) / max(N, J'))``.

    ``J'`` is ``T J`` when loadings vary over time and ``J`` otherwise.
    """
    n_obs = float(dataset.missing.sum())
    if n_obs <= 0:
        raise ConfigurationError("no observed person-time cells")
    N, J, T = dataset.n_persons, dataset.n_items, dataset.n_times
    m = max(N, T * J if spec.time_varying_loadings else J)
    return m * np.log(J * n_obs / m)


def information_criterion(loglik, k, lam):
    return -2.0 * loglik + k * lam


def _fit_one(spec, dataset, opts, init_opts, seed):
    init = initial_values(spec, dataset, seed=seed, opts=init_opts)
    return fit(spec, dataset, init, opts)


def extend_start(spec, dataset, previous, init_opts=InitOptions(), seed=0):
    """Start for ``spec`` built from a fit with fewer factors.

    Existing parameters are kept, new loadings are zero and the new factor
    columns come from the usual starting values (clipped to ``[-c1, c1]``), so
    the starting likelihood equals the previous fit's.
    """
    lay = Layout.for_data(spec, dataset)
    k_old = previous.theta.shape[1]
    old = Layout.for_data(spec.with_factors(k_old), dataset)
    fresh = initial_values(spec, dataset, seed=seed, opts=init_opts)
    U = np.zeros((dataset.n_items, lay.P))
    for name in ("gamma", "beta", "v"):
        U[:, getattr(lay, name)] = previous.item_params[:, getattr(old, name)]
    blocks = dataset.n_times if spec.time_varying_loadings else 1
    for t in range(blocks):
        U[:, lay.a.start + t * lay.K:lay.a.start + t * lay.K + k_old] = \
            previous.item_params[:, old.a.start + t * k_old:old.a.start + (t + 1) * k_old]
    extra = np.clip(fresh.theta[:, k_old:], -spec.c1, spec.c1)
    return ParameterSet(np.hstack([previous.theta, extra]), U, previous.scale.copy())


def select_k(spec_template, dataset, candidates, opts=FitOptions(), init_opts=InitOptions(),
             seed=0, mapper=map, warm_start=False):
    """Fit every candidate ``K`` and minimize the criterion.

    By default each ``K`` starts from its own initial values and ``mapper``
    (possibly a parallel ``map``) runs the fits; the result does not depend on
    it.  With ``warm_start`` the fits run in increasing ``K``, each started
    from the previous one via ``extend_start``.  Ties go to the smaller ``K``.
    Candidates whose fit fails are dropped with a warning.
    """
    ks = sorted({int(k) for k in candidates})
    if not ks or ks[0] < 0:
        raise ConfigurationError("candidates must be a nonempty set of nonnegative integers")
    lam = penalty_lambda(spec_template, dataset)
    specs = [spec_template.with_factors(k) for k in ks]
    if warm_start:
        outcomes = _warm_chain(specs, dataset, opts, init_opts, seed)
    else:
        outcomes = list(mapper(_safe_fit, [(s, dataset, opts, init_opts, seed) for s in specs]))
    ic, fits, failed = {}, {}, []
    for k, out in zip(ks, outcomes):
        if isinstance(out, Exception):
            warnings.warn(f"fit with K={k} failed and is excluded: {out}", RuntimeWarning, stacklevel=2)
            failed.append(k)
            continue
        fits[k] = out
        ic[k] = information_criterion(out.loglik, k, lam)
    if not ic:
        raise NumericError(f"every candidate fit failed (K in {ks})")
    k_hat = min(ic, key=lambda k: (ic[k], k))
    log.info("IC values %s; selected K=%d", {k: round(v, 3) for k, v in ic.items()}, k_hat)
    return SelectionResult(k_hat, ic, fits, tuple(failed))


def _warm_chain(specs, dataset, opts, init_opts, seed):
    outcomes, prev = [], None
    for spec in specs:
        try:
            if prev is None:
                out = _fit_one(spec, dataset, opts, init_opts, seed)
            else:
                out = fit(spec, dataset, extend_start(spec, dataset, prev.params, init_opts, seed), opts)
                if out.loglik < prev.loglik - 1e-6 * abs(prev.loglik):
                    log.warning("K=%d log-likelihood %.6f fell below K=%d value %.6f",
                                spec.n_factors, out.loglik, prev.params.theta.shape[1], prev.loglik)
        except (LongFactorError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out, prev = exc, None
        else:
            prev = out
        outcomes.append(out)
    return outcomes


def _safe_fit(args):
    try:
        return _fit_one(*args)
    except (LongFactorError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return exc
