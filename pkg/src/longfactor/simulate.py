"""Synthetic longitudinal binary data with known truth, and evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, LongFactorError
from .model import Dataset, Layout, ModelSpec, ParameterSet, VARIANTS, natural_params_all
from .normalize import normalize_full

log = logging.getLogger(__name__)

# hypothesis families over the five simulated covariates
FAMILIES = ((0, 1), (2, 3), (4,))
N_COVARIATES = 5


@dataclass(frozen=True)
class SimConfig:
    J: int = 100
    N: int = 500
    T: int = 4
    K_star: int = 3
    n_reps: int = 20
    seed: int = 0
    variant: str = "base"
    candidates: tuple = tuple(range(1, 11))
    baseline: bool = False
    select: bool = True

    def __post_init__(self):
        for name in ("J", "N", "T", "K_star", "n_reps"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.K_star > min(self.N, self.J):
            raise ConfigurationError("K_star must not exceed min(N, J)")
        if self.variant not in VARIANTS or self.variant == "timecov":
            raise ConfigurationError(f"unsupported simulation variant {self.variant!r}")
        object.__setattr__(self, "candidates", tuple(int(k) for k in self.candidates))
        if not self.candidates or min(self.candidates) < 0:
            raise ConfigurationError("candidates must be a nonempty set of nonnegative integers")

    def spec(self, k=None):
        return ModelSpec.from_variant(self.variant, self.K_star if k is None else k)


@dataclass
class SimTruth:
    spec: ModelSpec
    params_true: ParameterSet
    dataset: Dataset
    zero_items: tuple = field(default=())  # per family: item indices with zeroed coefficients


def truncated_normal(rng, size, bound=3.0):
    """Standard normal restricted to ``[-bound, bound]`` by rejection."""
    out = rng.standard_normal(size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def dummy_pair(rng, n):
    """Indicators (1[c = 1], 1[c = 2]) of c ~ Binomial(2, 0.5)."""
    c = rng.binomial(2, 0.5, size=n)
    return np.column_stack([c == 1, c == 2]).astype(float)


def missing_patterns(rng, n, T):
    """Rows drawn uniformly from the 2^T - 1 nonzero 0/1 vectors of length T."""
    codes = rng.integers(1, 2 ** T, size=n)
    return ((codes[:, None] >> np.arange(T)[None, :]) & 1).astype(float)


def generate(config, rep):
    """Draw one replication; deterministic in ``(config.seed, rep)``."""
    rng = np.random.default_rng([int(config.seed), int(rep)])
    spec = config.spec()
    N, J, T, K = config.N, config.J, config.T, config.K_star
    p = N_COVARIATES
    X = np.hstack([dummy_pair(rng, N), dummy_pair(rng, N), rng.uniform(-1, 1, size=(N, 1))])
    lay = Layout(spec, T, p)
    U = np.zeros((J, lay.P))
    if spec.linear_intercept:
        U[:, lay.gamma] = rng.uniform(-0.25, 0.25, size=(J, 1))
    else:
        U[:, lay.gamma] = rng.uniform(-1, 1, size=(J, T))
    U[:, lay.beta] = rng.uniform(0.5, 1.0, size=(J, lay.beta.stop - lay.beta.start))
    theta = truncated_normal(rng, (N, K))
    U[:, lay.a] = truncated_normal(rng, (J, lay.a.stop - lay.a.start))
    params, _ = normalize_full(spec, ParameterSet(theta, U), X, n_times=T)
    U = params.item_params
    zero_items = []
    for fam in FAMILIES:
        chosen = np.sort(rng.permutation(J)[: J // 2])
        U[np.ix_(chosen, lay.beta_positions(list(fam)))] = 0.0
        zero_items.append(tuple(int(j) for j in chosen))
    r = missing_patterns(rng, N, T)
    dummy = Dataset(np.zeros((N, J, T)), r, X)
    eta = natural_params_all(lay, dummy, params.theta, U)
    y = (rng.random((N, J, T)) < expit(eta)).astype(float)
    data = Dataset(y, r, X)
    return SimTruth(spec, ParameterSet(params.theta, U), data, tuple(zero_items))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

HYPOTHESES = {"x1x2": (0, 1), "x3x4": (2, 3), "x5": (4,)}
Z95 = 1.959963984540054


@dataclass
class MetricReport:
    loss: float = np.nan
    bloss: float = np.nan
    mmse: float = np.nan
    k_correct: float = np.nan
    ecp: float = np.nan
    mmfdr: float = np.nan
    mmfnr: float = np.nan
    aloss: float = np.nan
    tloss: float = np.nan
    mamse: float = np.nan
    mtmse: float = np.nan
    aecp: float = np.nan
    tecp: float = np.nan
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "extra"}
        d.update(self.extra)
        return d


@dataclass
class RepMetrics:
    """Metrics of one replication plus the raw errors needed for across-rep MSEs."""

    report: MetricReport
    fdr: dict
    fnr: dict
    beta_err: np.ndarray = field(repr=False)
    a_err: np.ndarray = field(repr=False)
    theta_err: np.ndarray = field(repr=False)
    baseline_err: np.ndarray | None = field(default=None, repr=False)


def _sign_correction(lay, A_hat, A_true):
    J = A_hat.shape[0]
    flat_hat = A_hat.reshape(-1, lay.K) if A_hat.ndim == 3 else A_hat
    flat_true = A_true.reshape(-1, lay.K) if A_true.ndim == 3 else A_true
    s = np.sign(np.einsum("jk,jk->k", flat_hat, flat_true) / J)
    return np.where(s == 0, 1.0, s)


def compute_metrics(truth, params, inference=None, k_hat=None, factor_se=None):
    """Per-replication evaluation of a normalized fit against the truth.

    ``params`` must already be normalized with the same criteria as the truth.
    ``inference`` (an :class:`InferenceReport` over :data:`HYPOTHESES`) enables
    coverage and FDR/FNR; ``factor_se`` = (loading SEs, score SEs) enables the
    experimental factor coverages.
    """
    spec, data, true = truth.spec, truth.dataset, truth.params_true
    if params.theta.shape != true.theta.shape or params.item_params.shape != true.item_params.shape:
        raise ConfigurationError(
            f"fit shapes {params.theta.shape}/{params.item_params.shape} do not match truth "
            f"{true.theta.shape}/{true.item_params.shape}")
    lay = Layout.for_data(spec, data)
    N, J, T = data.n_persons, data.n_items, data.n_times
    rep = MetricReport()
    eta_hat = natural_params_all(lay, data, params.theta, params.item_params)
    eta_true = natural_params_all(lay, data, true.theta, true.item_params)
    rep.loss = max(np.linalg.norm(eta_hat[:, :, t] - eta_true[:, :, t]) for t in range(T)) / np.sqrt(N * J)
    B_hat, B_true = params.item_params[:, lay.beta], true.item_params[:, lay.beta]
    if spec.time_varying_coefficients:
        rep.bloss = max(np.linalg.norm(lay.beta_block(params.item_params, t) - lay.beta_block(true.item_params, t))
                        for t in range(T)) / np.sqrt(J)
    else:
        rep.bloss = np.linalg.norm(B_hat - B_true) / np.sqrt(J)
    if k_hat is not None:
        rep.k_correct = float(k_hat == spec.n_factors)

    A_hat, A_true = lay.loading_block(params.item_params), lay.loading_block(true.item_params)
    if lay.K:
        s = _sign_correction(lay, A_hat, A_true)
        a_err = A_hat - A_true * s
        theta_err = params.theta - true.theta * s
        rep.aloss = np.linalg.norm(a_err) / np.sqrt(J)
        rep.tloss = np.linalg.norm(theta_err) / np.sqrt(N)
    else:
        a_err = np.zeros((J, 0))
        theta_err = np.zeros((N, 0))
    fdr, fnr = {}, {}
    if inference is not None:
        lo, hi = inference.confidence_intervals(Z95)
        rep.ecp = float(np.mean((lo <= B_true) & (B_true <= hi)))
        for (name, cov), zeros in zip(HYPOTHESES.items(), truth.zero_items):
            null = np.zeros(J, bool)
            null[list(zeros)] = True
            rej = inference.rejections(name, 0.05)
            fdr[name] = float(np.sum(rej & null)) / max(int(rej.sum()), 1)
            fnr[name] = float(np.sum(~rej & ~null)) / max(int((~rej).sum()), 1)
        rep.mmfdr = max(fdr.values())
        rep.mmfnr = max(fnr.values())
    if factor_se is not None and lay.K:
        a_se, t_se = factor_se
        a_hat_flat = A_hat.reshape(J, -1)
        a_ref = (A_true * s).reshape(J, -1)
        rep.aecp = float(np.mean(np.abs(a_hat_flat - a_ref) <= Z95 * a_se))
        rep.tecp = float(np.mean(np.abs(theta_err) <= Z95 * t_se))
    return RepMetrics(rep, fdr, fnr, B_hat - B_true, a_err, theta_err)


def aggregate(reps):
    """Means over replications; MMSE-type metrics are maxima of across-rep MSEs."""
    if not reps:
        raise LongFactorError("no successful replication to aggregate")
    out = MetricReport()
    for name in ("loss", "bloss", "k_correct", "ecp", "aloss", "tloss", "aecp", "tecp"):
        vals = np.array([getattr(r.report, name) for r in reps], dtype=float)
        setattr(out, name, float(np.mean(vals)) if np.all(np.isfinite(vals)) else np.nan)
    if reps[0].fdr:
        out.mmfdr = max(float(np.mean([r.fdr[h] for r in reps])) for h in reps[0].fdr)
        out.mmfnr = max(float(np.mean([r.fnr[h] for r in reps])) for h in reps[0].fnr)
    berr = np.stack([r.beta_err for r in reps])
    p = N_COVARIATES
    # the mean squared error is taken over the dummy-coded coefficients (l = 1..4)
    cols = [c for c in range(berr.shape[2]) if c % p < 4]
    out.mmse = float(np.max(np.mean(berr[:, :, cols] ** 2, axis=0)))
    if reps[0].a_err.size:
        out.mamse = float(np.max(np.mean(np.stack([r.a_err.reshape(r.a_err.shape[0], -1) for r in reps]) ** 2, axis=0)))
        out.mtmse = float(np.max(np.mean(np.stack([r.theta_err for r in reps]) ** 2, axis=0)))
    return out


# ---------------------------------------------------------------------------
# Study driver
# ---------------------------------------------------------------------------

MAX_FAIL_FRACTION = 0.1


def run_replication(config, rep, opts=None, init_opts=None):
    """Generate, select K, fit at K*, normalize, infer and score one replication."""
    from .estimator import FitOptions, fit
    from .inference import factor_standard_errors, infer
    from .init import InitOptions, initial_values
    from .selection import select_k

    opts = FitOptions() if opts is None else opts
    init_opts = InitOptions() if init_opts is None else init_opts
    truth = generate(config, rep)
    spec, data = truth.spec, truth.dataset
    k_hat = None
    fit_k = None
    if config.select:
        sel = select_k(spec, data, config.candidates, opts, init_opts, seed=config.seed + rep)
        k_hat = sel.k_hat
        fit_k = sel.fits.get(spec.n_factors)
    if fit_k is None:
        fit_k = fit(spec, data, initial_values(spec, data, config.seed + rep, init_opts), opts)
    params, _ = normalize_full(spec, fit_k.params, data)
    inference = infer(spec, data, params, HYPOTHESES)
    try:
        fse = factor_standard_errors(spec, data, params)
    except LongFactorError as exc:
        log.warning("rep %d: factor standard errors unavailable: %s", rep, exc)
        fse = None
    metrics = compute_metrics(truth, params, inference, k_hat, fse)
    row = {"rep": int(rep), "k_hat": -1 if k_hat is None else int(k_hat)}
    row.update({k: float(v) for k, v in metrics.report.as_dict().items()})
    row.update({f"fdr_{h}": v for h, v in metrics.fdr.items()})
    row.update({f"fnr_{h}": v for h, v in metrics.fnr.items()})
    row.update(loglik=float(fit_k.loglik), sweeps=int(fit_k.sweeps_used), converged=bool(fit_k.converged))
    if config.baseline:
        base_spec = spec.with_factors(0)
        base = fit(base_spec, data, initial_values(base_spec, data, config.seed + rep, init_opts), opts)
        lay = Layout.for_data(spec, data)
        B0 = base.params.item_params[:, Layout.for_data(base_spec, data).beta]
        err0 = B0 - truth.params_true.item_params[:, lay.beta]
        row["bloss_lr"] = float(_bloss(lay, err0))
        metrics.baseline_err = err0
    return row, metrics


def _bloss(lay, err):
    if lay.spec.time_varying_coefficients:
        J = err.shape[0]
        return max(np.linalg.norm(err.reshape(J, lay.T, lay.p)[:, t]) for t in range(lay.T)) / np.sqrt(J)
    return np.linalg.norm(err) / np.sqrt(err.shape[0])


def _rep_worker(args):
    config, rep, opts, init_opts = args
    try:
        return run_replication(config, rep, opts, init_opts)
    except LongFactorError as exc:
        return exc


def run_study(config, opts=None, init_opts=None, mapper=map):
    """Run every replication and aggregate.

    Returns the aggregate :class:`MetricReport` and a list of per-replication
    rows.  Failed replications are recorded; 10% or more failures is an error.
    """
    jobs = [(config, rep, opts, init_opts) for rep in range(config.n_reps)]
    rows, reps, failed = [], [], []
    for rep, out in enumerate(mapper(_rep_worker, jobs)):
        if isinstance(out, Exception):
            log.warning("replication %d failed: %s", rep, out)
            failed.append(rep)
            rows.append({"rep": rep, "failed": True, "error": str(out)})
            continue
        row, metrics = out
        row["failed"] = False
        rows.append(row)
        reps.append(metrics)
    if len(failed) >= MAX_FAIL_FRACTION * config.n_reps and failed:
        raise LongFactorError(f"{len(failed)} of {config.n_reps} replications failed")
    agg = aggregate(reps)
    if config.baseline:
        agg.extra["bloss_lr"] = float(np.mean([r["bloss_lr"] for r in rows if not r["failed"]]))
        err = np.stack([m.baseline_err for m in reps])
        cols = [c for c in range(err.shape[2]) if c % N_COVARIATES < 4]
        agg.extra["mmse_lr"] = float(np.max(np.mean(err[:, :, cols] ** 2, axis=0)))
    agg.extra["n_failed"] = len(failed)
    return agg, rows
