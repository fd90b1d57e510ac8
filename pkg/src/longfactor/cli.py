"""Command line interface: ``longfactor {fit,select-k,simulate,evaluate,predict}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import fileio
from .errors import (
    ConfigurationError,
    InputError,
    LongFactorError,
    NumericError,
    UndefinedMetricError,
)
from .estimator import FitOptions, fit
from .inference import infer, permutation_test_B
from .init import InitOptions, initial_values
from .model import VARIANTS, Dataset, Layout, ModelSpec, check_params, natural_params_all, cumulants
from .normalize import normalize_full
from .predict import STRATEGIES, RecommendationConfig, predict_proba_next, recommend, residual_deviance, sensitivity
from .selection import penalty_lambda, select_k
from .simulate import SimConfig, run_study

log = logging.getLogger("longfactor")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out_dir": ".",
    "family": "bernoulli",
    "k": None,
    "k_set": "1-10",
    "c1": 5.0,
    "c2": 5.0,
    "tol": 1e-7,
    "max_sweeps": 500,
    "variant": "base",
    "n_perm": 0,
    "top_k": 5,
    "strategy": "all",
    "responses": None,
    "covariates": None,
    "time_covariates": None,
    "n_covariates": None,
    "params": None,
    "actual": None,
    "hypotheses": None,
    "epsilon": 0.01,
    "J": 100,
    "N": 500,
    "T": 4,
    "K_star": 3,
    "n_reps": 20,
    "baseline": False,
    "select": True,
}
# settings that cannot change any output and are left out of the provenance hash
_NOT_HASHED = ("threads", "out_dir")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def parse_k_set(value):
    """``"1-10"``, ``"1,3,5"`` or a list of integers."""
    if isinstance(value, (list, tuple)):
        ks = [int(v) for v in value]
    else:
        ks = []
        for part in str(value).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                ks.extend(range(int(lo), int(hi) + 1))
            else:
                ks.append(int(part))
    if not ks or min(ks) < 0:
        raise ConfigurationError(f"invalid candidate set {value!r}")
    return sorted(set(ks))


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{p}: config file not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{p}: top level must be an object")
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"{p}: unknown config key(s): {', '.join(unknown)}")
    return cfg


def resolve_config(args):
    cfg = dict(DEFAULTS)
    cfg.update(load_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["variant"] not in VARIANTS:
        raise ConfigurationError(f"unknown variant {cfg['variant']!r}")
    if int(cfg["threads"]) < 1:
        raise ConfigurationError("threads must be at least 1")
    return cfg


def fit_options(cfg):
    return FitOptions(max_sweeps=int(cfg["max_sweeps"]), rel_tol=float(cfg["tol"]), seed=int(cfg["seed"]))


def model_spec(cfg, k):
    return ModelSpec.from_variant(cfg["variant"], int(k), c1=float(cfg["c1"]), c2=float(cfg["c2"]))


@contextmanager
def pool_map(threads):
    if threads <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=threads) as ex:
        yield lambda fn, it: ex.map(fn, list(it), chunksize=1)


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------

def load_dataset(cfg):
    if cfg["responses"] is None:
        raise InputError("a responses file is required (--responses)")
    family = cfg["family"]
    data = fileio.read_responses(cfg["responses"], family)
    names = []
    X = None
    if cfg["covariates"] is not None:
        X, names = fileio.read_covariates(cfg["covariates"], data.n_persons)
    p_decl = cfg["n_covariates"]
    if p_decl is not None and int(p_decl) != (0 if X is None else X.shape[1]):
        raise InputError(f"config declares {p_decl} covariate(s) but "
                         f"{'no covariates file was given' if X is None else f'the file has {X.shape[1]}'}")
    Z = None
    if cfg["time_covariates"] is not None:
        Z, _ = fileio.read_time_covariates(cfg["time_covariates"], data.n_persons, data.n_times)
    if VARIANTS[cfg["variant"]].get("use_time_covariates") and Z is None:
        raise InputError(f"variant {cfg['variant']!r} needs a time covariates file (--time-covariates)")
    return Dataset(data.responses, data.missing, X, Z, data.family), names


def fit_normalized(cfg, data, k):
    spec = model_spec(cfg, k)
    init = initial_values(spec, data, seed=int(cfg["seed"]), opts=InitOptions(epsilon=float(cfg["epsilon"])))
    t0 = time.perf_counter()
    res = fit(spec, data, init, fit_options(cfg))
    log.info("fit K=%d: %d sweeps in %.2fs", k, res.sweeps_used, time.perf_counter() - t0)
    params, _ = normalize_full(spec, res.params, data)
    return spec, res, params


def obtain_params(cfg, data):
    """Parameters from ``--params`` if given, otherwise a fresh fit at ``--k``."""
    if cfg["params"] is not None:
        spec, params, _ = fileio.read_params(cfg["params"])
        check_params(Layout.for_data(spec, data), data, params)
        return spec, params, None
    if cfg["k"] is None:
        raise ConfigurationError("either --params or --k is required")
    spec, res, params = fit_normalized(cfg, data, int(cfg["k"]))
    return spec, params, res


def _header(command, cfg):
    hashed = {k: v for k, v in cfg.items() if k not in _NOT_HASHED}
    return {"command": command, "config": hashed, "config_hash": fileio.config_hash(hashed),
            "seed": int(cfg["seed"]), "version": __version__}


def _fit_summary(res):
    return {"loglik": res.loglik, "sweeps_used": res.sweeps_used, "converged": res.converged,
            "loglik_trace": res.loglik_trace}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(cfg, out):
    data, names = load_dataset(cfg)
    if cfg["k"] is None:
        raise ConfigurationError("--k is required for fit")
    spec, res, params = fit_normalized(cfg, data, int(cfg["k"]))
    lay = Layout.for_data(spec, data)
    fileio.write_params(out / "params.json", spec, lay, params, data.family, names)
    report = _header("fit", cfg)
    report.update(_fit_summary(res), n_persons=data.n_persons, n_items=data.n_items, n_times=data.n_times)
    fileio.write_json(out / "report.json", report)


def cmd_select_k(cfg, out):
    data, names = load_dataset(cfg)
    ks = parse_k_set(cfg["k_set"])
    spec0 = model_spec(cfg, ks[0])
    with pool_map(int(cfg["threads"])) as mapper:
        sel = select_k(spec0, data, ks, fit_options(cfg), InitOptions(epsilon=float(cfg["epsilon"])),
                       seed=int(cfg["seed"]), mapper=mapper)
    rows = [{"k": k, "loglik": sel.fits[k].loglik, "ic": sel.ic_values[k],
             "sweeps": sel.fits[k].sweeps_used, "converged": sel.fits[k].converged} for k in sorted(sel.fits)]
    fileio.write_table(out / "ic.csv", pd.DataFrame(rows))
    best = sel.fits[sel.k_hat]
    spec = spec0.with_factors(sel.k_hat)
    params, _ = normalize_full(spec, best.params, data)
    fileio.write_params(out / "params.json", spec, Layout.for_data(spec, data), params, data.family, names)
    report = _header("select-k", cfg)
    report.update(k_hat=sel.k_hat, penalty=penalty_lambda(spec0, data),
                  ic={str(k): v for k, v in sel.ic_values.items()}, failed=list(sel.failed))
    fileio.write_json(out / "report.json", report)


def cmd_simulate(cfg, out):
    sc = SimConfig(J=int(cfg["J"]), N=int(cfg["N"]), T=int(cfg["T"]), K_star=int(cfg["K_star"]),
                   n_reps=int(cfg["n_reps"]), seed=int(cfg["seed"]), variant=cfg["variant"],
                   candidates=tuple(parse_k_set(cfg["k_set"])), baseline=bool(cfg["baseline"]),
                   select=bool(cfg["select"]))
    with pool_map(int(cfg["threads"])) as mapper:
        agg, rows = run_study(sc, fit_options(cfg), InitOptions(epsilon=float(cfg["epsilon"])), mapper=mapper)
    fileio.write_table(out / "per_rep.csv", pd.DataFrame(rows))
    report = _header("simulate", cfg)
    summary = agg.as_dict()
    summary["p_k_correct"] = summary.pop("k_correct")
    report.update(summary=summary, n_reps=sc.n_reps)
    fileio.write_json(out / "summary.json", report)


def _hypotheses(cfg, p, names):
    if cfg["hypotheses"] is None:
        return {(names[l] if l < len(names) else f"x{l + 1}"): (l,) for l in range(p)}
    hyp = {}
    for name, cols in dict(cfg["hypotheses"]).items():
        cols = [int(c) for c in (cols if isinstance(cols, (list, tuple)) else [cols])]
        if not cols or min(cols) < 1 or max(cols) > p:
            raise ConfigurationError(f"hypothesis {name!r}: covariate indices must lie in 1..{p}")
        hyp[str(name)] = tuple(c - 1 for c in cols)
    return hyp


def cmd_evaluate(cfg, out):
    data, names = load_dataset(cfg)
    spec, params, res = obtain_params(cfg, data)
    lay = Layout.for_data(spec, data)
    names = names or [f"x{l + 1}" for l in range(lay.p)]
    hyp = _hypotheses(cfg, lay.p, names)
    rep = infer(spec, data, params, hyp)
    lo, hi = rep.confidence_intervals()
    se = rep.beta_se
    coef_rows = []
    for j in range(data.n_items):
        for c in range(rep.beta.shape[1]):
            t, l = divmod(c, lay.p)
            coef_rows.append({"item": j + 1, "covariate": names[l],
                              "time": t + 1 if spec.time_varying_coefficients else "",
                              "estimate": rep.beta[j, c], "se": se[j, c], "ci_low": lo[j, c], "ci_high": hi[j, c]})
    fileio.write_table(out / "coefficients.csv", pd.DataFrame(coef_rows))
    test_rows = [{"hypothesis": h, "item": j + 1, "wald": rep.wald_stats[h][j], "p_value": rep.p_values[h][j],
                  "adj_p_value": rep.adj_p_values[h][j], "reject_0.05": bool(rep.adj_p_values[h][j] <= 0.05)}
                 for h in hyp for j in range(data.n_items)]
    fileio.write_table(out / "tests.csv", pd.DataFrame(test_rows))
    report = _header("evaluate", cfg)
    report["n_rejected"] = {h: int(np.sum(rep.rejections(h))) for h in hyp}
    if res is not None:
        report["fit"] = _fit_summary(res)
    n_perm = int(cfg["n_perm"])
    if n_perm > 0:
        with pool_map(int(cfg["threads"])) as mapper:
            stat, p, null = permutation_test_B(spec, data, fit_options(cfg), n_perm, int(cfg["seed"]),
                                               InitOptions(epsilon=float(cfg["epsilon"])), mapper=mapper)
        report["permutation"] = {"statistic": stat, "p_value": p, "n_perm": n_perm, "n_used": int(null.size)}
        fileio.write_table(out / "permutation_null.csv", pd.DataFrame({"statistic": null}))
    fileio.write_json(out / "report.json", report)


def cmd_predict(cfg, out):
    data, _ = load_dataset(cfg)
    spec, params, res = obtain_params(cfg, data)
    lay = Layout.for_data(spec, data)
    N, J, T = data.n_persons, data.n_items, data.n_times
    probs = predict_proba_next(spec, data, params)
    pid, iid = np.meshgrid(np.arange(1, N + 1), np.arange(1, J + 1), indexing="ij")
    fileio.write_table(out / "probs.csv", pd.DataFrame({"person": pid.ravel(), "item": iid.ravel(),
                                                        "prob": probs.ravel()}))
    report = _header("predict", cfg)
    binary = all(f == "bernoulli" for f in data.family)
    if binary:
        eta = natural_params_all(lay, data, params.theta, params.item_params)
        (fitted,) = cumulants(eta, data.family, orders=(1,))
        rows, totals = [], []
        for t in range(T):
            per_item, total = residual_deviance(spec, data, fitted[:, :, t], t)
            totals.append(total)
            rows.extend({"time": t + 1, "item": j + 1, "deviance": per_item[j]} for j in range(J))
        fileio.write_table(out / "deviance.csv", pd.DataFrame(rows))
        report["deviance_by_time"] = totals
    counts = (data.responses * data.missing[:, None, :]).sum(axis=2)
    strategies = STRATEGIES if cfg["strategy"] == "all" else (cfg["strategy"],)
    actual = None
    if cfg["actual"] is not None:
        actual = fileio.read_outcomes(cfg["actual"], N, J)
    rec_rows, sens = [], {}
    for s in strategies:
        rc = RecommendationConfig(strategy=s, top_k=int(cfg["top_k"]), tie_seed=int(cfg["seed"]))
        recs = recommend(rc, counts, probs)
        for i in range(N):
            rec_rows.extend({"strategy": s, "person": i + 1, "rank": r + 1, "item": int(recs[i, r]) + 1}
                            for r in range(rc.top_k))
        if actual is not None:
            sens[s] = sensitivity(recs, actual)
    fileio.write_table(out / "recommendations.csv", pd.DataFrame(rec_rows))
    if actual is not None:
        fileio.write_table(out / "sensitivity.csv",
                           pd.DataFrame([{"strategy": s, "top_k": int(cfg["top_k"]), "sensitivity": v}
                                         for s, v in sens.items()]))
        report["sensitivity"] = sens
    if res is not None:
        report["fit"] = _fit_summary(res)
    fileio.write_json(out / "report.json", report)


COMMANDS = {
    "fit": cmd_fit,
    "select-k": cmd_select_k,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="longfactor", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with option values (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--family")
        p.add_argument("--k", type=int)
        p.add_argument("--k-set", dest="k_set")
        p.add_argument("--c1", type=float)
        p.add_argument("--c2", type=float)
        p.add_argument("--tol", type=float)
        p.add_argument("--max-sweeps", dest="max_sweeps", type=int)
        p.add_argument("--variant", choices=list(VARIANTS))
        p.add_argument("--n-perm", dest="n_perm", type=int)
        p.add_argument("--top-k", dest="top_k", type=int)
        p.add_argument("--strategy", choices=list(STRATEGIES) + ["all"])
        p.add_argument("--responses")
        p.add_argument("--covariates")
        p.add_argument("--time-covariates", dest="time_covariates")
        p.add_argument("--params")
        p.add_argument("--actual")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg, out)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    except (InputError, ConfigurationError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, LongFactorError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
