"""Acceptance criteria at their stated tolerances.

The simulation-based criteria share module-scoped studies: the 20-replication
base study (with factor-number selection over K = 1..10) feeds criteria 1 to 4.
Each test records a one-line verdict that is printed in the terminal summary.
"""

import logging
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from longfactor.cli import main
from longfactor.estimator import FitOptions, fit, item_gradient_hessian, person_gradient_hessian
from longfactor.init import svd_init
from longfactor.model import Dataset, Layout, ModelSpec, natural_params_all
from longfactor.normalize import normalize_beta_only, normalize_full
from longfactor.simulate import SimConfig, run_study

from conftest import ALL_VARIANTS, dataset_for_variant, random_params, record
from oracles import normalization_residuals, numerical_gradients, slsqp_fit

logging.getLogger("longfactor").setLevel(logging.ERROR)


def _study(**kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_study(SimConfig(**kw))


@pytest.fixture(scope="module")
def base_study():
    t0 = time.perf_counter()
    agg, rows = _study(J=100, N=500, T=4, K_star=3, n_reps=20, candidates=tuple(range(1, 11)))
    return agg, rows, time.perf_counter() - t0


@pytest.fixture(scope="module")
def variant_studies():
    out = {}
    for v in ("tvload", "lineargamma"):
        small, rows = _study(J=100, N=500, T=4, K_star=3, n_reps=5, variant=v)
        large, _ = _study(J=200, N=1000, T=4, K_star=3, n_reps=5, variant=v, select=False)
        out[v] = (small, rows, large)
    return out


def test_criterion_01_factor_selection(base_study):
    agg, rows, secs = base_study
    hits = sum(r["k_hat"] == 3 for r in rows)
    ok = record(1, "P(K_hat = 3) at J=100, N=500", hits >= 19,
                f"{hits}/20 (need >= 19), {secs / 60:.1f} min")
    assert ok


def test_criterion_02_estimation_error(base_study):
    agg = base_study[0]
    ok = record(2, "mean Loss and Bloss", 0.45 <= agg.loss <= 0.65 and 0.39 <= agg.bloss <= 0.59,
                f"Loss {agg.loss:.3f} in [0.45, 0.65], Bloss {agg.bloss:.3f} in [0.39, 0.59]")
    assert ok


def test_criterion_03_coverage(base_study):
    agg = base_study[0]
    ok = record(3, "pooled 95% CI coverage of beta", 0.90 <= agg.ecp <= 0.98, f"ECP {agg.ecp:.4f} in [0.90, 0.98]")
    assert ok


def test_criterion_04_fdr(base_study):
    agg = base_study[0]
    ok = record(4, "BY maximum mean FDR", agg.mmfdr <= 0.05, f"MMFDR {agg.mmfdr:.4f} <= 0.05")
    assert ok


def test_criterion_05_baseline_gap():
    agg, _ = _study(J=100, N=1000, T=4, K_star=3, n_reps=20, select=False, baseline=True)
    gap = agg.extra["bloss_lr"] - agg.bloss
    ok = record(5, "K=0 baseline Bloss gap at N=1000", gap >= 0.05,
                f"Bloss K=0 {agg.extra['bloss_lr']:.3f} vs K=3 {agg.bloss:.3f}, gap {gap:.3f} >= 0.05")
    assert ok


def test_criterion_06_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for v, variant in enumerate(ALL_VARIANTS):
        for point in range(10):
            rng = np.random.default_rng(1000 * v + point)
            spec, data = dataset_for_variant(rng, variant, N=12, J=4, T=3, p=2, pz=1, K=2)
            lay = Layout.for_data(spec, data)
            params = random_params(rng, spec, data)
            G, _ = item_gradient_hessian(lay, data, params.theta, params.item_params, params.scale)
            g, _ = person_gradient_hessian(lay, data, params.theta, params.item_params, params.scale)
            nU, nT = numerical_gradients(spec, data, params)
            for analytic, numeric in ((G, nU), (g, nT)):
                err = np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric))
                worst = max(worst, err)
    secs = time.perf_counter() - t0
    ok = record(6, "block gradients vs central differences", worst < 1e-5 and secs < 60,
                f"max relative error {worst:.2e} < 1e-5 over 10 points x 5 variants, {secs:.1f} s")
    assert ok


def _oracle_instance(s):
    rng = np.random.default_rng(100 + s)
    N, J, T = 30, 4, 2
    th = rng.normal(size=N)
    a = rng.normal(size=J)
    g = rng.normal(scale=0.5, size=(J, T))
    eta = g[None] + (th[:, None] * a[None])[:, :, None]
    y = (rng.random((N, J, T)) < 1 / (1 + np.exp(-eta))).astype(float)
    r = (rng.random((N, T)) > 0.2).astype(float)
    r[:, 0] = 1
    return y, r


def test_criterion_07_oracle_equivalence():
    t0 = time.perf_counter()
    gaps = []
    for s in range(5):
        y, r = _oracle_instance(s)
        data = Dataset(y, r)
        spec = ModelSpec(1)
        start = svd_init(spec, data)
        ours = fit(spec, data, start, FitOptions(rel_tol=1e-12, max_sweeps=20000)).loglik
        ref, _ = slsqp_fit(y, r, start.theta[:, 0], start.item_params[:, :2], start.item_params[:, 2])
        gaps.append(abs(ours - ref))
    secs = time.perf_counter() - t0
    ok = record(7, "fitted log-likelihood vs SLSQP from the same start", max(gaps) <= 1e-3 and secs < 300,
                f"max gap {max(gaps):.2e} <= 1e-3 over 5 instances, {secs:.1f} s")
    assert ok


def test_criterion_08_normalization_invariance():
    worst_eta, worst_crit = 0.0, 0.0
    for v, variant in enumerate(ALL_VARIANTS):
        for k in range(20):
            rng = np.random.default_rng(5000 + 100 * v + k)
            spec, data = dataset_for_variant(rng, variant, N=40, J=8, T=3, p=2, pz=1, K=int(rng.integers(1, 4)))
            lay = Layout.for_data(spec, data)
            params = random_params(rng, spec, data, scale=1.0)
            before = natural_params_all(lay, data, params.theta, params.item_params)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                full, _ = normalize_full(spec, params, data)
            for out in (normalize_beta_only(spec, params, data), full):
                after = natural_params_all(lay, data, out.theta, out.item_params)
                worst_eta = max(worst_eta, np.max(np.abs(after - before) / (1 + np.abs(before))))
            res = normalization_residuals(spec, data, full)
            worst_crit = max(worst_crit, res["orth"], res["loadings"], res["diag"],
                             float(np.max(np.diff(res["diagonal"]), initial=0.0)))
    ok = record(8, "normalization keeps eta and meets the criteria", worst_eta <= 1e-8 and worst_crit <= 1e-8,
                f"eta change {worst_eta:.1e}, criteria residual {worst_crit:.1e} (both <= 1e-8), "
                f"20 parameter sets x 5 variants")
    assert ok


def test_criterion_09_extension_variants(variant_studies):
    parts, ok = [], True
    for v, (small, rows, large) in variant_studies.items():
        hits = sum(r["k_hat"] == 3 for r in rows)
        ok &= hits == 5 and large.bloss < small.bloss
        parts.append(f"{v}: K_hat=3 in {hits}/5, Bloss {small.bloss:.3f} (J=100) -> {large.bloss:.3f} (J=200)")
    record(9, "extension variants select K* and Bloss falls with J", ok, "; ".join(parts))
    assert ok


def _command_outputs(tmp_path, name, argv):
    out = tmp_path / name
    assert main([*argv, "--out-dir", str(out), "--threads", "1", "--seed", "11"]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_criterion_10_determinism(tmp_path):
    data = Path(__file__).parent / "data"
    common = ["--responses", str(data / "toy_responses.csv"), "--covariates", str(data / "toy_covariates.csv")]
    commands = {
        "fit": ["fit", *common, "--k", "1"],
        "select-k": ["select-k", *common, "--k-set", "0-2"],
        "evaluate": ["evaluate", *common, "--k", "1", "--n-perm", "3"],
        "predict": ["predict", *common, "--k", "1", "--top-k", "2"],
        "simulate": ["simulate", "--k-set", "1-2", "--variant", "base"],
    }
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text('{"J": 10, "N": 50, "T": 3, "K_star": 1, "n_reps": 2}')
    commands["simulate"] += ["--config", str(sim_cfg)]
    identical = []
    for name, argv in commands.items():
        a = _command_outputs(tmp_path, name + "_a", argv)
        b = _command_outputs(tmp_path, name + "_b", argv)
        identical.append(a == b and len(a) > 0)
    ok = record(10, "byte-identical reruns with --threads 1", all(identical),
                ", ".join(f"{n} {'same' if s else 'DIFFERENT'}" for n, s in zip(commands, identical)))
    assert ok
