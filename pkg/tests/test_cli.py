import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm

from longfactor.cli import main, parse_k_set
from longfactor.errors import ConfigurationError
from longfactor.fileio import read_params, read_responses

DATA = Path(__file__).parent / "data"
RESP = str(DATA / "toy_responses.csv")
COV = str(DATA / "toy_covariates.csv")
GOLDEN = DATA / "golden_params_k0.json"


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main([*args, "--out-dir", str(out)])
    return code, out


def _write(path, text):
    path.write_text(text)
    return str(path)


# -- fit ----------------------------------------------------------------------------------

def test_fit_matches_golden(tmp_path):
    code, out = run(tmp_path, "fit", "--responses", RESP, "--covariates", COV, "--k", "0", "--seed", "42")
    assert code == 0
    assert (out / "params.json").read_bytes() == GOLDEN.read_bytes()


def test_golden_matches_logistic_regression():
    # with no factors each item is an ordinary logistic regression on period dummies and x
    df = pd.read_csv(RESP)
    X = pd.read_csv(COV).set_index("person")
    _, params, meta = read_params(GOLDEN)
    T = meta["n_times"]
    for j in range(3):
        d = df[df.item == j + 1]
        design = np.column_stack([(d.time.to_numpy()[:, None] == np.arange(1, T + 1)).astype(float),
                                  X.loc[d.person, ["x1", "x2"]].to_numpy()])
        ref = sm.Logit(d.value.to_numpy(), design).fit(disp=0, tol=1e-12).params
        np.testing.assert_allclose(params.item_params[j], ref, atol=1e-4)


def test_fit_is_deterministic_and_round_trips(tmp_path):
    args = ("fit", "--responses", RESP, "--covariates", COV, "--k", "1", "--seed", "3", "--threads", "1")
    c1, a = run(tmp_path, *args, name="a")
    c2, b = run(tmp_path, *args, name="b")
    assert c1 == c2 == 0
    for f in ("params.json", "report.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    spec, params, meta = read_params(a / "params.json")
    raw = json.loads((a / "params.json").read_text())
    assert np.array_equal(params.item_params, np.array(raw["item_params"]))
    assert np.array_equal(params.theta, np.array(raw["theta"]))
    assert spec.n_factors == 1
    report = json.loads((a / "report.json").read_text())
    assert report["seed"] == 3 and len(report["config_hash"]) == 64


def test_missing_covariates_file_is_input_error(tmp_path):
    cfg = _write(tmp_path / "cfg.json", json.dumps({"n_covariates": 2, "k": 0}))
    code, _ = run(tmp_path, "fit", "--config", cfg, "--responses", RESP)
    assert code == 2


def test_unknown_config_key(tmp_path, capsys):
    cfg = _write(tmp_path / "cfg.json", json.dumps({"kk": 1}))
    code, _ = run(tmp_path, "fit", "--config", cfg, "--responses", RESP)
    assert code == 2
    assert "kk" in capsys.readouterr().err


def test_nan_and_partial_slices_rejected(tmp_path, capsys):
    bad = _write(tmp_path / "nan.csv", "person,item,time,value\n1,1,1,0\n1,2,1,nan\n")
    assert run(tmp_path, "fit", "--responses", bad, "--k", "0")[0] == 2
    assert "line 3" in capsys.readouterr().err
    partial = _write(tmp_path / "partial.csv", "person,item,time,value\n1,1,1,0\n1,2,1,1\n2,1,1,1\n")
    assert run(tmp_path, "fit", "--responses", partial, "--k", "0")[0] == 2
    assert "person 2 at time 1" in capsys.readouterr().err
    cov = _write(tmp_path / "cov.csv", "person,x1\n" + "\n".join(f"{i},{'inf' if i == 5 else i}"
                                                                for i in range(1, 41)) + "\n")
    assert run(tmp_path, "fit", "--responses", RESP, "--covariates", cov, "--k", "0")[0] == 2


def test_collinear_covariates_are_numeric_error(tmp_path):
    X = pd.read_csv(COV)
    X["x3"] = 2 * X["x2"]
    cov = tmp_path / "dup.csv"
    X.to_csv(cov, index=False)
    code, _ = run(tmp_path, "fit", "--responses", RESP, "--covariates", str(cov), "--k", "1")
    assert code == 3


def test_responses_reader_infers_missingness():
    data = read_responses(RESP)
    df = pd.read_csv(RESP)
    observed = df.groupby(["person", "time"]).size()
    assert data.missing.sum() == len(observed)
    assert data.responses.shape == (40, 3, 3)


# -- other commands --------------------------------------------------------------------------

def test_select_k_singleton(tmp_path):
    code, out = run(tmp_path, "select-k", "--responses", RESP, "--covariates", COV, "--k-set", "2")
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert list(report["ic"]) == ["2"] and report["k_hat"] == 2
    assert len(pd.read_csv(out / "ic.csv")) == 1


def test_evaluate_outputs(tmp_path):
    code, out = run(tmp_path, "evaluate", "--responses", RESP, "--covariates", COV, "--k", "1",
                    "--n-perm", "2", "--max-sweeps", "50")
    assert code == 0
    tests = pd.read_csv(out / "tests.csv")
    assert set(tests.hypothesis) == {"x1", "x2"}
    assert np.all(tests.p_value <= tests.adj_p_value)
    coefs = pd.read_csv(out / "coefficients.csv")
    assert len(coefs) == 3 * 2 and np.all(coefs.se > 0)
    report = json.loads((out / "report.json").read_text())
    assert report["permutation"]["n_used"] == 2
    assert len(pd.read_csv(out / "permutation_null.csv")) == 2


def test_evaluate_from_params_file(tmp_path):
    code, out = run(tmp_path, "evaluate", "--responses", RESP, "--covariates", COV, "--params", str(GOLDEN))
    assert code == 0
    assert "fit" not in json.loads((out / "report.json").read_text())


def test_predict_with_perfect_history(tmp_path):
    N, J, T = 12, 4, 3
    rows, actual = [], []
    for i in range(N):
        fav = i % J
        for t in range(T):
            rows.extend((i + 1, j + 1, t + 1, int(j == fav)) for j in range(J))
        actual.append((i + 1, fav + 1, 1))
    resp = tmp_path / "resp.csv"
    pd.DataFrame(rows, columns=["person", "item", "time", "value"]).to_csv(resp, index=False)
    act = tmp_path / "actual.csv"
    pd.DataFrame(actual, columns=["person", "item", "value"]).to_csv(act, index=False)
    code, out = run(tmp_path, "predict", "--responses", str(resp), "--k", "0", "--top-k", "1",
                    "--actual", str(act), "--max-sweeps", "50")
    assert code == 0
    sens = pd.read_csv(out / "sensitivity.csv").set_index("strategy").sensitivity
    assert sens["Hist"] == 1.0 and sens["HistProp"] == 1.0
    probs = pd.read_csv(out / "probs.csv")
    assert len(probs) == N * J and probs.prob.between(0, 1).all()
    dev = pd.read_csv(out / "deviance.csv")
    assert sorted(dev.time.unique()) == [1, 2, 3]
    recs = pd.read_csv(out / "recommendations.csv")
    assert set(recs.strategy) == {"Hist", "Prop", "HistHist", "HistProp"}


def test_predict_without_purchases_is_input_error(tmp_path):
    act = _write(tmp_path / "none.csv", "person,item,value\n1,1,0\n")
    code, _ = run(tmp_path, "predict", "--responses", RESP, "--params", str(GOLDEN), "--actual", act)
    assert code == 2


def test_simulate_small(tmp_path):
    args = ("simulate", "--k-set", "1-3", "--seed", "1")
    cfg = _write(tmp_path / "cfg.json", json.dumps({"J": 12, "N": 60, "T": 3, "K_star": 1, "n_reps": 2}))
    code, out = run(tmp_path, *args, "--config", cfg, name="a")
    code2, out2 = run(tmp_path, *args, "--config", cfg, name="b")
    assert code == code2 == 0
    assert (out / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()
    assert (out / "per_rep.csv").read_bytes() == (out2 / "per_rep.csv").read_bytes()
    summary = json.loads((out / "summary.json").read_text())["summary"]
    assert 0.0 <= summary["p_k_correct"] <= 1.0


def test_parse_k_set():
    assert parse_k_set("1-3,5") == [1, 2, 3, 5]
    assert parse_k_set([2, 2]) == [2]
    with pytest.raises(ConfigurationError):
        parse_k_set("")
