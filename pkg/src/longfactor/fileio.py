"""CSV readers and JSON writers used by the command line front end.

Responses come in long format ``person,item,time,value`` with contiguous
1-based identifiers.  A person-time slice is either complete (all items) or
absent; absence means the slice is unobserved.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import InputError
from .model import Dataset, Layout, ModelSpec, ParameterSet

PARAMS_FORMAT = 1


def _read_csv(path, required):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: file not found")
    try:
        df = pd.read_csv(path, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot parse CSV ({exc})") from None
    df.columns = [str(c).strip() for c in df.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise InputError(f"{path}: missing column(s) {', '.join(missing)}; header is {list(df.columns)}")
    return path, df


def _numeric(path, df, cols):
    out = {}
    for c in cols:
        vals = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(vals)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            # header is line 1
            raise InputError(f"{path}, line {row + 2}: column {c!r} has non-numeric, NaN or Inf value "
                             f"{df[c].iloc[row]!r}")
        out[c] = vals
    return out


def _ids(path, df, vals, col):
    v = vals[col]
    bad = (v != np.round(v)) | (v < 1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise InputError(f"{path}, line {row + 2}: {col} must be a positive integer, got {df[col].iloc[row]!r}")
    ids = v.astype(np.int64)
    present = np.unique(ids)
    if present.size != ids.max():
        gap = int(np.setdiff1d(np.arange(1, ids.max() + 1), present)[0])
        raise InputError(f"{path}: {col} identifiers must be contiguous from 1; {gap} is missing")
    return ids - 1


def read_responses(path, family="bernoulli"):
    """Responses array (N x J x T) and observation indicator (N x T)."""
    path, df = _read_csv(path, ["person", "item", "time", "value"])
    if len(df) == 0:
        raise InputError(f"{path}: no data rows")
    vals = _numeric(path, df, ["person", "item", "time", "value"])
    i = _ids(path, df, vals, "person")
    j = _ids(path, df, vals, "item")
    t = _ids(path, df, vals, "time")
    N, J, T = i.max() + 1, j.max() + 1, t.max() + 1
    cell = (i * J + j) * T + t
    uniq, first, counts = np.unique(cell, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = np.flatnonzero(cell == uniq[counts > 1][0])
        raise InputError(f"{path}, lines {dup[0] + 2} and {dup[1] + 2}: duplicate (person, item, time)")
    y = np.zeros((N, J, T))
    y[i, j, t] = vals["value"]
    seen = np.zeros((N, J, T), bool)
    seen[i, j, t] = True
    per_slice = seen.sum(axis=1)
    partial = (per_slice > 0) & (per_slice < J)
    if partial.any():
        pi, pt = (int(v) for v in np.argwhere(partial)[0])
        raise InputError(f"{path}: person {pi + 1} at time {pt + 1} has {per_slice[pi, pt]} of {J} items; "
                         "time slices must be complete or absent")
    r = (per_slice == J).astype(float)
    empty = np.flatnonzero(r.sum(axis=1) == 0)
    if empty.size:
        raise InputError(f"{path}: person {empty[0] + 1} has no observed time point")
    try:
        return Dataset(y, r, family=family)
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from None


def read_covariates(path, n_persons):
    """Static covariates ``person,x1..xp`` as an N x p array (rows ordered by person)."""
    path, df = _read_csv(path, ["person"])
    cols = [c for c in df.columns if c != "person"]
    vals = _numeric(path, df, ["person"] + cols)
    pid = _ids(path, df, vals, "person")
    if len(pid) != n_persons or pid.max() + 1 != n_persons or np.unique(pid).size != len(pid):
        raise InputError(f"{path}: expected exactly one row for each of the {n_persons} persons")
    X = np.zeros((n_persons, len(cols)))
    for k, c in enumerate(cols):
        X[pid, k] = vals[c]
    return X, cols


def read_time_covariates(path, n_persons, n_times):
    """Time covariates ``person,time,z1..`` as an N x p_z x T array."""
    path, df = _read_csv(path, ["person", "time"])
    cols = [c for c in df.columns if c not in ("person", "time")]
    vals = _numeric(path, df, ["person", "time"] + cols)
    pid = _ids(path, df, vals, "person")
    tid = _ids(path, df, vals, "time")
    if len(pid) != n_persons * n_times or pid.max() + 1 != n_persons or tid.max() + 1 != n_times \
            or np.unique(pid * n_times + tid).size != len(pid):
        raise InputError(f"{path}: expected one row for every (person, time) with "
                         f"{n_persons} persons and {n_times} times")
    Z = np.zeros((n_persons, len(cols), n_times))
    for k, c in enumerate(cols):
        Z[pid, k, tid] = vals[c]
    return Z, cols


def read_outcomes(path, n_persons, n_items):
    """Binary next-period outcomes ``person,item,value`` as an N x J matrix (absent = 0)."""
    path, df = _read_csv(path, ["person", "item", "value"])
    vals = _numeric(path, df, ["person", "item", "value"])
    pid = vals["person"].astype(np.int64) - 1
    iid = vals["item"].astype(np.int64) - 1
    if np.any((pid < 0) | (pid >= n_persons) | (iid < 0) | (iid >= n_items)):
        raise InputError(f"{path}: person or item identifier outside the fitted data")
    out = np.zeros((n_persons, n_items))
    out[pid, iid] = vals["value"]
    return out


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj):
    """Deterministic JSON text (sorted keys, non-finite numbers as null)."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def config_hash(config):
    return hashlib.sha256(json.dumps(_clean(config), sort_keys=True).encode()).hexdigest()


def params_to_dict(spec, layout, params, family, covariate_names=()):
    return {
        "format": PARAMS_FORMAT,
        "variant": spec.variant,
        "n_factors": spec.n_factors,
        "c1": spec.c1,
        "c2": spec.c2,
        "n_times": layout.T,
        "n_covariates": layout.p,
        "n_time_covariates": layout.pz,
        "covariate_names": list(covariate_names),
        "family": list(family),
        "blocks": {name: [getattr(layout, name).start, getattr(layout, name).stop]
                   for name in ("gamma", "beta", "v", "a")},
        "theta": params.theta,
        "item_params": params.item_params,
        "scale": params.scale,
    }


def write_params(path, spec, layout, params, family, covariate_names=()):
    write_json(path, params_to_dict(spec, layout, params, family, covariate_names))


def read_params(path):
    """Load a parameter file; returns ``(spec, params, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: file not found")
    try:
        d = json.loads(path.read_text())
        spec = ModelSpec.from_variant(d["variant"], int(d["n_factors"]), c1=d["c1"], c2=d["c2"])
        n = len(d["theta"])
        theta = np.array(d["theta"], dtype=float).reshape(n, spec.n_factors)
        U = np.array(d["item_params"], dtype=float)
        params = ParameterSet(theta, U, np.array(d["scale"], dtype=float))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: malformed parameter file ({exc})") from None
    lay = Layout(spec, d["n_times"], d["n_covariates"], d["n_time_covariates"])
    if U.ndim != 2 or U.shape[1] != lay.P:
        raise InputError(f"{path}: item_params width does not match the recorded layout")
    return spec, params, d


def write_table(path, df):
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
