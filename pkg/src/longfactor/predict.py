"""Next-period prediction, residual deviance and top-k recommendation rules."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UndefinedMetricError
from .model import Layout, check_params, cumulants

STRATEGIES = ("Hist", "Prop", "HistHist", "HistProp")
PROB_CLIP = 1e-12


def predict_proba_next(spec, dataset, params):
    """Predicted means at the period after the last observed one (N x J).

    Parameters for the unseen period are carried over from the last one
    (intercept, and coefficients/loadings when they vary over time); under a
    linear intercept the trend is extrapolated.  Time covariates use their
    last observed values.  For Bernoulli items the means are probabilities.
    """
    lay = Layout.for_data(spec, dataset)
    check_params(lay, dataset, params)
    last = lay.T - 1
    iv = float(lay.T + 1) if spec.linear_intercept else 1.0
    D = lay.local_design(dataset, params.theta, last, intercept_value=iv)
    eta = D @ params.item_params[:, lay.index(last)].T
    (mu,) = cumulants(eta, dataset.family, orders=(1,))
    return mu


def residual_deviance(spec, dataset, probs, t):
    """Bernoulli residual deviance at time ``t`` per item and in total."""
    probs = np.asarray(probs, dtype=float)
    N, J = dataset.n_persons, dataset.n_items
    if probs.shape != (N, J):
        raise ConfigurationError(f"probs have shape {probs.shape}, expected {(N, J)}")
    if not 0 <= t < dataset.n_times:
        raise ConfigurationError(f"time index {t} outside 0..{dataset.n_times - 1}")
    y = dataset.responses[:, :, t]
    r = dataset.missing[:, t][:, None]
    mismatch = ((probs <= 0) & (y == 1)) | ((probs >= 1) & (y == 0))
    if np.any(mismatch & (r > 0)):
        warnings.warn("probabilities of exactly 0 or 1 contradict observed outcomes; clipped",
                      RuntimeWarning, stacklevel=2)
    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    cell = -2.0 * r * (y * np.log(p) + (1.0 - y) * np.log1p(-p))
    per_item = cell.sum(axis=0)
    return per_item, float(per_item.sum())


@dataclass(frozen=True)
class RecommendationConfig:
    strategy: str = "HistProp"
    top_k: int = 5
    tie_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if int(self.top_k) < 1:
            raise ConfigurationError("top_k must be at least 1")


def recommend(config, history_counts, probs, popularity=None):
    """Top-k item indices (0-based) per person, best first.

    ``Prop`` ranks by predicted probability, ``Hist`` by the person's own
    purchase counts.  ``HistHist`` and ``HistProp`` break count ties by overall
    item popularity and by predicted probability respectively.  Remaining ties
    are broken by seeded random keys.
    """
    counts = np.asarray(history_counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    N, J = counts.shape
    if probs.shape != (N, J):
        raise ConfigurationError(f"probs have shape {probs.shape}, expected {(N, J)}")
    if config.top_k > J:
        raise ConfigurationError(f"top_k={config.top_k} exceeds the number of items {J}")
    if popularity is None:
        popularity = counts.sum(axis=0)
    popularity = np.broadcast_to(np.asarray(popularity, dtype=float), (N, J))
    noise = np.random.default_rng(config.tie_seed).random((N, J))
    s = config.strategy
    if s == "Prop":
        keys = (noise, -probs)
    elif s == "Hist":
        keys = (noise, -counts)
    elif s == "HistHist":
        keys = (noise, -popularity, -counts)
    else:
        keys = (noise, -probs, -counts)
    order = np.lexsort(keys, axis=-1)
    return order[:, : config.top_k]


def sensitivity(recommendations, actual):
    """Share of actual purchases that appear among the recommendations."""
    actual = np.asarray(actual) > 0
    total = int(actual.sum())
    if total == 0:
        raise UndefinedMetricError("sensitivity is undefined without any actual purchase")
    recs = np.asarray(recommendations, dtype=np.intp)
    hit = np.take_along_axis(actual, recs, axis=1)
    # duplicates in a row would double count; they cannot arise from recommend()
    return float(hit.sum()) / total
