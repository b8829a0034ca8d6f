"""Predictive ensembles and the reported metrics.

An ensemble holds one predictive component per posterior sample (times
forward path, for deep models): Gaussians ``N(mean, var)`` for regression
-- variances include the observation noise -- or Bernoulli success
probabilities for classification.  The mixture over components is the
model's predictive distribution; every density average is log-sum-exp
stabilized.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import DiagnosticUndefinedError

_LOG_2PI = math.log(2.0 * math.pi)

REGRESSION = "regression"
CLASSIFICATION = "classification"

# Results-CSV schema emitted by the benchmark harness.
METRICS_COLUMNS = (
    "dataset",
    "fold",
    "model",
    "depth",
    "prior",
    "objective",
    "M",
    "mnll",
    "rmse_or_error",
    "auc",
    "seconds",
    "rhat",
)


@dataclasses.dataclass
class PredictiveEnsemble:
    """Per-test-point predictive components across posterior samples.

    For regression, ``means`` and ``variances`` are (S, N) with variances
    at or above the observation-noise floor.  For classification,
    ``probs`` is (S, N) with entries in [0, 1].
    """

    kind: str
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    probs: np.ndarray | None = None

    @property
    def num_samples(self):
        arr = self.means if self.kind == REGRESSION else self.probs
        return 0 if arr is None else arr.shape[0]

    def validate(self):
        if self.kind == REGRESSION:
            if self.means is None or self.variances is None:
                raise ValueError("regression ensembles need means and variances")
            if self.means.shape != self.variances.shape or self.means.ndim != 2:
                raise ValueError("means/variances must both be (S, N)")
            if np.any(self.variances <= 0):
                raise ValueError("predictive variances must be positive")
        elif self.kind == CLASSIFICATION:
            if self.probs is None or self.probs.ndim != 2:
                raise ValueError("classification ensembles need (S, N) probs")
            if np.any((self.probs < 0) | (self.probs > 1)):
                raise ValueError("probabilities must lie in [0, 1]")
        else:
            raise ValueError(f"unknown ensemble kind {self.kind!r}")
        if self.num_samples < 1:
            raise ValueError("ensemble must hold at least one sample")


def _logmeanexp(logp, axis=0):
    mx = np.max(logp, axis=axis, keepdims=True)
    out = mx.squeeze(axis) + np.log(np.mean(np.exp(logp - mx), axis=axis))
    return out


def _per_sample_logp(ens: PredictiveEnsemble, y):
    if ens.kind == REGRESSION:
        mu, var = ens.means, ens.variances
        return -0.5 * (_LOG_2PI + np.log(var) + (y[None, :] - mu) ** 2 / var)
    p = np.clip(ens.probs, 1e-300, 1.0)
    q = np.clip(1.0 - ens.probs, 1e-300, 1.0)
    return np.where(y[None, :] == 1, np.log(p), np.log(q))


def _check_targets(ens: PredictiveEnsemble, y):
    ens.validate()
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = ens.means.shape[1] if ens.kind == REGRESSION else ens.probs.shape[1]
    if y.size != n:
        raise ValueError(f"{y.size} targets for {n} test points")
    return y


def mnll(ens: PredictiveEnsemble, y_test) -> float:
    """Mean negative log likelihood of the posterior-averaged predictive.

    Per point this is ``-log mean_s p(y* | sample_s)``; units follow the
    targets handed in (the harness reports regression MNLL in original
    target units by shifting standardized values by log of the target
    standard deviation).
    """
    y = _check_targets(ens, y_test)
    return float(np.mean(-_logmeanexp(_per_sample_logp(ens, y), axis=0)))


def rmse(ens: PredictiveEnsemble, y_test) -> float:
    """Root mean squared error of the mixture-mean point prediction."""
    if ens.kind != REGRESSION:
        raise ValueError("rmse is a regression metric")
    y = _check_targets(ens, y_test)
    point = np.mean(ens.means, axis=0)
    return float(np.sqrt(np.mean((point - y) ** 2)))


def error_rate(ens: PredictiveEnsemble, y_test) -> float:
    """Misclassification rate of the mean probability thresholded at 0.5.

    Ties at exactly 0.5 predict class 1.
    """
    if ens.kind != CLASSIFICATION:
        raise ValueError("error_rate is a classification metric")
    y = _check_targets(ens, y_test)
    pred = (np.mean(ens.probs, axis=0) >= 0.5).astype(np.float64)
    return float(np.mean(pred != y))


def _average_ranks(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(ens: PredictiveEnsemble, y_test) -> float:
    """Mann-Whitney AUC of the mean probabilities; tied scores count 1/2."""
    if ens.kind != CLASSIFICATION:
        raise ValueError("auc is a classification metric")
    y = _check_targets(ens, y_test)
    scores = np.mean(ens.probs, axis=0)
    npos = int(np.sum(y == 1))
    nneg = int(np.sum(y == 0))
    if npos == 0 or nneg == 0:
        raise DiagnosticUndefinedError("auc needs both classes present")
    ranks = _average_ranks(scores)
    return float((np.sum(ranks[y == 1]) - npos * (npos + 1) / 2.0) / (npos * nneg))


def _signed_rank_statistic(diff):
    ranks = _average_ranks(np.abs(diff))
    return float(np.sum(ranks[diff > 0])), ranks


def wilcoxon_signed_rank(a, b) -> float:
    """One-sided signed-rank p-value for the alternative median(a - b) < 0.

    Zero differences are dropped; with n <= 20 the p-value enumerates the
    exact null distribution of the positive-rank sum (tied ranks included),
    beyond that a normal approximation with tie correction and continuity
    correction is used.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("paired vectors must have equal length")
    diff = a - b
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        raise DiagnosticUndefinedError("all differences are zero")
    if n < 5:
        raise ValueError("need at least 5 nonzero differences")
    w_pos, ranks = _signed_rank_statistic(diff)
    if n <= 20:
        # exact: distribution of the positive-rank sum over all 2^n signings
        sums = np.zeros(1)
        for r in ranks:
            sums = np.concatenate([sums, sums + r])
        return float(np.mean(sums <= w_pos + 1e-12))
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = np.sum(counts**3 - counts) / 48.0
    sd = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    z = (w_pos + 0.5 - mean) / sd
    return float(0.5 * (1.0 + math.erf(z / math.sqrt(2.0))))
