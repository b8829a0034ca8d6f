"""Per-datapoint likelihood terms for sparse-GP objectives.

Two flavors are provided for each observation model:

* ``log_expectation`` — log E_{p(f_n)} p(y_n | f_n), the per-point
  log-expectation entering the factorized (FITC-style) objective;
* ``expectation_of_log`` — E_{p(f_n)} log p(y_n | f_n), the expected
  log-likelihood entering the variational (VFE-style) objective.

``p(f_n)`` is the Gaussian with per-point moments carried by
``MarginalMoments``.  Gaussian and probit cases are closed form; anything
else falls back to Gauss-Hermite quadrature.
"""

from __future__ import annotations

import dataclasses
import math
from functools import lru_cache, partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import log_ndtr

GAUSSIAN = "gaussian"
HETEROSKEDASTIC = "heteroskedastic_gaussian"
PROBIT = "bernoulli_probit"
_KINDS = (GAUSSIAN, HETEROSKEDASTIC, PROBIT)

_LOG_2PI = math.log(2.0 * math.pi)

# Default quadrature order used wherever no closed form exists.
DEFAULT_QUAD_ORDER = 20


@partial(
    jax.tree_util.register_dataclass,
    data_fields=("log_noise_variance",),
    meta_fields=("kind",),
)
@dataclasses.dataclass
class LikelihoodParams:
    """Observation model selector plus its (log-domain) parameters.

    ``log_noise_variance`` is present for the Gaussian kinds and ``None``
    for Bernoulli-probit, which carries no parameters.
    """

    kind: str
    log_noise_variance: jax.Array | None = None

    @classmethod
    def gaussian(cls, noise_variance=0.1):
        return cls(GAUSSIAN, jnp.log(jnp.asarray(noise_variance, dtype=jnp.float64)))

    @classmethod
    def heteroskedastic(cls, noise_variance=0.1):
        return cls(
            HETEROSKEDASTIC, jnp.log(jnp.asarray(noise_variance, dtype=jnp.float64))
        )

    @classmethod
    def probit(cls):
        return cls(PROBIT, None)

    @property
    def noise_variance(self):
        return jnp.exp(self.log_noise_variance)

    def validate(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown likelihood kind {self.kind!r}; valid: {_KINDS}")
        if self.kind == PROBIT:
            if self.log_noise_variance is not None:
                raise ValueError("bernoulli_probit carries no parameters")
        else:
            if self.log_noise_variance is None or not bool(
                jnp.isfinite(self.log_noise_variance)
            ):
                raise ValueError("log_noise_variance must be finite")


@partial(
    jax.tree_util.register_dataclass, data_fields=("mean", "var"), meta_fields=()
)
@dataclasses.dataclass
class MarginalMoments:
    """Per-point conditional mean and variance (variance clamped >= 0)."""

    mean: jax.Array
    var: jax.Array

    def validate(self):
        if self.mean.shape[0] != self.var.shape[0]:
            raise ValueError("mean and var lengths differ")
        if bool(jnp.any(self.var < 0)):
            raise ValueError("variances must be >= 0")


@lru_cache(maxsize=None)
def _hermgauss(order: int):
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    return jnp.asarray(nodes), jnp.asarray(weights)


def _gauss_logpdf(y, mean, var):
    return -0.5 * (_LOG_2PI + jnp.log(var) + (y - mean) ** 2 / var)


def _probit_loglik(f, y):
    """log Bern(y; Phi(f)) for labels y in {0, 1}, stable in both tails."""
    return y * log_ndtr(f) + (1.0 - y) * log_ndtr(-f)


def _log_expectation_core(mean, var, y, lp: LikelihoodParams):
    if lp.kind == GAUSSIAN:
        return _gauss_logpdf(y, mean, var + jnp.exp(lp.log_noise_variance))
    if lp.kind == HETEROSKEDASTIC:
        # noise variance per point is sigma^2 + var; integrating f out adds
        # another var on top.
        return _gauss_logpdf(y, mean, 2.0 * var + jnp.exp(lp.log_noise_variance))
    # probit: E Phi-Bernoulli has the classic closed form.
    z = mean / jnp.sqrt(1.0 + var)
    return _probit_loglik(z, y)


def _expectation_of_log_core(mean, var, y, lp: LikelihoodParams, order=DEFAULT_QUAD_ORDER):
    if lp.kind == GAUSSIAN:
        noise = jnp.exp(lp.log_noise_variance)
        return -0.5 * (_LOG_2PI + jnp.log(noise) + ((y - mean) ** 2 + var) / noise)
    if lp.kind == HETEROSKEDASTIC:
        total = jnp.exp(lp.log_noise_variance) + var
        return -0.5 * (_LOG_2PI + jnp.log(total) + ((y - mean) ** 2 + var) / total)
    nodes, weights = _hermgauss(order)
    f = mean[:, None] + jnp.sqrt(2.0 * var)[:, None] * nodes[None, :]
    vals = _probit_loglik(f, y[:, None])
    return vals @ weights / jnp.sqrt(jnp.pi)


def _check_args(mom: MarginalMoments, y, lp: LikelihoodParams):
    lp.validate()
    mom.validate()
    y = jnp.asarray(y, dtype=jnp.float64)
    if y.shape != mom.mean.shape:
        raise ValueError(f"label shape {y.shape} != moment shape {mom.mean.shape}")
    if lp.kind == PROBIT and not bool(jnp.all((y == 0) | (y == 1))):
        raise ValueError("probit labels must be in {0, 1}")
    return y


def log_expectation(mom: MarginalMoments, y, lp: LikelihoodParams):
    """Per-point log E_{N(f; mean, var)} p(y | f).

    Gaussian: log N(y_n; mean_n, var_n + sigma^2).  Probit:
    log Bern(y_n; Phi(mean_n / sqrt(1 + var_n))).
    """
    y = _check_args(mom, y, lp)
    return _log_expectation_core(mom.mean, mom.var, y, lp)


def expectation_of_log(mom: MarginalMoments, y, lp: LikelihoodParams):
    """Per-point E_{N(f; mean, var)} log p(y | f).

    Closed form for the Gaussian kinds; Gauss-Hermite quadrature of order
    ``DEFAULT_QUAD_ORDER`` for probit.
    """
    y = _check_args(mom, y, lp)
    return _expectation_of_log_core(mom.mean, mom.var, y, lp)


def gauss_hermite(mean, var, integrand, order: int):
    """Integrate ``integrand`` against N(f; mean, var) by Gauss-Hermite.

    Uses the change of variables f = mean + sqrt(2 var) t on the Hermite
    nodes.  ``integrand`` must accept an ndarray of evaluation points (a
    scalar-broadcasting function is fine).

    Parameters
    ----------
    mean, var : scalars, var >= 0
    integrand : callable
    order : int >= 1

    Returns
    -------
    float
    """
    if not isinstance(order, (int, np.integer)) or order < 1:
        raise ValueError(f"order must be an integer >= 1, got {order!r}")
    if var < 0:
        raise ValueError("var must be >= 0")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    f = mean + math.sqrt(2.0 * var) * nodes
    vals = np.broadcast_to(np.asarray(integrand(f), dtype=np.float64), f.shape)
    return float(weights @ vals / math.sqrt(math.pi))
