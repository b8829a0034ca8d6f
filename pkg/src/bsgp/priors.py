"""Unnormalized log priors over inducing inputs and kernel hyper-parameters.

Inducing-input priors (selected by ``InducingPriorConfig.kind``):

* ``normal``  — independent standard normals, sum_j log N(z_j; 0, I);
* ``uniform`` — improper flat prior, contributes 0;
* ``dpp``     — determinantal point process, log det K_zz under the
  current kernel hyper-parameters (repulsive);
* ``strauss`` — M log(lambda) + (#pairs closer than r) * log(gamma),
  piecewise constant in Z.

Kernel hyper-parameters and the observation-noise variance get independent
lognormal priors; the returned value is the lognormal log-density of the
positive parameter (log-domain Gaussian minus the log-value Jacobian), and
the same convention feeds the sampler's energy.
"""

from __future__ import annotations

import dataclasses
import math
from functools import partial

import jax
import jax.numpy as jnp

from .kernel import KernelHyper, _chol_ladder, _gram

_LOG_2PI = math.log(2.0 * math.pi)

# Large negative stand-in for -inf, used when a DPP Gram matrix is
# numerically singular beyond the jitter ladder.
NEG_INF_SURROGATE = -1e10

NORMAL = "normal"
UNIFORM = "uniform"
DPP = "dpp"
STRAUSS = "strauss"
_KINDS = (NORMAL, UNIFORM, DPP, STRAUSS)

# Default lognormal locations: lengthscale median 1, variance-like median 0.05.
DEFAULT_LENGTHSCALE_LOG_MEAN = 0.0
DEFAULT_VARIANCE_LOG_MEAN = math.log(0.05)


@partial(
    jax.tree_util.register_dataclass,
    data_fields=("strauss_intensity", "strauss_repulsion", "strauss_radius"),
    meta_fields=("kind",),
)
@dataclasses.dataclass
class InducingPriorConfig:
    """Which inducing-input prior to apply, plus Strauss parameters."""

    kind: str
    strauss_intensity: jax.Array | None = None
    strauss_repulsion: jax.Array | None = None
    strauss_radius: jax.Array | None = None

    @classmethod
    def normal(cls):
        return cls(NORMAL)

    @classmethod
    def uniform(cls):
        return cls(UNIFORM)

    @classmethod
    def dpp(cls):
        return cls(DPP)

    @classmethod
    def strauss(cls, intensity=1.0, repulsion=0.5, radius=0.5):
        return cls(
            STRAUSS,
            jnp.asarray(intensity, dtype=jnp.float64),
            jnp.asarray(repulsion, dtype=jnp.float64),
            jnp.asarray(radius, dtype=jnp.float64),
        )

    def validate(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown inducing prior {self.kind!r}; valid: {_KINDS}")
        if self.kind == STRAUSS:
            if self.strauss_intensity is None or self.strauss_intensity <= 0:
                raise ValueError("strauss intensity must be > 0")
            if self.strauss_repulsion is None or not (
                0 < self.strauss_repulsion <= 1
            ):
                raise ValueError("strauss repulsion must be in (0, 1]")
            if self.strauss_radius is None or self.strauss_radius <= 0:
                raise ValueError("strauss radius must be > 0")
        elif (
            self.strauss_intensity is not None
            or self.strauss_repulsion is not None
            or self.strauss_radius is not None
        ):
            raise ValueError("strauss fields are only valid with kind='strauss'")


@partial(
    jax.tree_util.register_dataclass,
    data_fields=("lengthscale_log_mean", "variance_log_mean", "log_std"),
    meta_fields=(),
)
@dataclasses.dataclass
class HyperPriorConfig:
    """Lognormal hyper-prior locations and common log-domain scale."""

    lengthscale_log_mean: jax.Array = dataclasses.field(
        default_factory=lambda: jnp.asarray(DEFAULT_LENGTHSCALE_LOG_MEAN)
    )
    variance_log_mean: jax.Array = dataclasses.field(
        default_factory=lambda: jnp.asarray(DEFAULT_VARIANCE_LOG_MEAN)
    )
    log_std: jax.Array = dataclasses.field(default_factory=lambda: jnp.asarray(1.0))

    def validate(self):
        if not self.log_std > 0:
            raise ValueError("log_std must be > 0")


@partial(
    jax.tree_util.register_dataclass, data_fields=("inducing", "hyper"), meta_fields=()
)
@dataclasses.dataclass
class Priors:
    """Bundle of inducing-input and hyper-parameter prior configurations."""

    inducing: InducingPriorConfig
    hyper: HyperPriorConfig

    @classmethod
    def default(cls, inducing_kind=NORMAL, **strauss_kwargs):
        if inducing_kind == STRAUSS:
            ind = InducingPriorConfig.strauss(**strauss_kwargs)
        else:
            ind = InducingPriorConfig(inducing_kind)
        return cls(ind, HyperPriorConfig())

    def validate(self):
        self.inducing.validate()
        self.hyper.validate()


def _log_prior_z_core(Z, log_lengthscales, log_variance, cfg: InducingPriorConfig):
    """Jit-friendly inducing-input log prior (no validation)."""
    m = Z.shape[0]
    if cfg.kind == UNIFORM:
        return jnp.asarray(0.0)
    if cfg.kind == NORMAL:
        return -0.5 * jnp.sum(Z * Z) - 0.5 * Z.size * _LOG_2PI
    if cfg.kind == DPP:
        K = _gram(Z, Z, log_lengthscales, log_variance)
        L, _, ok = _chol_ladder(K)
        safe = jnp.where(ok, L, jnp.eye(m, dtype=Z.dtype))
        logdet = 2.0 * jnp.sum(jnp.log(jnp.diagonal(safe)))
        return jnp.where(ok, logdet, NEG_INF_SURROGATE)
    # strauss: count unordered pairs strictly closer than the radius
    diff = Z[:, None, :] - Z[None, :, :]
    d2 = jnp.sum(diff * diff, axis=-1)
    close = d2 < cfg.strauss_radius**2
    pairs = (jnp.sum(close) - m) / 2.0  # drop the diagonal, halve the double count
    return m * jnp.log(cfg.strauss_intensity) + pairs * jnp.log(cfg.strauss_repulsion)


def log_prior_z(Z, h: KernelHyper, cfg: InducingPriorConfig):
    """Unnormalized log prior of an M x D inducing-input configuration.

    The DPP prior returns ``NEG_INF_SURROGATE`` when K_zz is numerically
    singular beyond the jitter ladder.
    """
    cfg.validate()
    Z = jnp.atleast_2d(jnp.asarray(Z, dtype=jnp.float64))
    if not bool(jnp.all(jnp.isfinite(Z))):
        raise ValueError("inducing inputs must be finite")
    return _log_prior_z_core(Z, h.log_lengthscales, h.log_variance, cfg)


def _lognormal_logpdf_from_log(w, log_mean, log_std):
    """log LN(exp(w)); the -w term is the log-value Jacobian."""
    zscore = (w - log_mean) / log_std
    return -w - jnp.log(log_std) - 0.5 * _LOG_2PI - 0.5 * zscore * zscore


def _log_prior_theta_core(
    log_lengthscales, log_variance, noise_log_var, cfg: HyperPriorConfig
):
    total = jnp.sum(
        _lognormal_logpdf_from_log(
            log_lengthscales, cfg.lengthscale_log_mean, cfg.log_std
        )
    )
    total = total + _lognormal_logpdf_from_log(
        log_variance, cfg.variance_log_mean, cfg.log_std
    )
    if noise_log_var is not None:
        total = total + _lognormal_logpdf_from_log(
            noise_log_var, cfg.variance_log_mean, cfg.log_std
        )
    return total


def log_prior_theta(h: KernelHyper, noise_log_var, cfg: HyperPriorConfig):
    """Sum of lognormal log-densities over lengthscales, variance, and noise.

    Each term is evaluated at the exponential of the stored log parameter;
    pass ``noise_log_var=None`` for likelihoods without a noise parameter.
    """
    cfg.validate()
    h.validate()
    if noise_log_var is not None:
        noise_log_var = jnp.asarray(noise_log_var, dtype=jnp.float64)
    return _log_prior_theta_core(
        h.log_lengthscales, h.log_variance, noise_log_var, cfg
    )
