"""RBF-ARD covariance evaluation, Gram assembly, and jittered Cholesky.

The covariance is

    k(x, x') = a^2 * exp(-1/2 * sum_i ((x_i - x'_i) / l_i)^2)

with one lengthscale ``l_i`` per input dimension and marginal variance
``a^2``.  Hyper-parameters are stored in log domain so samplers and
optimizers can move unconstrained; they are exponentiated at the point of
use.
"""

from __future__ import annotations

import dataclasses
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .errors import SingularMatrixError

# Relative jitter escalation ladder, scaled by mean(diag K) at the point
# of use.
JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)


@partial(
    jax.tree_util.register_dataclass,
    data_fields=("log_lengthscales", "log_variance"),
    meta_fields=(),
)
@dataclasses.dataclass
class KernelHyper:
    """ARD kernel hyper-parameters in log domain.

    Attributes
    ----------
    log_lengthscales : array, shape (D,)
        Log of the per-dimension lengthscales.
    log_variance : scalar array
        Log of the marginal variance a^2.
    """

    log_lengthscales: jax.Array
    log_variance: jax.Array

    @classmethod
    def create(cls, lengthscales, variance):
        """Build from positive lengthscales and variance."""
        ls = jnp.atleast_1d(jnp.asarray(lengthscales, dtype=jnp.float64))
        var = jnp.asarray(variance, dtype=jnp.float64)
        if jnp.any(ls <= 0) or var <= 0:
            raise ValueError("lengthscales and variance must be positive")
        return cls(jnp.log(ls), jnp.log(var))

    @property
    def input_dim(self) -> int:
        return int(self.log_lengthscales.shape[0])

    @property
    def lengthscales(self):
        return jnp.exp(self.log_lengthscales)

    @property
    def variance(self):
        return jnp.exp(self.log_variance)

    def validate(self):
        if self.log_lengthscales.ndim != 1:
            raise ValueError("log_lengthscales must be a 1-D vector")
        if not bool(
            jnp.all(jnp.isfinite(self.log_lengthscales))
            & jnp.all(jnp.isfinite(self.log_variance))
        ):
            raise ValueError("kernel hyper-parameters must be finite")


@dataclasses.dataclass
class GramMatrix:
    """Dense symmetric covariance matrix plus the jitter baked into it."""

    values: np.ndarray
    jitter_applied: float = 0.0

    @classmethod
    def from_points(cls, A, h: KernelHyper) -> "GramMatrix":
        return cls(values=np.asarray(gram(A, A, h)), jitter_applied=0.0)

    def validate(self, variance=None):
        K = self.values
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("Gram matrix must be square")
        scale = max(float(np.max(np.abs(K))), 1.0)
        if float(np.max(np.abs(K - K.T))) > 1e-12 * scale:
            raise ValueError("Gram matrix is not symmetric to 1e-12 relative")
        if self.jitter_applied < 0:
            raise ValueError("jitter_applied must be >= 0")
        if variance is not None:
            expect = float(variance) + self.jitter_applied
            if not np.allclose(np.diag(K), expect, rtol=1e-12, atol=0):
                raise ValueError("diagonal must equal marginal variance + jitter")


def _sqdist(A, B, inv_lengthscales):
    """Pairwise scaled squared distances; (N, M) from (N, D) and (M, D)."""
    diff = (A[:, None, :] - B[None, :, :]) * inv_lengthscales
    return jnp.sum(diff * diff, axis=-1)


def _gram(A, B, log_lengthscales, log_variance):
    """RBF-ARD Gram matrix without argument validation (jit-friendly)."""
    inv_ls = jnp.exp(-log_lengthscales)
    return jnp.exp(log_variance - 0.5 * _sqdist(A, B, inv_ls))


def _gram_scaled(As, Bs, log_variance):
    """Gram from pre-scaled points via the inner-product expansion.

    Cheaper to differentiate than the pairwise-difference form; the
    cancellation error is ~1e-15 * ||x||^2 absolute on the squared
    distance, so on standardized data the kernel stays well within 1e-12
    relative of the scalar definition.
    """
    a2 = jnp.sum(As * As, axis=1)
    b2 = jnp.sum(Bs * Bs, axis=1)
    d2 = jnp.maximum(a2[:, None] + b2[None, :] - 2.0 * (As @ Bs.T), 0.0)
    return jnp.exp(log_variance - 0.5 * d2)


def kernel_eval(x, x2, h: KernelHyper):
    """Evaluate the covariance between two points.

    Parameters
    ----------
    x, x2 : array-like, shape (D,)
    h : KernelHyper

    Returns
    -------
    scalar in (0, a^2], symmetric in its arguments.
    """
    x = jnp.atleast_1d(jnp.asarray(x, dtype=jnp.float64))
    x2 = jnp.atleast_1d(jnp.asarray(x2, dtype=jnp.float64))
    if x.shape != x2.shape or x.ndim != 1:
        raise ValueError(f"point shapes differ: {x.shape} vs {x2.shape}")
    if x.shape[0] != h.input_dim:
        raise ValueError(
            f"point dimension {x.shape[0]} does not match kernel dimension {h.input_dim}"
        )
    return _gram(x[None, :], x2[None, :], h.log_lengthscales, h.log_variance)[0, 0]


def gram(A, B, h: KernelHyper):
    """Cross-covariance matrix between row-point sets A (N, D) and B (M, D).

    Entry (i, j) equals ``kernel_eval(A[i], B[j], h)``.  When called with
    the same points for A and B the result is exactly symmetric with
    diagonal equal to the marginal variance.
    """
    A = jnp.atleast_2d(jnp.asarray(A, dtype=jnp.float64))
    B = jnp.atleast_2d(jnp.asarray(B, dtype=jnp.float64))
    if A.shape[1] != h.input_dim or B.shape[1] != h.input_dim:
        raise ValueError(
            f"column counts ({A.shape[1]}, {B.shape[1]}) must equal kernel "
            f"dimension {h.input_dim}"
        )
    return _gram(A, B, h.log_lengthscales, h.log_variance)


def _chol_ladder(K):
    """Cholesky with escalating relative jitter; jit-safe.

    Returns ``(L, jitter, ok)``.  The common jitter-free case costs one
    factorization; the ladder runs inside a ``lax.cond`` fallback whose
    probe factorizations are under ``stop_gradient``, so only the final
    factorization participates in differentiation.  When every ladder
    level fails, ``ok`` is False and ``L`` is NaN.
    """
    m = K.shape[-1]
    eye = jnp.eye(m, dtype=K.dtype)
    scale = jnp.mean(jnp.diagonal(K))
    L0 = jnp.linalg.cholesky(K)

    def plain(_):
        return L0, jnp.asarray(0.0, K.dtype), jnp.asarray(True)

    def escalate(_):
        probe = jax.lax.stop_gradient(K)
        oks = jnp.stack(
            [
                jnp.all(jnp.isfinite(jnp.linalg.cholesky(probe + (j * scale) * eye)))
                for j in JITTER_LADDER[1:]
            ]
        )
        jitter = jnp.asarray(JITTER_LADDER[1:])[jnp.argmax(oks)] * scale
        L = jnp.linalg.cholesky(K + jax.lax.stop_gradient(jitter) * eye)
        return L, jitter, jnp.any(oks)

    return jax.lax.cond(jnp.all(jnp.isfinite(L0)), plain, escalate, None)


def chol_jitter(K):
    """Lower-triangular factor of K + jitter*I for the smallest working jitter.

    The jitter escalates through ``JITTER_LADDER`` scaled by the mean
    diagonal of K.

    Parameters
    ----------
    K : (M, M) array or GramMatrix

    Returns
    -------
    L : (M, M) lower-triangular array with ``L @ L.T = K + jitter_used * I``
    jitter_used : float

    Raises
    ------
    ValueError
        If K is not square symmetric or contains non-finite entries.
    SingularMatrixError
        If factorization fails at the maximum ladder jitter.
    """
    if isinstance(K, GramMatrix):
        K = K.values
    K = jnp.asarray(K, dtype=jnp.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("K must be square")
    if not bool(jnp.all(jnp.isfinite(K))):
        raise ValueError("K contains non-finite entries")
    if not bool(jnp.allclose(K, K.T, rtol=1e-8, atol=1e-12)):
        raise ValueError("K must be symmetric")
    L, jitter, ok = _chol_ladder(K)
    if not bool(ok):
        tried = float(JITTER_LADDER[-1] * jnp.mean(jnp.diagonal(K)))
        raise SingularMatrixError(
            f"Cholesky failed at maximum jitter {tried:.3e}", jitter_tried=tried
        )
    return L, float(jitter)
