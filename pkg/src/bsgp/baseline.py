"""Closed-form regression baselines, a minimal SVGP, and Adam.

The optimal Gaussian posterior over inducing variables for regression is

    Sigma = (K_zz + sigma^-2 K_zx K_xz)^-1
    m     = sigma^-2 K_zz Sigma K_zx y
    S     = K_zz Sigma K_zz

whose predictive is the DTC/projected-process one; the FITC predictive
replaces sigma^2 I with Lambda = diag(K_xx - K_xz K_zz^-1 K_zx) + sigma^2 I.
A dense exact GP lives here purely as a small-N test oracle.
"""

from __future__ import annotations

import dataclasses
import math
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import cho_solve, solve_triangular

from . import likelihood as lik_mod
from .errors import SingularMatrixError, TrainingDivergedError
from .kernel import KernelHyper, _chol_ladder, _gram
from .likelihood import GAUSSIAN, PROBIT, LikelihoodParams

_LOG_2PI = math.log(2.0 * math.pi)


@partial(
    jax.tree_util.register_dataclass, data_fields=("m", "S_chol"), meta_fields=()
)
@dataclasses.dataclass
class GaussianQ:
    """Gaussian inducing posterior N(m, S), S stored by its Cholesky factor."""

    m: jax.Array
    S_chol: jax.Array

    @property
    def S(self):
        return self.S_chol @ self.S_chol.T


def _chol_or_raise(K, what):
    L, _, ok = _chol_ladder(K)
    if not bool(jnp.all(jnp.isfinite(L))):
        raise SingularMatrixError(f"{what} is singular beyond the jitter ladder")
    return L


def optimal_q(X, y, Z, h: KernelHyper, noise_var) -> GaussianQ:
    """Optimal variational posterior over u for Gaussian regression."""
    X, y, Z = (jnp.asarray(a, dtype=jnp.float64) for a in (X, y, Z))
    y = y.reshape(-1)
    Kzz = _gram(Z, Z, h.log_lengthscales, h.log_variance)
    Kzx = _gram(Z, X, h.log_lengthscales, h.log_variance)
    P = Kzz + Kzx @ Kzx.T / noise_var
    Lp = _chol_or_raise(P, "K_zz + K_zx K_xz / noise")
    m = Kzz @ cho_solve((Lp, True), Kzx @ y) / noise_var
    S = Kzz @ cho_solve((Lp, True), Kzz)
    S = 0.5 * (S + S.T)
    Ls = _chol_or_raise(S, "optimal q covariance")
    return GaussianQ(m=m, S_chol=Ls)


def q_predictive(Xs, Z, h: KernelHyper, q: GaussianQ):
    """Latent predictive moments under an arbitrary Gaussian q(u)."""
    Xs, Z = (jnp.atleast_2d(jnp.asarray(a, dtype=jnp.float64)) for a in (Xs, Z))
    Kzz = _gram(Z, Z, h.log_lengthscales, h.log_variance)
    Lz = _chol_or_raise(Kzz, "K_zz")
    Ksz = _gram(Xs, Z, h.log_lengthscales, h.log_variance)
    A = solve_triangular(Lz, Ksz.T, lower=True)  # L^-1 k_zs
    proj = solve_triangular(Lz.T, A, lower=False)  # K_zz^-1 k_zs
    mean = proj.T @ q.m
    B = q.S_chol.T @ proj
    var = jnp.exp(h.log_variance) - jnp.sum(A * A, axis=0) + jnp.sum(B * B, axis=0)
    return mean, jnp.maximum(var, 0.0)


def dtc_predict(Xs, X, y, Z, h: KernelHyper, noise_var):
    """DTC/projected-process latent predictive (mean, var) at Xs."""
    Xs, X, y, Z = (jnp.asarray(a, dtype=jnp.float64) for a in (Xs, X, y, Z))
    Xs = jnp.atleast_2d(Xs)
    y = y.reshape(-1)
    Kzz = _gram(Z, Z, h.log_lengthscales, h.log_variance)
    Kzx = _gram(Z, X, h.log_lengthscales, h.log_variance)
    Ksz = _gram(Xs, Z, h.log_lengthscales, h.log_variance)
    P = Kzz + Kzx @ Kzx.T / noise_var
    Lp = _chol_or_raise(P, "K_zz + K_zx K_xz / noise")
    mean = Ksz @ cho_solve((Lp, True), Kzx @ y) / noise_var
    Lz = _chol_or_raise(Kzz, "K_zz")
    A = solve_triangular(Lz, Ksz.T, lower=True)
    C = solve_triangular(Lp, Ksz.T, lower=True)
    var = jnp.exp(h.log_variance) - jnp.sum(A * A, axis=0) + jnp.sum(C * C, axis=0)
    return mean, jnp.maximum(var, 0.0)


def fitc_predict(Xs, X, y, Z, h: KernelHyper, noise_var):
    """FITC/SPGP latent predictive (mean, var) at Xs."""
    Xs, X, y, Z = (jnp.asarray(a, dtype=jnp.float64) for a in (Xs, X, y, Z))
    Xs = jnp.atleast_2d(Xs)
    y = y.reshape(-1)
    Kzz = _gram(Z, Z, h.log_lengthscales, h.log_variance)
    Kzx = _gram(Z, X, h.log_lengthscales, h.log_variance)
    Ksz = _gram(Xs, Z, h.log_lengthscales, h.log_variance)
    Lz = _chol_or_raise(Kzz, "K_zz")
    V = solve_triangular(Lz, Kzx, lower=True)
    lam = jnp.exp(h.log_variance) - jnp.sum(V * V, axis=0) + noise_var
    P = Kzz + (Kzx / lam) @ Kzx.T
    Lp = _chol_or_raise(P, "K_zz + K_zx Lambda^-1 K_xz")
    mean = Ksz @ cho_solve((Lp, True), Kzx @ (y / lam))
    A = solve_triangular(Lz, Ksz.T, lower=True)
    C = solve_triangular(Lp, Ksz.T, lower=True)
    var = jnp.exp(h.log_variance) - jnp.sum(A * A, axis=0) + jnp.sum(C * C, axis=0)
    return mean, jnp.maximum(var, 0.0)


# ---------------------------------------------------------------------------
# Dense exact GP (small-N test oracle only)
# ---------------------------------------------------------------------------


def exact_gp_evidence(X, y, h: KernelHyper, noise_var):
    """Dense log marginal likelihood log N(y; 0, K_xx + noise I)."""
    X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
    y = jnp.asarray(y, dtype=jnp.float64).reshape(-1)
    K = _gram(X, X, h.log_lengthscales, h.log_variance) + noise_var * jnp.eye(
        X.shape[0]
    )
    L = _chol_or_raise(K, "K_xx + noise I")
    alpha = cho_solve((L, True), y)
    return float(
        -0.5 * y @ alpha - jnp.sum(jnp.log(jnp.diagonal(L))) - 0.5 * y.size * _LOG_2PI
    )


def exact_gp_predict(Xs, X, y, h: KernelHyper, noise_var):
    """Dense latent predictive moments at Xs."""
    Xs = jnp.atleast_2d(jnp.asarray(Xs, dtype=jnp.float64))
    X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
    y = jnp.asarray(y, dtype=jnp.float64).reshape(-1)
    K = _gram(X, X, h.log_lengthscales, h.log_variance) + noise_var * jnp.eye(
        X.shape[0]
    )
    L = _chol_or_raise(K, "K_xx + noise I")
    Ksx = _gram(Xs, X, h.log_lengthscales, h.log_variance)
    mean = Ksx @ cho_solve((L, True), y)
    A = solve_triangular(L, Ksx.T, lower=True)
    var = jnp.exp(h.log_variance) - jnp.sum(A * A, axis=0)
    return mean, jnp.maximum(var, 0.0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_step(params, grads, moments, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam descent step on matching pytrees.

    ``moments`` is a pair of pytrees (first and second moment estimates);
    pass zeros-initialized trees at t=1.  Returns (params, moments).
    """
    if isinstance(t, (int, np.integer)) and t < 1:
        raise ValueError("t is 1-based")
    m1, m2 = moments
    m1 = jax.tree_util.tree_map(lambda m, g: beta1 * m + (1 - beta1) * g, m1, grads)
    m2 = jax.tree_util.tree_map(
        lambda v, g: beta2 * v + (1 - beta2) * g * g, m2, grads
    )
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    params = jax.tree_util.tree_map(
        lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps), params, m1, m2
    )
    return params, (m1, m2)


def adam_init(params):
    zeros = lambda t: jax.tree_util.tree_map(jnp.zeros_like, t)
    return zeros(params), zeros(params)


# ---------------------------------------------------------------------------
# Minimal SVGP
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class SVGPConfig:
    """Settings for the Adam-trained SVGP baseline."""

    iterations: int = 10_000
    learning_rate: float = 0.01
    batch_size: int | None = 1000
    rng_seed: int = 0
    heteroskedastic: bool = False
    collapse_q: bool = False
    train_q: bool = True
    train_z: bool = True
    train_theta: bool = True
    train_noise: bool = True


@dataclasses.dataclass
class SVGPResult:
    q: GaussianQ
    Z: jax.Array
    hyper: KernelHyper
    lik: LikelihoodParams
    elbo: float
    elbo_trace: np.ndarray


def _q_params_init(Z, h):
    Kzz = _gram(Z, Z, h.log_lengthscales, h.log_variance)
    L, _, _ = _chol_ladder(Kzz + 1e-8 * jnp.eye(Z.shape[0]))
    return {
        "m": jnp.zeros(Z.shape[0]),
        "L_off": jnp.tril(L, -1),
        "L_logdiag": jnp.log(jnp.diagonal(L)),
    }


def _q_from_params(qp) -> GaussianQ:
    L = jnp.tril(qp["L_off"], -1) + jnp.diag(jnp.exp(qp["L_logdiag"]))
    return GaussianQ(m=qp["m"], S_chol=L)


def _elbo(params, Xb, yb, n_total, lik_kind, heteroskedastic, collapse_q):
    """Minibatch-scaled evidence lower bound."""
    h = KernelHyper(params["log_lengthscales"], params["log_variance"])
    Z = params["Z"]
    noise = jnp.exp(params["log_noise"]) if "log_noise" in params else None
    m = Z.shape[0]
    Kzz = _gram(Z, Z, h.log_lengthscales, h.log_variance)
    Lz, _, _ = _chol_ladder(Kzz)
    if collapse_q:
        q = optimal_q_core(Xb, yb, Z, h, noise, Kzz)
    else:
        q = _q_from_params(params["q"])
    Kzx = _gram(Z, Xb, h.log_lengthscales, h.log_variance)
    A = solve_triangular(Lz, Kzx, lower=True)  # L^-1 K_zx
    proj = solve_triangular(Lz.T, A, lower=False)  # K_zz^-1 K_zx
    fmean = proj.T @ q.m
    cond_var = jnp.maximum(jnp.exp(h.log_variance) - jnp.sum(A * A, axis=0), 0.0)
    B = q.S_chol.T @ proj
    fvar = cond_var + jnp.sum(B * B, axis=0)
    if lik_kind == GAUSSIAN:
        if heteroskedastic:
            total = noise + cond_var
            ell = -0.5 * (_LOG_2PI + jnp.log(total) + ((yb - fmean) ** 2 + fvar) / total)
        else:
            ell = -0.5 * (_LOG_2PI + jnp.log(noise) + ((yb - fmean) ** 2 + fvar) / noise)
    else:
        ell = lik_mod._expectation_of_log_core(
            fmean, fvar, yb, LikelihoodParams(PROBIT, None)
        )
    # KL(q || N(0, K_zz))
    iv_m = solve_triangular(Lz, q.m, lower=True)
    iv_S = solve_triangular(Lz, q.S_chol, lower=True)
    kl = 0.5 * (
        jnp.sum(iv_S * iv_S)
        + iv_m @ iv_m
        - m
        + 2.0 * jnp.sum(jnp.log(jnp.diagonal(Lz)))
        - 2.0 * jnp.sum(jnp.log(jnp.diagonal(q.S_chol)))
    )
    scale = jnp.asarray(n_total, dtype=jnp.float64) / Xb.shape[0]
    return scale * jnp.sum(ell) - kl


def optimal_q_core(X, y, Z, h, noise_var, Kzz):
    Kzx = _gram(Z, X, h.log_lengthscales, h.log_variance)
    P = Kzz + Kzx @ Kzx.T / noise_var
    Lp, _, _ = _chol_ladder(P)
    m = Kzz @ cho_solve((Lp, True), Kzx @ y) / noise_var
    S = Kzz @ cho_solve((Lp, True), Kzz)
    Ls, _, _ = _chol_ladder(0.5 * (S + S.T))
    return GaussianQ(m=m, S_chol=Ls)


def elbo(q: GaussianQ, X, y, Z, h: KernelHyper, lik: LikelihoodParams):
    """Full-batch ELBO at an explicit Gaussian q (diagnostic/test entry)."""
    params = {
        "log_lengthscales": h.log_lengthscales,
        "log_variance": h.log_variance,
        "Z": jnp.asarray(Z, dtype=jnp.float64),
        "q": {
            "m": q.m,
            "L_off": jnp.tril(q.S_chol, -1),
            "L_logdiag": jnp.log(jnp.diagonal(q.S_chol)),
        },
    }
    if lik.log_noise_variance is not None:
        params["log_noise"] = lik.log_noise_variance
    X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
    y = jnp.asarray(y, dtype=jnp.float64).reshape(-1)
    return float(
        _elbo(params, X, y, X.shape[0], lik.kind, False, False)
    )


def svgp_train(data, num_inducing, cfg: SVGPConfig, init=None) -> SVGPResult:
    """Jointly optimize (q, Z, theta, noise) on the ELBO with Adam.

    ``data`` is (X, y); ``init`` optionally supplies (Z, KernelHyper,
    LikelihoodParams) to start from.  A zero-iteration call returns the
    initialization unchanged.  Raises TrainingDivergedError when the ELBO
    goes non-finite.
    """
    X = jnp.atleast_2d(jnp.asarray(data[0], dtype=jnp.float64))
    y = jnp.asarray(data[1], dtype=jnp.float64).reshape(-1)
    n, d = X.shape
    if init is not None:
        Z0, h0, lik0 = init
        Z0 = jnp.asarray(Z0, dtype=jnp.float64)
    else:
        key = jax.random.key(cfg.rng_seed)
        idx = jax.random.permutation(key, n)[:num_inducing]
        Z0 = X[idx]
        h0 = KernelHyper(jnp.zeros(d), jnp.asarray(0.0))
        lik0 = LikelihoodParams.gaussian(0.1)
    lik_kind = lik0.kind
    if cfg.heteroskedastic and lik_kind != GAUSSIAN:
        raise ValueError("heteroskedastic variant requires a Gaussian likelihood")
    if cfg.collapse_q and lik_kind != GAUSSIAN:
        raise ValueError("collapsed q requires a Gaussian likelihood")

    params = {
        "log_lengthscales": h0.log_lengthscales,
        "log_variance": h0.log_variance,
        "Z": Z0,
    }
    if lik_kind != PROBIT:
        params["log_noise"] = lik0.log_noise_variance
    if not cfg.collapse_q:
        params["q"] = _q_params_init(Z0, h0)

    frozen = set()
    if not cfg.train_z:
        frozen.add("Z")
    if not cfg.train_theta:
        frozen.update(("log_lengthscales", "log_variance"))
    if not cfg.train_noise and "log_noise" in params:
        frozen.add("log_noise")
    if not cfg.train_q and "q" in params:
        frozen.add("q")

    b = n if cfg.batch_size is None else min(cfg.batch_size, n)
    loss_grad = jax.value_and_grad(
        lambda p, Xb, yb: -_elbo(p, Xb, yb, n, lik_kind, cfg.heteroskedastic, cfg.collapse_q)
    )

    @jax.jit
    def step(params, moments, t, key):
        if b == n:
            Xb, yb = X, y
        else:
            idx = jax.random.permutation(key, n)[:b]
            Xb, yb = X[idx], y[idx]
        loss, grads = loss_grad(params, Xb, yb)
        grads = {k: jax.tree_util.tree_map(jnp.zeros_like, g) if k in frozen else g
                 for k, g in grads.items()}
        params, moments = adam_step(params, grads, moments, t, cfg.learning_rate)
        return params, moments, loss

    moments = adam_init(params)
    trace = []
    key = jax.random.key(cfg.rng_seed)
    for t in range(1, cfg.iterations + 1):
        params, moments, loss = step(params, moments, t, jax.random.fold_in(key, t))
        if t % 50 == 0 or t == cfg.iterations:
            val = float(loss)
            if not math.isfinite(val):
                raise TrainingDivergedError(f"ELBO became non-finite at iteration {t}")
            trace.append(-val)

    h = KernelHyper(params["log_lengthscales"], params["log_variance"])
    Z = params["Z"]
    if lik_kind == PROBIT:
        lik = LikelihoodParams(PROBIT, None)
    else:
        lik = LikelihoodParams(lik_kind, params["log_noise"])
    noise = None if lik_kind == PROBIT else jnp.exp(params["log_noise"])
    if cfg.collapse_q:
        Kzz = _gram(Z, Z, h.log_lengthscales, h.log_variance)
        q = optimal_q_core(X, y, Z, h, noise, Kzz)
    else:
        q = _q_from_params(params["q"])
    final = float(_elbo(params if not cfg.collapse_q else params, X, y, n, lik_kind,
                        cfg.heteroskedastic, cfg.collapse_q))
    return SVGPResult(
        q=q, Z=Z, hyper=h, lik=lik, elbo=final, elbo_trace=np.asarray(trace)
    )
