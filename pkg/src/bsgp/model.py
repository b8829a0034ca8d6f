"""Sparse-GP model state, whitening, conditional moments, and energies.

The sampled state of one GP layer is ``(theta, Z, nu)`` where ``nu`` are
whitened inducing variables: ``u = L_zz nu`` with ``K_zz = L_zz L_zz^T``.
Under this reparameterization the inducing-variable prior contribution to
the energy is a standard normal on ``nu``.

The negative log posterior (up to a constant) over a minibatch of size B
out of N points is

    U = -[ (N/B) * sum_n ell_n + log p(nu) + log p(Z) + log p(theta) ]

with ``ell_n`` the per-point log-expectation (``objective='fitc'``) or
expectation-of-log (``objective='vfe'``) likelihood term.  Minibatch
scaling applies to the likelihood sum only, never to the priors.
"""

from __future__ import annotations

import dataclasses
import io
import math
from functools import partial
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from . import kernel as kernel_mod
from . import likelihood as lik_mod
from . import priors as priors_mod
from .errors import SingularMatrixError
from .kernel import KernelHyper, _chol_ladder, _gram
from .likelihood import LikelihoodParams, MarginalMoments
from .priors import Priors

_LOG_2PI = math.log(2.0 * math.pi)

FITC = "fitc"
VFE = "vfe"
_OBJECTIVES = (FITC, VFE)

MEAN_ZERO = "zero"
MEAN_IDENTITY = "identity"


class Minibatch(NamedTuple):
    X: jax.Array
    y: jax.Array


@partial(
    jax.tree_util.register_dataclass,
    data_fields=("hyper", "Z", "nu"),
    meta_fields=("mean_fn",),
)
@dataclasses.dataclass
class LayerState:
    """One sparse-GP layer: hyper-parameters, inducing inputs, whitened nu.

    ``Z`` is M x D, ``nu`` is M x P with P the layer output dimension.
    ``mean_fn`` is 'zero' or 'identity' (identity pads/truncates when the
    input and output widths differ); it only matters inside deep stacks.
    """

    hyper: KernelHyper
    Z: jax.Array
    nu: jax.Array
    mean_fn: str = MEAN_ZERO

    @property
    def num_inducing(self) -> int:
        return int(self.Z.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.Z.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.nu.shape[1])

    def validate(self):
        self.hyper.validate()
        if self.Z.ndim != 2 or self.nu.ndim != 2:
            raise ValueError("Z and nu must be 2-D")
        if self.Z.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        if self.nu.shape[0] != self.Z.shape[0]:
            raise ValueError("nu row count must equal Z row count")
        if self.Z.shape[1] != self.hyper.input_dim:
            raise ValueError("Z column count must match kernel dimension")
        if self.mean_fn not in (MEAN_ZERO, MEAN_IDENTITY):
            raise ValueError(f"unknown mean_fn {self.mean_fn!r}")
        if not bool(jnp.all(jnp.isfinite(self.Z)) & jnp.all(jnp.isfinite(self.nu))):
            raise ValueError("layer state must be finite")


@partial(
    jax.tree_util.register_dataclass, data_fields=("layers", "lik"), meta_fields=()
)
@dataclasses.dataclass
class ModelState:
    """Ordered GP layers plus likelihood parameters."""

    layers: tuple[LayerState, ...]
    lik: LikelihoodParams

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def validate(self, data_dim=None):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for layer in self.layers:
            layer.validate()
        self.lik.validate()
        if data_dim is not None and self.layers[0].input_dim != data_dim:
            raise ValueError(
                f"first layer expects dimension {self.layers[0].input_dim}, "
                f"data has {data_dim}"
            )
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.input_dim != prev.output_dim:
                raise ValueError("layer widths do not chain")
        if self.layers[-1].output_dim != 1:
            raise ValueError("final layer must have one output")


def _apply_mean_fn(X, layer: LayerState):
    """Layer mean function: zero, or identity padded/truncated to width P."""
    if layer.mean_fn == MEAN_ZERO:
        return jnp.zeros((X.shape[0], layer.output_dim), dtype=X.dtype)
    d, p = X.shape[1], layer.output_dim
    if p == d:
        return X
    if p < d:
        return X[:, :p]
    pad = jnp.zeros((X.shape[0], p - d), dtype=X.dtype)
    return jnp.concatenate([X, pad], axis=1)


def _layer_moments(Xb, layer: LayerState):
    """Conditional moments of f(Xb) given (theta, Z, nu); jit-friendly.

    Returns ``(mean, var, ok)`` with mean (B, P), var (B,), and ok False
    when K_zz failed to factor even at maximum jitter (NaNs propagate).
    """
    h = layer.hyper
    inv_ls = jnp.exp(-h.log_lengthscales)
    Zs = layer.Z * inv_ls
    Xs = Xb * inv_ls
    Kzz = kernel_mod._gram_scaled(Zs, Zs, h.log_variance)
    L, _, ok = _chol_ladder(Kzz)
    Kzx = kernel_mod._gram_scaled(Zs, Xs, h.log_variance)
    A = solve_triangular(L, Kzx, lower=True)
    mean = A.T @ layer.nu
    var = jnp.maximum(jnp.exp(h.log_variance) - jnp.sum(A * A, axis=0), 0.0)
    return mean, var, ok


def _safe_std(var):
    """sqrt of a clamped variance without NaN gradients at the clamp."""
    positive = var > 0
    return jnp.where(positive, jnp.sqrt(jnp.where(positive, var, 1.0)), 0.0)


def _log_nu_prior(nu):
    return -0.5 * jnp.sum(nu * nu) - 0.5 * nu.size * _LOG_2PI


def _final_ell(mean, var, yb, lik: LikelihoodParams, objective: str):
    if objective == FITC:
        return lik_mod._log_expectation_core(mean, var, yb, lik)
    return lik_mod._expectation_of_log_core(mean, var, yb, lik)


def _core_energy(state: ModelState, Xb, yb, zetas, objective, priors: Priors, n_total):
    """Energy shared by shallow and deep models.

    ``zetas`` holds one (B, P_l) standard-normal draw per inner layer;
    pass an empty tuple for single-layer models.
    """
    current = Xb
    prior_total = jnp.asarray(0.0)
    n_layers = len(state.layers)
    final_mean = final_var = None
    for i, layer in enumerate(state.layers):
        mean, var, _ = _layer_moments(current, layer)
        mean = mean + _apply_mean_fn(current, layer)
        prior_total = prior_total + _log_nu_prior(layer.nu)
        prior_total = prior_total + priors_mod._log_prior_z_core(
            layer.Z,
            layer.hyper.log_lengthscales,
            layer.hyper.log_variance,
            priors.inducing,
        )
        prior_total = prior_total + priors_mod._log_prior_theta_core(
            layer.hyper.log_lengthscales,
            layer.hyper.log_variance,
            None,
            priors.hyper,
        )
        if i < n_layers - 1:
            current = mean + _safe_std(var)[:, None] * zetas[i]
        else:
            final_mean, final_var = mean[:, 0], var
    if state.lik.log_noise_variance is not None:
        prior_total = prior_total + priors_mod._lognormal_logpdf_from_log(
            state.lik.log_noise_variance,
            priors.hyper.variance_log_mean,
            priors.hyper.log_std,
        )
    ell = _final_ell(final_mean, final_var, yb, state.lik, objective)
    scale = jnp.asarray(n_total, dtype=jnp.float64) / Xb.shape[0]
    return -(scale * jnp.sum(ell) + prior_total)


_core_energy_jit = jax.jit(_core_energy, static_argnames=("objective",))
_core_energy_grad = jax.jit(
    jax.grad(_core_energy), static_argnames=("objective",)
)
_core_energy_value_and_grad = jax.jit(
    jax.value_and_grad(_core_energy), static_argnames=("objective",)
)


def _as_batch(batch) -> Minibatch:
    if isinstance(batch, Minibatch):
        X, y = batch
    else:
        X, y = batch
    X = jnp.atleast_2d(jnp.asarray(X, dtype=jnp.float64))
    y = jnp.asarray(y, dtype=jnp.float64).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise ValueError("batch X and y lengths differ")
    if X.shape[0] < 1:
        raise ValueError("batch must contain at least one point")
    return Minibatch(X, y)


def _check_shallow_args(state, batch, objective, priors, n_total):
    if objective not in _OBJECTIVES:
        raise ValueError(f"objective must be one of {_OBJECTIVES}")
    batch = _as_batch(batch)
    state.validate(data_dim=batch.X.shape[1])
    if state.num_layers != 1:
        raise ValueError("log_energy is for single-layer models; see deep module")
    priors.validate()
    if not n_total >= batch.X.shape[0]:
        raise ValueError("n_total must be >= batch size")
    return batch


def unwhiten(layer: LayerState):
    """Recover inducing variables u = L_zz nu.

    Raises SingularMatrixError when K_zz cannot be factored at maximum
    ladder jitter.
    """
    layer.validate()
    h = layer.hyper
    Kzz = _gram(layer.Z, layer.Z, h.log_lengthscales, h.log_variance)
    L, _, ok = _chol_ladder(Kzz)
    if not bool(ok):
        raise SingularMatrixError("K_zz is singular beyond the jitter ladder")
    return L @ layer.nu


def conditional_moments(Xb, layer: LayerState) -> MarginalMoments:
    """Per-point conditional mean and (clamped) variance at Xb.

    mean_n = k(x_n, Z) K_zz^{-1} u and var_n = k(x_n, x_n) -
    k(x_n, Z) K_zz^{-1} k(Z, x_n), evaluated through the whitened
    parameterization.  The layer mean function is not added here.
    """
    layer.validate()
    Xb = jnp.atleast_2d(jnp.asarray(Xb, dtype=jnp.float64))
    if Xb.shape[1] != layer.input_dim:
        raise ValueError("input dimension mismatch")
    mean, var, ok = _layer_moments(Xb, layer)
    if not bool(ok):
        raise SingularMatrixError("K_zz is singular beyond the jitter ladder")
    if layer.output_dim == 1:
        mean = mean[:, 0]
    return MarginalMoments(mean=mean, var=var)


def log_energy(state: ModelState, batch, objective, priors: Priors, n_total):
    """Minibatch-scaled negative log posterior of a single-layer model."""
    batch = _check_shallow_args(state, batch, objective, priors, n_total)
    value = _core_energy_jit(state, batch.X, batch.y, (), objective, priors, n_total)
    if not bool(jnp.isfinite(value)):
        _raise_if_singular(state)
        raise ArithmeticError("energy is non-finite for this state")
    return float(value)


def grad_energy(state: ModelState, batch, objective, priors: Priors, n_total):
    """Gradient of ``log_energy`` with respect to every sampled coordinate.

    Returns a structure mirroring ModelState (log-domain hyper-parameters,
    Z entries, nu entries, and the log noise variance when present).
    """
    batch = _check_shallow_args(state, batch, objective, priors, n_total)
    grad = _core_energy_grad(state, batch.X, batch.y, (), objective, priors, n_total)
    leaves = jax.tree_util.tree_leaves(grad)
    if not all(bool(jnp.all(jnp.isfinite(leaf))) for leaf in leaves):
        _raise_if_singular(state)
        raise ArithmeticError("energy gradient is non-finite for this state")
    return grad


def _raise_if_singular(state: ModelState):
    for i, layer in enumerate(state.layers):
        h = layer.hyper
        Kzz = _gram(layer.Z, layer.Z, h.log_lengthscales, h.log_variance)
        _, _, ok = _chol_ladder(Kzz)
        if not bool(ok):
            raise SingularMatrixError(
                f"layer {i}: K_zz is singular beyond the jitter ladder"
            )


# ---------------------------------------------------------------------------
# Serialization: text header + little-endian float64 payload, bit-exact.
# ---------------------------------------------------------------------------

_MAGIC_STATE = "bsgp-state 1"


def _state_header_lines(state: ModelState):
    lines = [f"layers {state.num_layers}"]
    for i, layer in enumerate(state.layers):
        lines.append(
            f"layer {i} M {layer.num_inducing} D {layer.input_dim} "
            f"P {layer.output_dim} mean {layer.mean_fn}"
        )
    lines.append(f"likelihood {state.lik.kind}")
    return lines


def _state_arrays(state: ModelState):
    """Payload arrays in declared order."""
    arrays = []
    for layer in state.layers:
        arrays.extend(
            [layer.hyper.log_lengthscales, layer.hyper.log_variance, layer.Z, layer.nu]
        )
    if state.lik.log_noise_variance is not None:
        arrays.append(state.lik.log_noise_variance)
    return arrays


def state_payload_size(state: ModelState) -> int:
    return sum(int(np.prod(np.shape(a)) or 1) for a in _state_arrays(state))


def _state_to_bytes(state: ModelState) -> bytes:
    out = io.BytesIO()
    for arr in _state_arrays(state):
        out.write(np.asarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def _state_from_floats(template_meta, flat: np.ndarray) -> ModelState:
    layers = []
    pos = 0

    def take(n, shape):
        nonlocal pos
        chunk = flat[pos : pos + n]
        pos += n
        return jnp.asarray(chunk.reshape(shape))

    for m, d, p, mean_fn in template_meta["layers"]:
        log_ls = take(d, (d,))
        log_var = take(1, ())
        Z = take(m * d, (m, d))
        nu = take(m * p, (m, p))
        layers.append(LayerState(KernelHyper(log_ls, log_var), Z, nu, mean_fn))
    kind = template_meta["likelihood"]
    if kind == lik_mod.PROBIT:
        lik = LikelihoodParams(kind, None)
    else:
        lik = LikelihoodParams(kind, take(1, ()))
    if pos != flat.size:
        raise ValueError("payload size does not match header")
    return ModelState(tuple(layers), lik)


def _parse_state_header(lines):
    meta = {"layers": [], "likelihood": None}
    n_layers = None
    for line in lines:
        parts = line.split()
        if parts[0] == "layers":
            n_layers = int(parts[1])
        elif parts[0] == "layer":
            meta["layers"].append((int(parts[3]), int(parts[5]), int(parts[7]), parts[9]))
        elif parts[0] == "likelihood":
            meta["likelihood"] = parts[1]
        else:
            raise ValueError(f"unrecognized header line: {line!r}")
    if n_layers is None or len(meta["layers"]) != n_layers or meta["likelihood"] is None:
        raise ValueError("malformed state header")
    return meta


def save_state(path, state: ModelState):
    """Write a ModelState; round-trips bit-exactly through ``load_state``."""
    state.validate()
    header = "\n".join([_MAGIC_STATE, *_state_header_lines(state), "end"]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(_state_to_bytes(state))


def load_state(path) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    if raw[:nl].decode("utf-8") != _MAGIC_STATE:
        raise ValueError(f"{path}: not a state file")
    end_marker = b"\nend\n"
    end = raw.index(end_marker)
    lines = raw[nl + 1 : end].decode("utf-8").splitlines()
    meta = _parse_state_header(lines)
    flat = np.frombuffer(raw[end + len(end_marker) :], dtype="<f8")
    return _state_from_floats(meta, flat)
