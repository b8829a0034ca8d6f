"""Deep-GP composition: forward sampling and the stacked energy.

Hidden layers are marginalized by sampling: each inner layer draws
f_l ~ N(conditional mean + mean function, conditional variance) once per
energy evaluation, independently per point and output (diagonal
conditionals).  The final layer is never sampled; its per-point moments
feed the closed-form (or quadrature) likelihood term.  The estimator is
unbiased in the inner-layer sampling.

Gradients are pathwise: the inner draws are reparameterized as
f = mean + std * zeta with zeta ~ N(0, 1) fixed by the supplied RNG key,
so finite differences at a frozen key check the analytic gradient.
"""

from __future__ import annotations

import dataclasses

import jax
import jax.numpy as jnp

from . import model as model_mod
from .errors import SingularMatrixError
from .likelihood import MarginalMoments
from .model import FITC, ModelState, _apply_mean_fn, _core_energy, _layer_moments, _safe_std
from .priors import Priors


@dataclasses.dataclass
class DeepForwardTrace:
    """Sampled inner-layer activations plus final-layer moments."""

    activations: list  # one (B, P_l) array per inner layer
    final: MarginalMoments


def _draw_zetas(key, batch_size, state: ModelState):
    return tuple(
        jax.random.normal(jax.random.fold_in(key, i), (batch_size, layer.output_dim))
        for i, layer in enumerate(state.layers[:-1])
    )


def _forward(Xb, state: ModelState, zetas):
    activations = []
    current = Xb
    for i, layer in enumerate(state.layers):
        mean, var, ok = _layer_moments(current, layer)
        mean = mean + _apply_mean_fn(current, layer)
        if i < state.num_layers - 1:
            current = mean + _safe_std(var)[:, None] * zetas[i]
            activations.append(current)
        else:
            return activations, MarginalMoments(mean=mean[:, 0], var=var), ok
    raise AssertionError("unreachable")


def forward_sample(Xb, state: ModelState, rng) -> DeepForwardTrace:
    """Propagate a batch through the stack with one sampled path.

    Inner layers contribute one normal draw per point and output; the final
    layer returns moments only (mean function included).
    """
    state.validate()
    Xb = jnp.atleast_2d(jnp.asarray(Xb, dtype=jnp.float64))
    if Xb.shape[1] != state.layers[0].input_dim:
        raise ValueError("input dimension mismatch")
    zetas = _draw_zetas(rng, Xb.shape[0], state)
    activations, final, ok = _forward(Xb, state, zetas)
    if not bool(ok) or not bool(
        jnp.all(jnp.isfinite(final.mean)) & jnp.all(jnp.isfinite(final.var))
    ):
        raise SingularMatrixError("a layer's K_zz is singular beyond the jitter ladder")
    return DeepForwardTrace(activations=activations, final=final)


def _check_deep_args(state: ModelState, batch, priors: Priors, n_total):
    batch = model_mod._as_batch(batch)
    state.validate(data_dim=batch.X.shape[1])
    priors.validate()
    if not n_total >= batch.X.shape[0]:
        raise ValueError("n_total must be >= batch size")
    return batch


def deep_log_energy(
    state: ModelState, batch, priors: Priors, n_total, rng, objective=FITC
):
    """Single-path estimate of the deep model's energy.

    With one layer this equals the shallow ``log_energy`` exactly (no inner
    sampling happens); with more, the inner layers use one reparameterized
    draw governed by ``rng``.
    """
    batch = _check_deep_args(state, batch, priors, n_total)
    zetas = _draw_zetas(rng, batch.X.shape[0], state)
    value = model_mod._core_energy_jit(
        state, batch.X, batch.y, zetas, objective, priors, n_total
    )
    if not bool(jnp.isfinite(value)):
        model_mod._raise_if_singular(state)
        raise ArithmeticError("deep energy is non-finite for this state")
    return float(value)


def deep_grad_energy(
    state: ModelState, batch, priors: Priors, n_total, rng, objective=FITC
):
    """Pathwise gradient of ``deep_log_energy`` at the same frozen draws."""
    batch = _check_deep_args(state, batch, priors, n_total)
    zetas = _draw_zetas(rng, batch.X.shape[0], state)
    grad = model_mod._core_energy_grad(
        state, batch.X, batch.y, zetas, objective, priors, n_total
    )
    leaves = jax.tree_util.tree_leaves(grad)
    if not all(bool(jnp.all(jnp.isfinite(leaf))) for leaf in leaves):
        model_mod._raise_if_singular(state)
        raise ArithmeticError("deep energy gradient is non-finite for this state")
    return grad


def build_deep_layers(shallow_layers):
    """Assign the default mean functions to a stack: identity inside, zero last."""
    out = []
    for i, layer in enumerate(shallow_layers):
        mean_fn = model_mod.MEAN_IDENTITY if i < len(shallow_layers) - 1 else model_mod.MEAN_ZERO
        out.append(dataclasses.replace(layer, mean_fn=mean_fn))
    return tuple(out)
