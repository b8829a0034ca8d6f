"""Assembly of predictive ensembles from posterior samples or a Gaussian q.

Regression components are the closed-form Gaussians N(mean_*, var_* +
noise) per posterior sample; classification components are the probit
closed form at the test moments.  Deep models draw ``n_paths`` forward
samples through the inner layers per posterior sample.
"""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import ndtr

from . import model as model_mod
from .baseline import GaussianQ, q_predictive
from .evaluate import CLASSIFICATION, REGRESSION, PredictiveEnsemble
from .kernel import KernelHyper
from .likelihood import PROBIT, LikelihoodParams
from .model import ModelState, _apply_mean_fn, _layer_moments, _safe_std
from .sampler import SampleSet

DEFAULT_FORWARD_PATHS = 10


def _final_moments(Xs, state: ModelState, zetas):
    current = Xs
    for i, layer in enumerate(state.layers):
        mean, var, _ = _layer_moments(current, layer)
        mean = mean + _apply_mean_fn(current, layer)
        if i < state.num_layers - 1:
            current = mean + _safe_std(var)[:, None] * zetas[i]
    return mean[:, 0], var


def _components(Xs, state: ModelState, zetas):
    mean, var = _final_moments(Xs, state, zetas)
    if state.lik.kind == PROBIT:
        return ndtr(mean / jnp.sqrt(1.0 + var))
    return mean, var + jnp.exp(state.lik.log_noise_variance)


def predictive_ensemble(
    samples, Xs, n_paths=DEFAULT_FORWARD_PATHS, rng_seed=0
) -> PredictiveEnsemble:
    """Build the predictive ensemble of a SampleSet at test inputs Xs.

    Single-layer states contribute one component each; deeper states
    contribute ``n_paths`` forward-sampled components each.
    """
    states = samples.states if isinstance(samples, SampleSet) else list(samples)
    if not states:
        raise ValueError("no posterior samples supplied")
    Xs = jnp.atleast_2d(jnp.asarray(Xs, dtype=jnp.float64))
    template = states[0]
    depth = template.num_layers
    stacked = jax.tree_util.tree_map(lambda *leaves: jnp.stack(leaves), *states)

    if depth == 1:
        fn = jax.jit(jax.vmap(lambda st: _components(Xs, st, ())))
        out = fn(stacked)
    else:
        widths = [layer.output_dim for layer in template.layers[:-1]]
        b = Xs.shape[0]

        def one(state, key):
            zetas = tuple(
                jax.random.normal(jax.random.fold_in(key, i), (b, p))
                for i, p in enumerate(widths)
            )
            return _components(Xs, state, zetas)

        keys = jax.random.split(
            jax.random.key(rng_seed), len(states) * max(1, n_paths)
        ).reshape(len(states), max(1, n_paths))
        fn = jax.jit(
            jax.vmap(jax.vmap(one, in_axes=(None, 0)), in_axes=(0, 0))
        )
        out = fn(stacked, keys)

    if template.lik.kind == PROBIT:
        probs = np.asarray(out).reshape(-1, Xs.shape[0])
        return PredictiveEnsemble(kind=CLASSIFICATION, probs=np.clip(probs, 0.0, 1.0))
    means, variances = (np.asarray(a).reshape(-1, Xs.shape[0]) for a in out)
    return PredictiveEnsemble(kind=REGRESSION, means=means, variances=variances)


def svgp_predictive_ensemble(
    q: GaussianQ, Z, h: KernelHyper, lik: LikelihoodParams, Xs
) -> PredictiveEnsemble:
    """Single-component ensemble from a Gaussian inducing posterior."""
    mean, var = q_predictive(Xs, Z, h, q)
    if lik.kind == PROBIT:
        probs = np.asarray(ndtr(mean / jnp.sqrt(1.0 + var)))[None, :]
        return PredictiveEnsemble(kind=CLASSIFICATION, probs=np.clip(probs, 0.0, 1.0))
    noise = float(jnp.exp(lik.log_noise_variance))
    return PredictiveEnsemble(
        kind=REGRESSION,
        means=np.asarray(mean)[None, :],
        variances=np.asarray(var + noise)[None, :],
    )
