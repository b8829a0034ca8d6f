"""SGHMC transition kernel, chain orchestration, and convergence diagnostics.

The discretized dynamics per step, with step size eps, friction C, noise
estimate B, and scalar mass m, are

    state'    = state + eps * momentum / m
    momentum' = momentum - eps * grad - eps * C * momentum / m
                + N(0, 2 eps (C - B))

with the gradient evaluated at the current state and the noise drawn
independently per coordinate.  There is no Metropolis correction.

RNG discipline: each chain owns ``chain_key = fold_in(key(seed), chain_id)``;
step t consumes ``fold_in(chain_key, t)`` split into a gradient key (for
minibatch selection and any forward-sampling noise) and an injection-noise
key.  Retention scheduling therefore never affects the random stream, and
runs are bit-reproducible per (seed, chain_id).
"""

from __future__ import annotations

import dataclasses
import math
import time
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from . import model as model_mod
from .errors import DiagnosticUndefinedError, DivergedChainError
from .model import Minibatch, ModelState
from .priors import Priors

# Target number of simulation steps fused into one compiled dispatch.
_STEPS_PER_DISPATCH = 16384

GROUP_NU = "nu"
GROUP_Z = "Z"
GROUP_THETA = "theta"
GROUP_NOISE = "noise"
ALL_GROUPS = (GROUP_NU, GROUP_Z, GROUP_THETA, GROUP_NOISE)


@dataclasses.dataclass
class SGHMCConfig:
    """Sampler settings.

    ``friction=None`` resolves to 0.05 / step_size so that the product
    eps * C stays at 0.05 regardless of the step size.
    """

    step_size: float = 0.01
    friction: float | None = None
    noise_estimate: float = 0.0
    mass: float = 1.0
    burn_in_steps: int = 1000
    keep_every: int = 1
    num_samples: int = 256
    num_chains: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.friction is None:
            self.friction = 0.05 / self.step_size if self.step_size > 0 else 0.0

    @classmethod
    def uci_protocol(cls, rng_seed=0, num_chains=1):
        """Benchmark defaults: 10k burn-in, 256 samples, step size 0.01."""
        return cls(
            step_size=0.01,
            burn_in_steps=10_000,
            keep_every=10,
            num_samples=256,
            num_chains=num_chains,
            rng_seed=rng_seed,
        )

    def validate(self):
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.friction < 0 or self.noise_estimate < 0:
            raise ValueError("friction and noise_estimate must be >= 0")
        if self.friction < self.noise_estimate:
            raise ValueError("need friction >= noise_estimate for PSD injected noise")
        if self.mass <= 0:
            raise ValueError("mass must be > 0")
        if self.keep_every < 1:
            raise ValueError("keep_every must be >= 1")
        if self.num_samples < 1 or self.num_chains < 1 or self.burn_in_steps < 0:
            raise ValueError("invalid chain schedule")

    @property
    def noise_std(self) -> float:
        return math.sqrt(2.0 * self.step_size * (self.friction - self.noise_estimate))


def _tree_normal(key, tree, std):
    """One N(0, std^2) draw per coordinate; one split per pytree leaf."""
    leaves, treedef = jax.tree_util.tree_flatten(tree)
    keys = jax.random.split(key, len(leaves))
    draws = [
        std * jax.random.normal(k, jnp.shape(leaf), jnp.result_type(leaf))
        for k, leaf in zip(keys, leaves)
    ]
    return jax.tree_util.tree_unflatten(treedef, draws)


def _masked(update, mask):
    if mask is None:
        return update
    return jax.tree_util.tree_map(lambda u, m: u * m, update, mask)


def _sghmc_update(params, momentum, grad, noise, cfg: SGHMCConfig, mask=None):
    eps, c, m = cfg.step_size, cfg.friction, cfg.mass
    delta_p = jax.tree_util.tree_map(lambda r: (eps / m) * r, momentum)
    params = jax.tree_util.tree_map(
        lambda p, d: p + d, params, _masked(delta_p, mask)
    )
    delta_r = jax.tree_util.tree_map(
        lambda g, r, n: -eps * g - (eps * c / m) * r + n, grad, momentum, noise
    )
    momentum = jax.tree_util.tree_map(
        lambda r, d: r + d, momentum, _masked(delta_r, mask)
    )
    return params, momentum


def _leaf_names(tree):
    paths = jax.tree_util.tree_flatten_with_path(tree)[0]
    return [jax.tree_util.keystr(path) for path, _ in paths]


def sghmc_step(state, momentum, grad, cfg: SGHMCConfig, rng, mask=None):
    """One SGHMC transition on arbitrary matching pytrees.

    Raises DivergedChainError naming the first coordinate group whose
    gradient is non-finite.
    """
    cfg.validate()
    for name, leaf in zip(_leaf_names(grad), jax.tree_util.tree_leaves(grad)):
        if not bool(jnp.all(jnp.isfinite(leaf))):
            raise DivergedChainError(
                f"non-finite gradient in coordinate group {name}", group=name
            )
    noise = _tree_normal(rng, momentum, cfg.noise_std)
    return _sghmc_update(state, momentum, grad, noise, cfg, mask)


def _build_dispatcher(grad_fn, cfg: SGHMCConfig, mask):
    """Compile a (burn, collect) pair of chunk runners for one chain setup."""

    def step(carry, t, chain_key):
        params, momentum, bad, first_bad = carry
        key_t = jax.random.fold_in(chain_key, t)
        kgrad, knoise = jax.random.split(key_t)
        grad = grad_fn(params, t, kgrad)
        finite = jnp.stack(
            [jnp.all(jnp.isfinite(leaf)) for leaf in jax.tree_util.tree_leaves(grad)]
        )
        now_bad = ~jnp.all(finite)
        first_bad = jnp.where((first_bad < 0) & now_bad, t, first_bad)
        bad = bad | ~finite
        noise = _tree_normal(knoise, momentum, cfg.noise_std)
        params, momentum = _sghmc_update(params, momentum, grad, noise, cfg, mask)
        return (params, momentum, bad, first_bad), None

    @partial(jax.jit, static_argnames=("n_steps",))
    def burn(params, momentum, chain_key, t0, n_steps):
        n_flags = len(jax.tree_util.tree_leaves(params))
        init = (params, momentum, jnp.zeros(n_flags, bool), jnp.asarray(-1))
        carry, _ = jax.lax.scan(
            lambda c, t: step(c, t, chain_key),
            init,
            t0 + jnp.arange(n_steps),
            unroll=min(4, n_steps),
        )
        return carry

    @partial(jax.jit, static_argnames=("n_groups",))
    def collect(params, momentum, chain_key, t0, n_groups):
        n_flags = len(jax.tree_util.tree_leaves(params))

        def one_sample(carry, g):
            start = t0 + g * cfg.keep_every
            inner = (*carry, jnp.zeros(n_flags, bool), jnp.asarray(-1))
            (params, momentum, bad, first_bad), _ = jax.lax.scan(
                lambda c, t: step(c, t, chain_key),
                inner,
                start + jnp.arange(cfg.keep_every),
                unroll=min(4, cfg.keep_every),
            )
            return (params, momentum), (params, bad, first_bad)

        carry, (samples, bads, first_bads) = jax.lax.scan(
            one_sample, (params, momentum), jnp.arange(n_groups)
        )
        return carry, samples, bads, first_bads

    return burn, collect


def _check_divergence(grad_template, bad_flags, first_bad, last_sample_index):
    if bool(jnp.any(bad_flags)):
        names = _leaf_names(grad_template)
        group = names[int(jnp.argmax(bad_flags))]
        raise DivergedChainError(
            f"chain diverged at step {int(first_bad)}: non-finite gradient "
            f"in coordinate group {group}",
            group=group,
            last_finite_index=last_sample_index,
        )


def sample_loop(init_params, grad_fn, cfg: SGHMCConfig, chain_key, mask=None):
    """Run one SGHMC chain on an arbitrary pytree target.

    ``grad_fn(params, t, key)`` returns the (stochastic) energy gradient at
    step t.  Discards ``burn_in_steps`` steps, then retains every
    ``keep_every``-th state until ``num_samples`` are collected.  Momentum
    is drawn from N(0, mass) at chain start only and persists across
    retained samples.

    Returns ``(samples, seconds)`` where ``samples`` is a list of pytrees.
    """
    cfg.validate()
    burn, collect = _build_dispatcher(grad_fn, cfg, mask)
    momentum = _masked(
        _tree_normal(jax.random.fold_in(chain_key, 0), init_params, math.sqrt(cfg.mass)),
        mask,
    )
    params = init_params
    # steps are 1-based so the momentum-init fold_in(chain_key, 0) is unique
    t = 1
    remaining = cfg.burn_in_steps
    while remaining > 0:
        n = min(remaining, _STEPS_PER_DISPATCH)
        params, momentum, bad, first_bad = burn(
            params, momentum, chain_key, jnp.asarray(t), n
        )
        _check_divergence(params, bad, first_bad, -1)
        t += n
        remaining -= n

    per_dispatch = max(1, _STEPS_PER_DISPATCH // cfg.keep_every)
    samples: list = []
    seconds: list = []
    collected = 0
    while collected < cfg.num_samples:
        g = min(per_dispatch, cfg.num_samples - collected)
        tic = time.perf_counter()
        (params, momentum), stacked, bads, first_bads = collect(
            params, momentum, chain_key, jnp.asarray(t), g
        )
        elapsed = time.perf_counter() - tic
        for i in range(g):
            _check_divergence(
                params,
                bads[i],
                first_bads[i],
                collected + i - 1,
            )
            samples.append(jax.tree_util.tree_map(lambda a, i=i: a[i], stacked))
            seconds.append(elapsed / g)
        t += g * cfg.keep_every
        collected += g
    return samples, seconds


# ---------------------------------------------------------------------------
# Model-level chains
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class SampleSet:
    """Posterior ensemble: retained ModelStates tagged with their chain."""

    states: list[ModelState]
    chain_ids: np.ndarray
    meta: dict = dataclasses.field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def chain_states(self, chain_id):
        return [s for s, c in zip(self.states, self.chain_ids) if c == chain_id]


def group_mask(state: ModelState, groups):
    """ModelState-shaped 0/1 mask selecting the sampled coordinate groups."""
    groups = set(groups)
    unknown = groups - set(ALL_GROUPS)
    if unknown:
        raise ValueError(f"unknown sample groups {sorted(unknown)}; valid: {ALL_GROUPS}")

    def classify(path, leaf):
        name = jax.tree_util.keystr(path)
        if "log_noise_variance" in name:
            group = GROUP_NOISE
        elif "log_lengthscales" in name or "log_variance" in name:
            group = GROUP_THETA
        elif ".Z" in name:
            group = GROUP_Z
        elif ".nu" in name:
            group = GROUP_NU
        else:  # pragma: no cover - state has no other leaves
            raise ValueError(f"cannot classify state leaf {name}")
        return jnp.full(jnp.shape(leaf), 1.0 if group in groups else 0.0)

    return jax.tree_util.tree_map_with_path(classify, state)


def _model_grad_fn(data, objective, priors: Priors, state: ModelState, batch_size):
    """Stochastic gradient closure for (deep) sparse-GP energies."""
    X = jnp.asarray(data[0], dtype=jnp.float64)
    y = jnp.asarray(data[1], dtype=jnp.float64).reshape(-1)
    n = X.shape[0]
    b = n if batch_size is None else min(batch_size, n)
    inner_widths = [layer.output_dim for layer in state.layers[:-1]]
    raw_grad = jax.grad(model_mod._core_energy)

    def grad_fn(params, t, key):
        kbatch, kzeta = jax.random.split(key)
        if b == n:
            Xb, yb = X, y
        else:
            idx = jax.random.permutation(kbatch, n)[:b]
            Xb, yb = X[idx], y[idx]
        zetas = tuple(
            jax.random.normal(jax.random.fold_in(kzeta, i), (b, p))
            for i, p in enumerate(inner_widths)
        )
        return raw_grad(params, Xb, yb, zetas, objective, priors, n)

    return grad_fn


def run_chain(
    init: ModelState,
    data,
    objective,
    priors: Priors,
    cfg: SGHMCConfig,
    rng=None,
    chain_id=0,
    batch_size=None,
    sample_groups=None,
) -> SampleSet:
    """Run a single SGHMC chain over a sparse-GP posterior.

    Parameters
    ----------
    init : ModelState
    data : (X, y) arrays; X is N x D
    objective : 'fitc' or 'vfe'
    priors : Priors
    cfg : SGHMCConfig
    rng : optional int seed overriding ``cfg.rng_seed``
    batch_size : minibatch size (default: full batch)
    sample_groups : subset of {'nu', 'Z', 'theta', 'noise'} to sample;
        everything else stays frozen at its initial value.
    """
    X = np.asarray(data[0], dtype=np.float64)
    init.validate(data_dim=X.shape[1])
    cfg.validate()
    priors.validate()
    seed = cfg.rng_seed if rng is None else rng
    chain_key = jax.random.fold_in(jax.random.key(seed), chain_id)
    mask = None
    if sample_groups is not None:
        mask = group_mask(init, sample_groups)
    grad_fn = _model_grad_fn(data, objective, priors, init, batch_size)
    samples, seconds = sample_loop(init, grad_fn, cfg, chain_key, mask)
    return SampleSet(
        states=samples,
        chain_ids=np.full(len(samples), chain_id, dtype=np.int64),
        meta={"seconds_per_sample": seconds, "rng_seed": seed},
    )


def run_chains(
    init: ModelState,
    data,
    objective,
    priors: Priors,
    cfg: SGHMCConfig,
    rng=None,
    batch_size=None,
    sample_groups=None,
) -> SampleSet:
    """Run ``cfg.num_chains`` independent chains and merge their samples."""
    parts = [
        run_chain(
            init,
            data,
            objective,
            priors,
            cfg,
            rng=rng,
            chain_id=c,
            batch_size=batch_size,
            sample_groups=sample_groups,
        )
        for c in range(cfg.num_chains)
    ]
    states = [s for part in parts for s in part.states]
    chain_ids = np.concatenate([part.chain_ids for part in parts])
    seconds = [t for part in parts for t in part.meta["seconds_per_sample"]]
    seed = cfg.rng_seed if rng is None else rng
    return SampleSet(
        states=states,
        chain_ids=chain_ids,
        meta={"seconds_per_sample": seconds, "rng_seed": seed},
    )


def rhat(per_chain_traces) -> float:
    """Gelman-Rubin potential scale reduction over >= 2 equal-length chains."""
    traces = [np.asarray(t, dtype=np.float64).reshape(-1) for t in per_chain_traces]
    if len(traces) < 2:
        raise ValueError("rhat needs at least two chains")
    n = traces[0].size
    if n < 2 or any(t.size != n for t in traces):
        raise ValueError("chains must have equal lengths >= 2")
    chains = np.stack(traces)
    within = float(np.mean(np.var(chains, axis=1, ddof=1)))
    if within == 0.0:
        raise DiagnosticUndefinedError("within-chain variance is zero")
    between = n * float(np.var(np.mean(chains, axis=1), ddof=1))
    return math.sqrt((within * (n - 1) / n + between / n) / within)


# ---------------------------------------------------------------------------
# Serialization (shares the ModelState container format)
# ---------------------------------------------------------------------------

_MAGIC_SAMPLES = "bsgp-samples 1"


def save_samples(path, samples: SampleSet):
    """Write a SampleSet: text header, chain-id index block, state payloads.

    Only deterministic metadata (the config echo) is serialized; wall-clock
    timings stay in memory so identical seeds yield bit-identical files.
    """
    if not samples.states:
        raise ValueError("cannot save an empty SampleSet")
    lines = [
        _MAGIC_SAMPLES,
        f"count {len(samples.states)}",
        f"chains {len(set(samples.chain_ids.tolist()))}",
        *model_mod._state_header_lines(samples.states[0]),
    ]
    config_echo = samples.meta.get("config", "")
    if config_echo:
        lines.append("config-begin")
        lines.extend(config_echo.rstrip("\n").split("\n"))
        lines.append("config-end")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(np.asarray(samples.chain_ids, dtype="<i8").tobytes())
        for state in samples.states:
            fh.write(model_mod._state_to_bytes(state))


def load_samples(path) -> SampleSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    if raw[:nl].decode("utf-8") != _MAGIC_SAMPLES:
        raise ValueError(f"{path}: not a samples file")
    end_marker = b"\nend\n"
    end = raw.index(end_marker)
    lines = raw[nl + 1 : end].decode("utf-8").splitlines()
    count = None
    header_lines = []
    config_lines = None
    in_config = False
    for line in lines:
        if line == "config-begin":
            in_config = True
            config_lines = []
        elif line == "config-end":
            in_config = False
        elif in_config:
            config_lines.append(line)
        elif line.startswith("count "):
            count = int(line.split()[1])
        elif line.startswith("chains "):
            pass
        else:
            header_lines.append(line)
    if count is None:
        raise ValueError("malformed samples header: missing count")
    meta_info = model_mod._parse_state_header(header_lines)
    body = raw[end + len(end_marker) :]
    chain_ids = np.frombuffer(body[: 8 * count], dtype="<i8").copy()
    floats = np.frombuffer(body[8 * count :], dtype="<f8")
    template = model_mod._state_from_floats(
        meta_info, floats[: floats.size // count] if count else floats
    )
    per_state = model_mod.state_payload_size(template)
    if floats.size != per_state * count:
        raise ValueError("samples payload size mismatch")
    states = [
        model_mod._state_from_floats(meta_info, floats[i * per_state : (i + 1) * per_state])
        for i in range(count)
    ]
    meta = {}
    if config_lines is not None:
        meta["config"] = "\n".join(config_lines) + "\n"
    return SampleSet(states=states, chain_ids=chain_ids, meta=meta)
