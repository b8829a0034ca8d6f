"""Run orchestration: build models from configs, train, predict, score.

One "cell" is a (dataset, fold, model) combination; ``run_cell`` trains it
per the configuration and returns the metrics row plus artifacts.  The
benchmark loops cells and appends rows to a CSV through a single writer.

Regression MNLL is reported in original target units (standardized MNLL
plus log of the training-fold target standard deviation); RMSE stays in
standardized units, matching normalized-RMSE semantics.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import time

import jax
import jax.numpy as jnp
import numpy as np

from . import data as data_mod
from .baseline import SVGPConfig, adam_init, adam_step, svgp_train
from .config import RunConfig
from .data import Dataset, kmeans_centroids, random_subset
from .deep import build_deep_layers
from .evaluate import METRICS_COLUMNS, PredictiveEnsemble, auc, error_rate, mnll, rmse
from .kernel import KernelHyper
from .likelihood import GAUSSIAN, PROBIT, LikelihoodParams
from .model import FITC, VFE, LayerState, ModelState, _core_energy
from .predictive import predictive_ensemble, svgp_predictive_ensemble
from .priors import Priors, InducingPriorConfig, HyperPriorConfig
from .sampler import SGHMCConfig, SampleSet, rhat, run_chains

_SGHMC_MODELS = {
    # model name -> (objective, sampled groups, auto warm start)
    "bsgp": (FITC, ("nu", "theta", "Z", "noise"), False),
    "bsgp-vfe": (VFE, ("nu", "theta", "Z", "noise"), False),
    "mcmc-svgp": (VFE, ("nu", "theta", "noise"), True),
    "sghmc-u-only": (FITC, ("nu",), True),
}
_SVGP_MODELS = {"svgp": False, "fitc-svgp": True}


def resolve_dataset(cfg: RunConfig) -> Dataset:
    """Materialize the configured data source."""
    source = cfg.data.source
    kind, _, arg = source.partition(":")
    if kind == "csv":
        if not arg:
            raise ValueError("csv source needs a path: csv:PATH")
        ds = data_mod.load_csv(arg, name=cfg.data.name or None)
    elif kind == "banana":
        ds = data_mod.banana(int(arg or 200), seed=cfg.data.seed)
    elif kind == "toy1d":
        ds = data_mod.toy1d(int(arg or 200), seed=cfg.data.seed)
    elif kind == "synthcls":
        parts = arg.split(":") if arg else ["10000"]
        n = int(parts[0])
        dim = int(parts[1]) if len(parts) > 1 else 8
        ds = data_mod.synthetic_classification(n, dim, seed=cfg.data.seed)
    else:
        raise ValueError(
            f"unknown data source {source!r}; use csv:PATH, banana:N, toy1d:N, "
            "or synthcls:N[:D]"
        )
    if cfg.data.name:
        ds.name = cfg.data.name
    return ds


def build_priors(cfg: RunConfig) -> Priors:
    p = cfg.prior
    if p.inducing == "strauss":
        inducing = InducingPriorConfig.strauss(
            p.strauss_intensity, p.strauss_repulsion, p.strauss_radius
        )
    else:
        inducing = InducingPriorConfig(p.inducing)
    hyper = HyperPriorConfig(
        jnp.asarray(p.lengthscale_log_mean),
        jnp.asarray(p.variance_log_mean),
        jnp.asarray(p.log_std),
    )
    return Priors(inducing, hyper)


def build_state(Xtr, task, cfg: RunConfig) -> ModelState:
    """Initial ModelState: seeded centroid Z, unit hypers, zero nu."""
    n, d = Xtr.shape
    m = cfg.model.num_inducing
    if cfg.model.init == "kmeans":
        z0 = kmeans_centroids(Xtr, m, seed=cfg.data.seed)
    else:
        z0 = random_subset(Xtr, m, seed=cfg.data.seed)
    depth = cfg.model.depth
    layers = []
    # lengthscales start at sqrt(D): unit-lengthscale RBF correlations
    # vanish in high dimension (typical squared distance 2D)
    log_ls0 = 0.5 * math.log(d)
    for ell in range(depth):
        p_out = d if ell < depth - 1 else 1
        layers.append(
            LayerState(
                hyper=KernelHyper(jnp.full(d, log_ls0), jnp.asarray(0.0)),
                Z=jnp.asarray(z0.copy()),
                nu=jnp.zeros((m, p_out)),
            )
        )
    layers = build_deep_layers(layers) if depth > 1 else tuple(layers)
    # noise starts at the standardized-target variance so the initial
    # misfit produces mild gradients
    lik = LikelihoodParams.probit() if task == data_mod.CLASSIFICATION else LikelihoodParams.gaussian(1.0)
    state = ModelState(tuple(layers), lik)
    state.validate(data_dim=d)
    return state


def warm_start(state, data, objective, priors, steps, lr, batch_size, seed):
    """Adam MAP phase on the model energy (all coordinates trained)."""
    if steps <= 0:
        return state
    X = jnp.asarray(data[0], dtype=jnp.float64)
    y = jnp.asarray(data[1], dtype=jnp.float64).reshape(-1)
    n = X.shape[0]
    b = n if batch_size is None else min(batch_size, n)
    inner_widths = [layer.output_dim for layer in state.layers[:-1]]
    grad = jax.grad(_core_energy)

    @jax.jit
    def step(params, moments, t, key):
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
        g = grad(params, Xb, yb, zetas, objective, priors, n)
        return adam_step(params, g, moments, t, lr)

    key = jax.random.key(seed)
    moments = adam_init(state)
    for t in range(1, steps + 1):
        state, moments = step(state, moments, t, jax.random.fold_in(key, t))
    return state


@dataclasses.dataclass
class CellResult:
    row: dict
    samples: SampleSet | None = None
    svgp: object = None
    ensemble: PredictiveEnsemble | None = None


def _trace_matrix(states, Xpts, n_paths, rng_seed):
    """Per-state predictive means at a few points; (num_states, num_points)."""
    ens = predictive_ensemble(states, Xpts, n_paths=n_paths, rng_seed=rng_seed)
    vals = ens.means if ens.kind == "regression" else ens.probs
    return vals.reshape(len(states), -1, Xpts.shape[0]).mean(axis=1)


def predictive_traces(samples: SampleSet, Xpts, n_paths=1, rng_seed=0):
    """Per-chain traces of the predictive mean at each query point.

    Returns a list (one entry per query point) of per-chain trace arrays.
    """
    chain_ids = sorted(set(samples.chain_ids.tolist()))
    per_chain = [
        _trace_matrix(samples.chain_states(c), Xpts, n_paths, rng_seed)
        for c in chain_ids
    ]
    npts = np.asarray(Xpts).shape[0]
    return [[mat[:, j] for mat in per_chain] for j in range(npts)]


def run_cell(cfg: RunConfig, ds: Dataset | None = None) -> CellResult:
    """Train and evaluate one (dataset, fold, model) cell."""
    cfg.validate()
    if ds is None:
        ds = resolve_dataset(cfg)
    folds = data_mod.make_folds(ds, cfg.data.folds, cfg.data.seed)
    fold = folds[cfg.data.fold]
    Xtr, ytr, Xte, yte = fold.arrays(ds)
    tic = time.perf_counter()
    sc = cfg.sampler
    batch = min(sc.minibatch, Xtr.shape[0]) if sc.minibatch > 0 else None

    samples = None
    svgp_result = None
    rhat_field = ""
    if cfg.model.name in _SVGP_MODELS:
        if cfg.model.depth != 1:
            raise ValueError(f"{cfg.model.name} supports depth 1 only")
        hetero = _SVGP_MODELS[cfg.model.name]
        if hetero and ds.task != data_mod.REGRESSION:
            raise ValueError("fitc-svgp requires a regression task")
        init_state = build_state(Xtr, ds.task, cfg)
        layer = init_state.layers[0]
        svgp_cfg = SVGPConfig(
            iterations=sc.burn_in_steps,
            learning_rate=sc.step_size,
            batch_size=batch,
            rng_seed=sc.rng_seed,
            heteroskedastic=hetero,
        )
        svgp_result = svgp_train(
            (Xtr, ytr),
            cfg.model.num_inducing,
            svgp_cfg,
            init=(layer.Z, layer.hyper, init_state.lik),
        )
        ensemble = svgp_predictive_ensemble(
            svgp_result.q, svgp_result.Z, svgp_result.hyper, svgp_result.lik, Xte
        )
    else:
        objective, groups, auto_warm = _SGHMC_MODELS[cfg.model.name]
        if ds.task == data_mod.CLASSIFICATION:
            groups = tuple(g for g in groups if g != "noise")
        priors = build_priors(cfg)
        state = build_state(Xtr, ds.task, cfg)
        warm_steps = sc.warm_start_steps
        if warm_steps == 0 and auto_warm:
            warm_steps = sc.burn_in_steps
        state = warm_start(
            state, (Xtr, ytr), objective, priors, warm_steps, sc.step_size, batch,
            sc.rng_seed,
        )
        chain_cfg = SGHMCConfig(
            step_size=sc.step_size,
            friction=None if sc.friction < 0 else sc.friction,
            noise_estimate=sc.noise_estimate,
            mass=sc.mass,
            burn_in_steps=sc.burn_in_steps,
            keep_every=sc.keep_every,
            num_samples=sc.num_samples,
            num_chains=sc.num_chains,
            rng_seed=sc.rng_seed,
        )
        samples = run_chains(
            state,
            (Xtr, ytr),
            objective,
            priors,
            chain_cfg,
            batch_size=batch,
            sample_groups=groups,
        )
        samples.meta["config"] = cfg.echo()
        ensemble = predictive_ensemble(
            samples, Xte, n_paths=cfg.model.forward_paths, rng_seed=sc.rng_seed
        )
        if sc.num_chains >= 2 and Xte.shape[0] >= 1:
            pts = Xte[: min(3, Xte.shape[0])]
            traces = predictive_traces(samples, pts, rng_seed=sc.rng_seed)
            rhat_field = f"{max(rhat(per_point) for per_point in traces):.4f}"

    seconds = time.perf_counter() - tic
    row = _metrics_row(cfg, ds, fold, ensemble, yte, seconds, rhat_field)
    return CellResult(row=row, samples=samples, svgp=svgp_result, ensemble=ensemble)


def _metrics_row(cfg, ds, fold, ensemble, yte, seconds, rhat_field):
    objective_name = {
        "bsgp": FITC,
        "bsgp-vfe": VFE,
        "mcmc-svgp": VFE,
        "sghmc-u-only": FITC,
        "svgp": "elbo",
        "fitc-svgp": "elbo-hetero",
    }[cfg.model.name]
    test_mnll = mnll(ensemble, yte)
    if ds.task == data_mod.REGRESSION:
        test_mnll += math.log(fold.y_std)
        rmse_or_error = rmse(ensemble, yte)
        auc_field = ""
    else:
        rmse_or_error = error_rate(ensemble, yte)
        auc_field = f"{auc(ensemble, yte):.6f}"
    return {
        "dataset": ds.name,
        "fold": cfg.data.fold,
        "model": cfg.model.name,
        "depth": cfg.model.depth,
        "prior": cfg.prior.inducing,
        "objective": objective_name,
        "M": cfg.model.num_inducing,
        "mnll": f"{test_mnll:.6f}",
        "rmse_or_error": f"{rmse_or_error:.6f}",
        "auc": auc_field,
        "seconds": f"{seconds:.3f}",
        "rhat": rhat_field,
    }


def append_rows(path, rows):
    """Append metric rows to the results CSV, writing the header if new."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _bench_cell(args):
    cfg_text, source, name, fold = args
    from .config import parse_config

    cfg = parse_config(cfg_text)
    cfg.data.source = source
    cfg.data.name = name
    cfg.data.fold = fold
    return run_cell(cfg).row


def bench(cfg: RunConfig, datasets, models, depths, priors_list, folds, out_path):
    """Loop datasets x folds x models x depths x priors; append metric rows.

    ``datasets`` is a list of (source, name) pairs.  Cells run in parallel
    worker processes when BSGP_WORKERS > 1; rows are appended by this
    process in deterministic order either way.
    """
    jobs = []
    for source, name in datasets:
        for model in models:
            for depth in depths:
                for prior in priors_list:
                    for fold in folds:
                        job_cfg = RunConfig(
                            data=dataclasses.replace(cfg.data, source=source, name=name, fold=fold),
                            model=dataclasses.replace(cfg.model, name=model, depth=depth),
                            prior=dataclasses.replace(cfg.prior, inducing=prior),
                            sampler=dataclasses.replace(cfg.sampler),
                        )
                        jobs.append(job_cfg)
    workers = int(os.environ.get("BSGP_WORKERS", "1"))
    rows = []
    if workers > 1:
        import concurrent.futures

        payload = [
            (job.echo(), job.data.source, job.data.name, job.data.fold) for job in jobs
        ]
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_bench_cell, payload))
    else:
        for job in jobs:
            rows.append(run_cell(job).row)
    if out_path:
        append_rows(out_path, rows)
    return rows
