"""Fully Bayesian sparse (and deep) Gaussian processes sampled with SGHMC.

Inducing inputs, inducing variables, and kernel hyper-parameters are all
treated as random variables and sampled jointly with stochastic-gradient
Hamiltonian Monte Carlo, under either a per-point log-expectation (FITC)
or expectation-of-log (VFE) objective.  Closed-form regression baselines
(DTC and FITC predictives, a minimal SVGP) and a benchmark harness are
included.

All array computation runs in float64; importing the package enables
64-bit mode in JAX.
"""

from jax import config as _jax_config

_jax_config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    DiagnosticUndefinedError,
    DivergedChainError,
    ParseError,
    SingularMatrixError,
    TrainingDivergedError,
)
from .kernel import GramMatrix, KernelHyper, chol_jitter, gram, kernel_eval  # noqa: E402
from .likelihood import (  # noqa: E402
    LikelihoodParams,
    MarginalMoments,
    expectation_of_log,
    gauss_hermite,
    log_expectation,
)
from .priors import (  # noqa: E402
    HyperPriorConfig,
    InducingPriorConfig,
    Priors,
    log_prior_theta,
    log_prior_z,
)
from .model import (  # noqa: E402
    LayerState,
    Minibatch,
    ModelState,
    conditional_moments,
    grad_energy,
    load_state,
    log_energy,
    save_state,
    unwhiten,
)
from .sampler import (  # noqa: E402
    SGHMCConfig,
    SampleSet,
    load_samples,
    rhat,
    run_chain,
    run_chains,
    sample_loop,
    save_samples,
    sghmc_step,
)
from .deep import (  # noqa: E402
    DeepForwardTrace,
    deep_grad_energy,
    deep_log_energy,
    forward_sample,
)
from .baseline import (  # noqa: E402
    GaussianQ,
    SVGPConfig,
    adam_step,
    dtc_predict,
    exact_gp_evidence,
    exact_gp_predict,
    fitc_predict,
    optimal_q,
    svgp_train,
)
from .evaluate import (  # noqa: E402
    PredictiveEnsemble,
    auc,
    error_rate,
    mnll,
    rmse,
    wilcoxon_signed_rank,
)
from .data import Dataset, Fold, banana, load_csv, make_folds, toy1d  # noqa: E402

__version__ = "0.1.0"
