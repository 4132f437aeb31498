"""Nonlinear Hawkes processes with Gaussian-process self-effects.

A point-process toolkit around the bounded intensity Lambda(t) =
lambda * sigmoid(phi(t)), where the linear intensity phi is the sum of a
background GP and a GP memory kernel summed over the event history with
exponential forgetting.  Ships exact blocked Gibbs sampling (Polya-Gamma
augmentation plus a latent thinned Poisson process), sparse mean-field
variational inference, thinning-based simulation, time-rescaling
goodness-of-fit, and a CLI for end-to-end runs.
"""

from .kernels import (
    AggregatedKernel,
    DecayParam,
    KernelMatrix,
    RbfParams,
    SingularKernelError,
    aggregated_kernel,
    chol_with_jitter,
    kernel_hypergrads,
    log_gp_prior_grad,
    rbf,
    rbf_matrix,
)
from .model import (
    EventSequence,
    GammaPrior,
    ModelHyper,
    MultivariateModel,
    heldout_log_likelihood,
    predictive_intensity,
)
from .simulate import (
    GroundTruth,
    make_ground_truth,
    posterior_predictive_simulate,
    thinning_simulate,
)
from .gibbs import ChainOutput, GibbsConfig, run_chain
from .vi import ViConfig, VariationalState, fit, fit_multivariate
from .gof import GofReport, gof_report, ks_uniform_test, multivariate_gof
from .data_io import (
    RunConfig,
    load_config,
    load_events,
    load_results,
    save_config,
    save_events,
    save_results,
)

__version__ = "0.1.0"
