"""Discrete flow matching over continuous-time Markov chains.

Desk-scale engine: probability paths with exact time derivatives, closed-form
kinetic-optimal and corrector velocities, exact and trainable factorized
posteriors, CTMC samplers, likelihood-bound estimators, and a brute-force
forward-equation oracle.
"""

__version__ = "0.1.0"

from .core import (
    Alphabet,
    JointPmf,
    Metric,
    Pmf,
    absolute_metric,
    empirical_joint,
    index_state,
    make_pmf,
    state_index,
    states_array,
    tv_distance,
)
from .datasets import ToySpec, make_toy, sample_target
from .elbo import (
    ElboEstimate,
    elbo_estimate,
    elbo_integrand_general,
    elbo_integrand_masked,
    elbo_integrand_mixture,
    exact_loglik_oracle,
    kolmogorov_forward,
    make_marginal_column,
)
from .paths import (
    BetaSchedule,
    ConditionalPath,
    CubicScheduler,
    GeodesicBridge,
    KineticOptimalScheduler,
    LinearScheduler,
    MetricPath,
    MixturePath,
    Scheduler,
    ko_path,
    make_scheduler,
    mask_mixture_path,
    metric_path,
    mixture_path,
    scheduler_kinetic_optimal,
    tempered_source,
)
from .posterior import (
    ExactPosterior,
    PosteriorModel,
    TrainableTabular,
    ce_loss,
    exact_posterior,
    marginal_joint,
    train_posterior,
)
from .sampler import (
    SamplerConfig,
    SimulationResult,
    Trajectory,
    always_valid_step,
    corrector_stationarity,
    euler_step,
    posterior_two_step,
    simulate,
    simulate_ensemble,
    trajectory_rng,
)
from .velocity import (
    Flux,
    RateMatrix,
    WeightSpec,
    closed_form_potential,
    conditional_velocity_column,
    conditional_velocity_matrix,
    corrector_flux,
    corrector_velocity_column,
    divergence,
    flux_indicator,
    flux_power,
    flux_power_inf,
    flux_stable,
    integrated_kinetic_energy,
    kinetic_energy,
    laplacian_solve,
    marginal_velocity,
    marginal_velocity_mixture,
    velocity_from_flux,
    velocity_metric_conditional,
    velocity_mixture_conditional,
)
