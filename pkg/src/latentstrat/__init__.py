"""Latent-trait principal stratification: simulation, fitting, and study tools."""

__version__ = "0.1.0"

from .dataio import (
    read_dataset,
    read_draws_csv,
    read_truth,
    write_dataset,
    write_draws_csv,
    write_truth,
)
from .dataset import Constraint, MeasurementSpec, TrialDataset
from .diagnostics import ParamSummary, ess, mcse_mean, rhat, rhat_all, summarize
from .errors import OracleInfeasibleError, SamplerError, ValidationError
from .measurement import (
    MISSING,
    ItemKind,
    ItemParams,
    ResponseMatrix,
    category_probs,
    matrix_log_lik,
    response_grad,
    response_log_lik,
)
from .oracle import OracleSummary, QuadratureGrid, marginal_log_lik, oracle_posterior_summary
from .posterior import (
    FlatPrior,
    HalfNormalPrior,
    LogNormalPrior,
    NormalPrior,
    Posterior,
    PriorConfig,
    UniformPrior,
    grad_log_posterior,
    log_posterior,
    log_prior,
)
from .sampler import PosteriorDraws, SamplerConfig, fit, run_chains
from .simgen import (
    GroundTruth,
    ScenarioConfig,
    calibrate_residual_variance,
    generate_dataset,
    generate_item_params,
)
from .structural import (
    StructuralParams,
    eta_log_density,
    outcome_log_density,
    outcome_mean,
    principal_effect,
)
from .study import (
    ReplicationRecord,
    ReportRow,
    StudyDesign,
    StudyReport,
    bias,
    coverage,
    desk_scale_design,
    rmse,
    run_study,
)
from .transforms import (
    ParameterLayout,
    ParameterSet,
    from_unconstrained,
    to_unconstrained,
)
