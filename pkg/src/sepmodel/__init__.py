"""Client arrival model for a service system.

Daily first visits follow a negative binomial; return gaps follow a Coxian
phase-type distribution whose parameters depend on client features; each
visit ends the client's lifecycle with a feature-dependent probability.
"""

__version__ = "0.1.0"

from .errors import (
    DataFormatError,
    DomainError,
    InfiniteSojournError,
    InsufficientDataError,
    LogDomainError,
    NonConvergenceError,
    NotOverdispersedError,
    ParameterDomainError,
    SepModelError,
    TailUnderflowError,
    UnsupportedOrderError,
)
from .phase_type import (
    CoxianParams,
    FitConfig,
    GeneratorMatrix,
    beta_to_q,
    coxian_cdf,
    coxian_mean,
    coxian_pdf,
    coxian_quantile,
    coxian_sample,
    coxian_sf,
    general_ph_cdf,
    general_ph_pdf,
    passive_posterior,
    q_to_beta,
)
from .likelihood import (
    ClientFeatures,
    ObjectiveValue,
    ObservationSet,
    RegressionCoefficients,
    contextual_objective,
    delta_inter_arrival,
    delta_sojourn,
    expected_sojourn,
    featureless_loglik,
    predict_client_params,
)
from .optim import check_gradient
from .fit import BootstrapTable, FitResult, bootstrap_significance, fit_contextual, fit_featureless
from .initiation import (
    GofReport,
    NegBinomParams,
    chi2_gof,
    fit_negbinom,
    negbinom_pmf,
    sample_initiations,
)
from .simulate import (
    ClientModel,
    SimConfig,
    SimOutput,
    chi2_compare,
    group_share_table,
    loglog_table,
    run_lifecycle_sim,
    sample_observations,
)
from .intervene import (
    GeoClient,
    Geography,
    InterventionConfig,
    InterventionOutput,
    estimate_pr,
    notification_threshold,
    run_intervention_sim,
    select_van_sites,
)
from .dataio import (
    StudyWindow,
    SurveyRecord,
    TransactionRecord,
    generate_synthetic_population,
    generate_synthetic_visits,
    load_and_merge,
    standardize_features,
)
