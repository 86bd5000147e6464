"""Time-varying vaccine efficacy estimation under staggered unblinding and
placebo crossover, with a reproducible Monte Carlo trial simulator."""

from .cox import CoxFit, StepFunction, fit_cox
from .data import TrialData, read_csv, write_csv
from .errors import (
    ConvergenceError,
    DegenerateRiskSetError,
    IdentifiabilityError,
    PositivityError,
    SeparationError,
    SingularModelError,
    StudyError,
    VeWaneError,
)
from .estimator import (
    EstimationResult,
    WeightedProcesses,
    at_risk_b,
    at_risk_u,
    build_processes,
    estimating_function,
    estimating_jacobian,
    report_ve,
    sandwich_cov,
    solve_theta,
)
from .logistic import LogisticFit, fit_logistic
from .model import (
    ParticipantRecord,
    Theta,
    TrialTimeline,
    WaningModelSpec,
    g_grad,
    g_value,
    validate_record,
    ve_from_theta,
)
from .simulate import (
    ScenarioConfig,
    SimulatedTrial,
    generate_dataset,
    generate_participant,
    invert_piecewise_hazard,
    potential_hazard,
    preset,
)
from .weights import (
    NuisanceFit,
    StabilizedWeightCalculator,
    fit_nuisance,
    stabilized_weight_blinded,
    stabilized_weight_unblinded,
    survival_KR,
)

__version__ = "0.1.0"
