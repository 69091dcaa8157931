"""Doubly robust Bayesian ATE inference by coupling independent posteriors.

The propensity (alpha) and outcome (beta) posteriors are sampled separately
and then entropically tilted so that the doubly robust moment has posterior
mean zero. The ATE is read off the tilted outcome draws by the G-formula.
"""

__version__ = "0.1.0"

from .data import (Dataset, Design, TruthInfo, kang_schafer_transform, load_dataset,
                   standardize_covariates, validate, write_dataset)
from .errors import (ConfigError, DataError, DegenerateReweightError, DiagnosticWarning,
                     DomainError, InfeasibleConstraintError, NonConvergenceError,
                     NumericalError, PostCoupleError, PreconditionError, SelectionEmptyError)
from .estimators import (ATEPosterior, ATESummary, ate_draws, bang_robins_dr, frequentist_dr,
                         frequentist_dr_fit, ipw_estimate, saarela_bootstrap_dr, summarize)
from .moments import MomentSpec, dr_moment, selected_moment, subclass_moment
from .pipeline import FitResult, fit
from .posteriors import (DrawSet, OutcomeModelSpec, PriorSpec, PropensityModelSpec, SamplerConfig,
                         sample_horseshoe_posterior, sample_outcome_posterior,
                         sample_propensity_posterior)
from .selection import SelectionConfig, coupled_selection, select_confounders
from .sensitivity import (SensitivitySpec, XiPrior, sample_sensitivity_param, sensitivity_ate,
                          sensitivity_reweight)
from .simulation import (ScenarioSpec, SimulationReport, add_irrelevant_covariates,
                         apply_misspecification, compute_metrics, generate_kang_schafer,
                         run_replications)
from .tilting import (ParticleSystem, TiltConfig, effective_sample_size, lambda_schedule,
                      prune_particles, solve_lambda, solve_lambda_is, solve_lambda_smc,
                      tilt_moment_values)
