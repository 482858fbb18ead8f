"""Monte Carlo engine for Bayesian adaptive multi-arm clinical-trial designs."""

from .allocation import (ArmStatus, ComparativeProbs, DeadlockError, DesignParams,
                         DropRecord, apply_burn_in, next_assignment, rule1_update,
                         rule2_update, thompson_weights)
from .posterior import (BetaPosterior, EstimatorConfig, GammaPosterior,
                        ProbabilityEstimate, pairwise_prob, prob_below,
                        prob_control_within_margin, prob_exceeds, prob_hazard_min,
                        prob_is_max, prob_is_max_all, prob_is_min, prob_is_min_all,
                        prob_vaccine_efficacy, update_beta, update_gamma)
from .randomization import RandomizationList, generate
from .trial import ScenarioQ, TrialState, TrialTrace, run_trial, step

__version__ = "0.1.0"
