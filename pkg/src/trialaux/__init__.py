"""trialaux: auxiliary-information analyses for disrupted randomized trials.

Subpackages by role:

* :mod:`trialaux.rngdist` -- deterministic splittable random streams and
  normal-law special functions;
* :mod:`trialaux.datagen` -- the synthetic trial generator, its missingness
  pattern and the external-trial scenarios;
* :mod:`trialaux.ols` -- least squares and the complete-case adjusted
  analysis of the final outcome;
* :mod:`trialaux.internal` -- double regression, a two-stage binary rate and
  sequential AIPW, which recover precision from the trial's own data;
* :mod:`trialaux.extfreq` -- minimum-variance / minimum-MSE combination with
  external summaries and parametric-bootstrap inference;
* :mod:`trialaux.bayes` -- commensurability, power-style priors,
  hierarchical and two-stage borrowing, with the sampler in
  :mod:`trialaux.mcmc`;
* :mod:`trialaux.cli` -- scenario orchestration and reporting.
"""

from .datagen import ExternalScenario, GenConfig, TrialDataset, apply_missingness, generate_external, generate_main
from .exceptions import (
    AdaptationError,
    ConfigError,
    ConvergenceError,
    DataStateError,
    DegenerateVarianceError,
    EmptyStratumError,
    InsufficientDataError,
    SingularDesignError,
    TrialAuxError,
    TrialAuxWarning,
)
from .ols import EffectEstimate, FitResult, ancova_complete_case, fit_ols
from .rngdist import RngStream

__all__ = [
    "AdaptationError",
    "ConfigError",
    "ConvergenceError",
    "DataStateError",
    "DegenerateVarianceError",
    "EffectEstimate",
    "EmptyStratumError",
    "ExternalScenario",
    "FitResult",
    "GenConfig",
    "InsufficientDataError",
    "RngStream",
    "SingularDesignError",
    "TrialAuxError",
    "TrialAuxWarning",
    "TrialDataset",
    "ancova_complete_case",
    "apply_missingness",
    "fit_ols",
    "generate_external",
    "generate_main",
]

__version__ = "0.1.0"
