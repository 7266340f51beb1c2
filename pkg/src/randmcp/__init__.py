"""Randomization-based multiple contrast tests for dose-finding trials."""

from .contrasts import ContrastMatrix, contrast_matrix, optimal_contrast
from .data import (
    PotentialOutcomeTable,
    TrialDataset,
    read_potential_outcomes_csv,
    read_trial_csv,
    write_potential_outcomes_csv,
    write_trial_csv,
)
from .dose_response import (
    CandidateModel,
    CandidateSet,
    DoseGrid,
    calibrate_emax,
    default_candidate_set,
    eval_model,
    inverse_logit,
    standardized_shape,
)
from .glm import (
    DesignMatrix,
    GlmFit,
    PopulationAverage,
    covariate_design,
    design_from_assignments,
    detect_separation,
    fit_firth,
    fit_mle,
    population_average_means,
    residuals,
)
from .inference import (
    TestMethod,
    TestOutcome,
    analyze,
    default_methods,
    exact_randomization_pvalue,
    max_tail_probability,
    population_test,
    randomization_test,
)
from .randomization import (
    EnumerationTooLargeError,
    RandomizationSpec,
    count_sequences,
    enumerate_sequences,
    sample_sequence,
    sample_sequences,
)
from .rng import substream
from .simulate import (
    ScenarioConfig,
    StudyResult,
    generate_binary_trial,
    run_power_study,
    run_table_block,
    simulate_from_potential_outcomes,
    synthetic_potential_table,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
