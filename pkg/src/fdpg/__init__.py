"""f-divergence policy gradients for aligning discrete sequence policies
with unnormalized target distributions."""

from .divergence import (
    DivergenceKind,
    ExtendedReal,
    FiniteDistribution,
    Generator,
    f_divergence_exact,
    make_generator,
    perspective,
    pseudo_reward,
)
from .errors import (
    CapacityError,
    ConfigError,
    DegenerateTargetError,
    EstimatorStateError,
    FdpgError,
    InfeasibleMomentError,
    InfinitePseudoRewardError,
    MomentFitError,
    NonFiniteGradientError,
    SupportMismatchError,
    TrainAbortedError,
    UnknownContextError,
    ValidationError,
)
from .estimator import (
    BaselineState,
    GradientEstimate,
    ZEstimator,
    change_of_generator,
    conditional_fdpg_gradient_exact,
    conditional_fdpg_gradient_sampled,
    conditional_targets,
    dpg_gradient,
    fdpg_gradient_exact,
    fdpg_gradient_sampled,
    rlkl_policy_gradient,
    update_z,
)
from .policy import (
    ConditionalPolicy,
    NGramPolicy,
    SequenceSpace,
    SparseGradient,
    TabularPolicy,
    distinct_n,
    exact_normalized_entropy,
    load_policy,
    ngram_from,
    normalized_entropy,
    save_policy,
    tabular_from,
)
from .targets import (
    ConditionalTask,
    FeatureFn,
    MomentSpec,
    TargetModel,
    conditional_target,
    exact_log_partition,
    fit_lambda,
    gdc_binary_target,
    gdc_dist_target,
    reward_from_choice_model,
    rlkl_target,
)
from .trainer import AdamState, RunRecord, TrainConfig, adam_step, evaluate_metrics, train

__version__ = "0.1.0"
