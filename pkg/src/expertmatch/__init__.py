"""Online matching of uncertain tasks to heterogeneous experts.

Tasks arrive with a hidden class; a Bayesian mixed type tracks the belief
about that class as servers fail on it. The package ships the belief-state
model, six assignment policies, an event-driven simulator, analytic
stability tools (closed-form thresholds, a flow LP, belief-set
construction), and a data-ingest pipeline that builds scenarios from Q&A
activity logs.
"""

from .model import (
    CanonicalKey,
    FeedbackModel,
    MixedType,
    Scenario,
    ScenarioError,
    SkillMatrix,
    UndefinedPosteriorError,
    canonical_key,
    failure_probability,
    feedback_probability,
    make_scenario,
    posterior_on_failure,
    posterior_with_feedback,
    pure_type,
    type_from_key,
    validate_scenario,
)
from .scenarios import (
    asymmetric_scenario,
    asymmetric_y_set,
    bundled_scenario,
    load_scenario,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
)
from .policies import (
    BP_EPS,
    BP_FEEDBACK,
    BP_Y,
    GREEDY,
    KINDS,
    NP_GREEDY,
    RANDOM,
    BackpressureState,
    PolicyError,
    PolicySpec,
    bp_eps_cell,
    bp_weight,
)
from .engine import (
    INCONCLUSIVE,
    STABLE,
    UNSTABLE,
    RunConfig,
    RunMetrics,
    SweepPoint,
    SweepResult,
    SystemState,
    Task,
    classify_stability,
    estimate_delay,
    run,
    sweep,
)
from .analysis import (
    FlowSolution,
    SolverError,
    TruncationError,
    TypeGraph,
    UnservableClassError,
    asymmetric_thresholds,
    build_type_graph,
    construct_y_set,
    lp_feasible,
    max_stable_rate,
    plan_single_task,
    random_policy_threshold,
)
from .ingest import (
    ClusterResult,
    DataFormatError,
    QuestionTagRecord,
    UserTagRecord,
    build_scenario,
    build_scenario_from_logs,
    estimate_priors,
    estimate_skills,
    kmeans_cluster,
    read_answer_log,
    read_question_log,
)

__version__ = "0.1.0"

__all__ = [
    "BP_EPS",
    "BP_FEEDBACK",
    "BP_Y",
    "BackpressureState",
    "CanonicalKey",
    "ClusterResult",
    "DataFormatError",
    "FeedbackModel",
    "FlowSolution",
    "GREEDY",
    "INCONCLUSIVE",
    "KINDS",
    "MixedType",
    "NP_GREEDY",
    "PolicyError",
    "PolicySpec",
    "QuestionTagRecord",
    "RANDOM",
    "RunConfig",
    "RunMetrics",
    "STABLE",
    "Scenario",
    "ScenarioError",
    "SkillMatrix",
    "SolverError",
    "SweepPoint",
    "SweepResult",
    "SystemState",
    "Task",
    "TruncationError",
    "TypeGraph",
    "UndefinedPosteriorError",
    "UnservableClassError",
    "UserTagRecord",
    "asymmetric_scenario",
    "asymmetric_thresholds",
    "asymmetric_y_set",
    "bp_eps_cell",
    "bp_weight",
    "build_scenario",
    "build_scenario_from_logs",
    "build_type_graph",
    "bundled_scenario",
    "canonical_key",
    "classify_stability",
    "construct_y_set",
    "estimate_delay",
    "estimate_priors",
    "estimate_skills",
    "failure_probability",
    "feedback_probability",
    "kmeans_cluster",
    "load_scenario",
    "lp_feasible",
    "make_scenario",
    "max_stable_rate",
    "plan_single_task",
    "posterior_on_failure",
    "posterior_with_feedback",
    "pure_type",
    "random_policy_threshold",
    "read_answer_log",
    "read_question_log",
    "run",
    "save_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
    "sweep",
    "type_from_key",
    "validate_scenario",
]
