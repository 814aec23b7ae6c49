"""Confidentiality-preserving stacked prediction across data-owning units.

Per-unit forests emit only (item id, predicted label, certainty) across unit
boundaries; a meta forest stacks those outputs. The package adds the
evaluation machinery around that core: leak-free nested cross-validation for
both the stacked and shared-pool protocols, a confidentiality auditor and
volume accounting for the boundary traffic, an additive-noising baseline,
and an HTTP microservice deployment mode.
"""

from .errors import DataError, ExperimentError
from .features import (
    CsvSchema,
    Column,
    Dataset,
    FeatureId,
    ImputationConfig,
    SynthSpec,
    UnitPartition,
    compress_dates,
    default_marker,
    generate_synthetic,
    impute_marker,
    load_csv,
    partition_by_unit,
    to_csv,
)
from .forest import (
    DecisionTree,
    ForestModel,
    ForestParams,
    GridSearchResult,
    FULL_GRID,
    ParamGrid,
    REDUCED_GRID,
    TreeNode,
    grid_search,
    predict_proba,
    train_forest,
    train_tree,
)
from .metrics import ConfusionMatrix, MetricSuite, confusion, mcc, mcc_gorodkin, suite
from .stacking import (
    CvPlan,
    EvaluationReport,
    MetaFeatureRow,
    SubPrediction,
    aggregate,
    emit_subpredictions,
    nested_cv_complete,
    nested_cv_meta,
    train_subunits,
)
from .transport import (
    AuditVerdict,
    BoundaryMessage,
    Transcript,
    VolumeAccount,
    account_volume,
    audit_confidentiality,
    decode,
    encode,
    measure_traffic,
)
from .baselines import (
    NoiseSweepResult,
    PriceOfPrivacy,
    ScenarioReport,
    add_noise,
    noising_sweep,
    price_of_privacy,
    run_scenario,
)

__version__ = "0.1.0"
