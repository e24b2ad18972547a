"""Multi-phase CT composite augmentation (phase-wise K-slice Cartesian
product with convex sample blending), synthetic lesion phantoms, a
two-stage hierarchical diagnosis pipeline, and its evaluation harness.
"""

from .core import (
    BRANCH_LEAVES,
    LEAF_ORDER,
    BoundingBox,
    Branch,
    CompositeSet,
    LeafClass,
    PhaseId,
    Slice,
    SliceGrid,
    collapse_to_branch,
    one_hot,
    require_valid,
    validate_grid,
)
from .cohort import (
    CohortManifest,
    LesionProfile,
    ManifestError,
    PhantomSpec,
    WindowSpec,
    apply_window,
    generate_phantom_cohort,
    load_grids,
    load_manifest,
    save_manifest,
    split_by_patient,
)
from .composites import (
    DEFAULT_POLICY,
    ExpansionMode,
    ExpansionPolicy,
    composite_count,
    enumerate_composites,
    index_tuples,
    restrict_grid,
    restrict_phases,
    union_box,
)
from .mixup import MixedSample, MixupConfig, PairSampler, mix, quantize_u8, sample_lambda
from .classifier import (
    Checkpoint,
    Hyperparams,
    ReferenceClassifier,
    Standardizer,
    extract_features,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import (
    SingleModel,
    StudyPrediction,
    TrainSettings,
    TwoStageModel,
    evaluation_composites,
    mask_roi,
    predict_study,
    train_single,
    train_two_stage,
)
from .metrics import (
    BinaryOutcomeSet,
    ConfidenceInterval,
    DetectionInstance,
    ScoredBox,
    average_precision,
    binary_metrics,
    iou,
    match_detections,
    multiclass_auc,
    roc_auc,
    roc_curve,
    t_confidence_interval,
    t_quantile,
)
from .harness import (
    ExperimentConfig,
    TraditionalAugConfig,
    apply_traditional_aug,
    config_hash,
    load_experiment_config,
    run_ablation_suite,
    run_experiment,
)

__version__ = "0.1.0"
