"""Two-stage diagnosis orchestration and the one-step baseline.

Stage 1 separates benign from malignant; two stage-2 models resolve the
leaf class within each branch.  Stage-2 models train on ground-truth
branch subsets; at inference the branch is routed by stage 1 at the 0.5
threshold.  All per-composite probabilities of one radiology report are
arithmetic-mean averaged into a single study-level prediction.

Classifier inputs pass through ROI masking (zero outside the dilated
union box) and the fixed feature extractor.  Sample blending, when
enabled, happens in image space inside the batch source, so features of
blended samples are extracted from the blended image, not interpolated.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .classifier import (
    Checkpoint,
    FitResult,
    Hyperparams,
    ModelRecord,
    ReferenceClassifier,
    Standardizer,
    extract_features_batch,
    feature_dim,
)
from .composites import ExpansionMode, ExpansionPolicy, enumerate_composites, union_box
from .core import (
    BRANCH_LEAVES,
    LEAF_ORDER,
    BoundingBox,
    Branch,
    CompositeSet,
    LeafClass,
    PhaseId,
    SliceGrid,
)
from .mixup import MixupConfig, PairSampler, element_rng, lift_to_unit, mix_arrays, sample_lambda

ROUTING_THRESHOLD = 0.5

STAGE1 = "stage1"
STAGE2_BENIGN = "stage2_benign"
STAGE2_MALIGNANT = "stage2_malignant"
ONE_STEP = "one_step"

MODEL_CLASSES: dict[str, tuple[str, ...]] = {
    STAGE1: (Branch.BENIGN.name, Branch.MALIGNANT.name),
    STAGE2_BENIGN: tuple(c.name for c in BRANCH_LEAVES[Branch.BENIGN]),
    STAGE2_MALIGNANT: tuple(c.name for c in BRANCH_LEAVES[Branch.MALIGNANT]),
    ONE_STEP: tuple(c.name for c in LEAF_ORDER),
}

# leaf-simplex -> stage-target projection matrices, columns in MODEL_CLASSES order
_PROJECTION: dict[str, np.ndarray] = {
    STAGE1: np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]),
    STAGE2_BENIGN: np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]),
    STAGE2_MALIGNANT: np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    ONE_STEP: np.eye(4),
}


def derive_seed(*parts: int) -> int:
    """Collision-resistant child seed from integer key parts."""
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


# ---------------------------------------------------------------------------
# ROI masking


def mask_roi(image: np.ndarray, box: Optional[BoundingBox], margin: int) -> np.ndarray:
    """Zero every pixel outside the box dilated by `margin`, all channels.

    Without a box the image passes through unchanged: such composites are
    classified on the whole frame.
    """
    if box is None:
        return np.array(image, copy=True)
    _, h, w = image.shape
    roi = box.dilated(margin, h, w)
    out = np.zeros_like(image)
    out[:, roi.y_min:roi.y_max, roi.x_min:roi.x_max] = \
        image[:, roi.y_min:roi.y_max, roi.x_min:roi.x_max]
    return out


# ---------------------------------------------------------------------------
# Feature path (mask + extract), shared by training and inference


@dataclass(frozen=True)
class FeaturePath:
    mask_margin: int = 2
    apply_mask: bool = True

    def features(self, channels: Sequence[np.ndarray],
                 boxes: Sequence[Optional[BoundingBox]]) -> np.ndarray:
        if self.apply_mask:
            channels = [mask_roi(c, b, self.mask_margin) for c, b in zip(channels, boxes)]
        return extract_features_batch(channels, boxes, self.mask_margin)

    def features_of(self, composites: Sequence[CompositeSet]) -> np.ndarray:
        return self.features([c.channels for c in composites],
                             [c.union_box for c in composites])


# ---------------------------------------------------------------------------
# Stage pools and targets


def stage_targets(labels: np.ndarray, model_name: str) -> np.ndarray:
    """Project leaf-simplex labels onto a model's class set.

    The projection is linear, so blended leaf labels collapse to the same
    targets as blending the collapsed labels.
    """
    return np.atleast_2d(labels) @ _PROJECTION[model_name]


def stage_pool(composites: Sequence[CompositeSet], model_name: str,
               tol: float = 1e-9) -> tuple[list[CompositeSet], np.ndarray]:
    """Composites belonging to a model's stage, with their targets.

    Stage-2 pools keep only composites whose entire label mass lies in
    that branch (ground-truth branch subsets).
    """
    labels = np.stack([c.label for c in composites]) if composites else np.zeros((0, 4))
    targets = stage_targets(labels, model_name)
    keep = targets.sum(axis=1) >= 1.0 - tol
    kept = [c for c, k in zip(composites, keep) if k]
    return kept, targets[keep]


# ---------------------------------------------------------------------------
# Batch sources (all yield raw feature batches; standardization is the
# classifier's job so frozen statistics apply uniformly)


class CachedFeatureBatches:
    """Precomputed features of a fixed pool, shuffled per epoch."""

    def __init__(self, features: np.ndarray, targets: np.ndarray,
                 batch_size: int, seed: int):
        self.features = features
        self.targets = targets
        self.batch_size = batch_size
        self.seed = seed

    def epoch(self, epoch_index: int):
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, epoch_index)))
        perm = rng.permutation(len(self.features))
        for start in range(0, len(perm), self.batch_size):
            sel = perm[start:start + self.batch_size]
            yield self.features[sel], self.targets[sel]


class MixupBatches:
    """Freshly blended batches, one epoch per pool pass.

    Each element draws its own generator keyed on (seed, global batch,
    element), so the sample stream is independent of batching details.
    Per element, the parent pair is drawn first (instance then
    class-balanced), then lambda.
    """

    def __init__(self, composites: Sequence[CompositeSet], targets: np.ndarray,
                 path: FeaturePath, mixup: MixupConfig, batch_size: int, seed: int):
        self.composites = list(composites)
        self.targets = targets
        self.path = path
        self.mixup = mixup
        self.batch_size = batch_size
        self.seed = seed
        self.n = len(self.composites)
        self.n_batches = math.ceil(self.n / batch_size)
        self.sampler = PairSampler(targets.argmax(axis=1))

    def epoch(self, epoch_index: int):
        for b in range(self.n_batches):
            global_batch = epoch_index * self.n_batches + b
            count = min(self.batch_size, self.n - b * self.batch_size)
            channels, boxes, targets = [], [], []
            for j in range(count):
                rng = element_rng(self.seed, global_batch, j)
                i, c = self.sampler.sample_pair(rng)
                lam = sample_lambda(rng, self.mixup.alpha, self.mixup.beta)
                first, second = self.composites[i], self.composites[c]
                channels.append(mix_arrays(lift_to_unit(first.channels),
                                           lift_to_unit(second.channels), lam))
                boxes.append(union_box([first.union_box, second.union_box]))
                targets.append(lam * self.targets[i] + (1.0 - lam) * self.targets[c])
            yield self.path.features(channels, boxes), np.stack(targets)


class TransformBatches:
    """Per-element stochastic transform (e.g. rotation/flip) over a shuffled pool."""

    def __init__(self, composites: Sequence[CompositeSet], targets: np.ndarray,
                 path: FeaturePath,
                 transform: Callable[[CompositeSet, np.random.Generator], CompositeSet],
                 batch_size: int, seed: int):
        self.composites = list(composites)
        self.targets = targets
        self.path = path
        self.transform = transform
        self.batch_size = batch_size
        self.seed = seed
        self.n = len(self.composites)
        self.n_batches = math.ceil(self.n / batch_size)

    def epoch(self, epoch_index: int):
        order_rng = np.random.default_rng(np.random.SeedSequence((self.seed, epoch_index)))
        perm = order_rng.permutation(self.n)
        for b in range(self.n_batches):
            global_batch = epoch_index * self.n_batches + b
            sel = perm[b * self.batch_size:(b + 1) * self.batch_size]
            channels, boxes = [], []
            for j, idx in enumerate(sel):
                rng = element_rng(self.seed, global_batch, j)
                comp = self.transform(self.composites[idx], rng)
                channels.append(comp.channels)
                boxes.append(comp.union_box)
            yield self.path.features(channels, boxes), self.targets[sel]


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainSettings:
    hp: Hyperparams = Hyperparams()
    augmentation: str = "none"            # none | mixup | transform
    mixup: MixupConfig = MixupConfig()
    transform: Optional[Callable[[CompositeSet, np.random.Generator], CompositeSet]] = None
    mask_margin: int = 2
    apply_mask: bool = True

    def __post_init__(self):
        if self.augmentation not in ("none", "mixup", "transform"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.augmentation == "transform" and self.transform is None:
            raise ValueError("augmentation 'transform' needs a transform callable")

    @property
    def path(self) -> FeaturePath:
        return FeaturePath(self.mask_margin, self.apply_mask)


def _check_leaf_coverage(composites: Sequence[CompositeSet], needed: Sequence[LeafClass]):
    present = {LEAF_ORDER[int(np.argmax(c.label))] for c in composites}
    missing = [c.name for c in needed if c not in present]
    if missing:
        raise ValueError(f"training pool lacks class(es): {', '.join(missing)}")


def train_model(model_name: str, train_pool: Sequence[CompositeSet],
                val_pool: Sequence[CompositeSet], settings: TrainSettings,
                stage_index: int) -> tuple[ReferenceClassifier, FitResult]:
    """Train one softmax model for its stage's target classes.

    Standardization statistics come from the unblended training pool.
    Validation composites are never augmented; with an empty validation
    subset the model trains for the full epoch budget without early
    stopping.
    """
    comps, targets = stage_pool(train_pool, model_name)
    if not comps:
        raise ValueError(f"empty training subset for {model_name}")
    path = settings.path
    features = path.features_of(comps)
    standardizer = Standardizer.fit(features)

    hp = dataclasses.replace(settings.hp, seed=derive_seed(settings.hp.seed, stage_index))
    n_classes = len(MODEL_CLASSES[model_name])
    clf = ReferenceClassifier(features.shape[1], n_classes, hp, standardizer)

    if settings.augmentation == "mixup" and settings.mixup.enabled:
        source = MixupBatches(comps, targets, path, settings.mixup, hp.batch_size,
                              derive_seed(settings.mixup.seed, stage_index))
    elif settings.augmentation == "transform":
        source = TransformBatches(comps, targets, path, settings.transform,
                                  hp.batch_size, derive_seed(hp.seed, 1))
    else:
        source = CachedFeatureBatches(features, targets, hp.batch_size, hp.seed)

    val_comps, val_targets = stage_pool(val_pool, model_name)
    if val_comps:
        fit = clf.fit(source, path.features_of(val_comps), val_targets)
    else:
        fit = clf.fit(source)
    return clf, fit


@dataclass
class SingleModel:
    """One softmax model over a fixed class set, with study-level averaging."""

    name: str
    classes: tuple[str, ...]
    classifier: ReferenceClassifier
    phases: tuple[PhaseId, ...]
    input_shape: tuple[int, int, int]
    mask_margin: int
    apply_mask: bool
    fit: Optional[FitResult] = None

    @property
    def path(self) -> FeaturePath:
        return FeaturePath(self.mask_margin, self.apply_mask)

    def predict_proba(self, composites: Sequence[CompositeSet]) -> np.ndarray:
        return self.classifier.predict_proba(self.path.features_of(composites))

    def predict_study(self, composites: Sequence[CompositeSet]) -> "SingleStudyPrediction":
        report_id = _single_report_id(composites)
        probs = self.predict_proba(composites).mean(axis=0)
        return SingleStudyPrediction(report_id=report_id, probs=probs,
                                     predicted=self.classes[int(np.argmax(probs))])


@dataclass(frozen=True)
class SingleStudyPrediction:
    report_id: str
    probs: np.ndarray
    predicted: str


@dataclass
class TwoStageModel:
    """Stage-1 router plus the two branch-conditional leaf models."""

    stage1: ReferenceClassifier
    stage2_benign: ReferenceClassifier
    stage2_malignant: ReferenceClassifier
    phases: tuple[PhaseId, ...]
    input_shape: tuple[int, int, int]
    mask_margin: int
    apply_mask: bool
    threshold: float = ROUTING_THRESHOLD
    fits: dict = field(default_factory=dict)

    @property
    def path(self) -> FeaturePath:
        return FeaturePath(self.mask_margin, self.apply_mask)

    def predict_study(self, composites: Sequence[CompositeSet]) -> "StudyPrediction":
        return predict_study(self, composites)


@dataclass(frozen=True)
class StudyPrediction:
    """Study-level output: routing, per-branch probabilities, composed vector."""

    report_id: str
    stage1_probs: np.ndarray            # (BENIGN, MALIGNANT)
    routed_branch: Branch
    stage2_probs: np.ndarray            # within the routed branch
    composed_probs: np.ndarray          # over LEAF_ORDER, sums to 1
    final_class: LeafClass

    @property
    def p_malignant(self) -> float:
        return float(self.stage1_probs[1])


def _single_report_id(composites: Sequence[CompositeSet]) -> str:
    if not composites:
        raise ValueError("need at least one composite")
    ids = {c.report_id for c in composites}
    if len(ids) != 1:
        raise ValueError(f"composites from multiple reports: {sorted(ids)}")
    return composites[0].report_id


def predict_study(model: TwoStageModel, composites: Sequence[CompositeSet]) -> StudyPrediction:
    """Average per-composite probabilities into one study prediction.

    Stage-1 and both stage-2 probability vectors are averaged over the
    report's composites; the branch is routed by the averaged malignant
    probability against the threshold; the final class is the argmax of
    the routed branch's averaged stage-2 vector.  The composed 4-class
    vector multiplies each branch's stage-1 probability into its stage-2
    vector, so it sums to 1.
    """
    report_id = _single_report_id(composites)
    features = model.path.features_of(composites)
    stage1 = model.stage1.predict_proba(features).mean(axis=0)
    benign = model.stage2_benign.predict_proba(features).mean(axis=0)
    malignant = model.stage2_malignant.predict_proba(features).mean(axis=0)

    routed = Branch.MALIGNANT if stage1[1] >= model.threshold else Branch.BENIGN
    composed = np.concatenate([stage1[0] * benign, stage1[1] * malignant])
    branch_probs = malignant if routed is Branch.MALIGNANT else benign
    leaves = BRANCH_LEAVES[routed]
    final = leaves[int(np.argmax(branch_probs))]
    return StudyPrediction(
        report_id=report_id,
        stage1_probs=stage1,
        routed_branch=routed,
        stage2_probs=branch_probs,
        composed_probs=composed,
        final_class=final,
    )


def train_two_stage(train_pool: Sequence[CompositeSet], val_pool: Sequence[CompositeSet],
                    settings: TrainSettings = TrainSettings()) -> TwoStageModel:
    """Train all three models; stage 2 sees ground-truth branch subsets."""
    _check_leaf_coverage(train_pool, LEAF_ORDER)
    shape = train_pool[0].channels.shape
    fits = {}
    models = {}
    for index, name in enumerate((STAGE1, STAGE2_BENIGN, STAGE2_MALIGNANT)):
        clf, fit = train_model(name, train_pool, val_pool, settings, index)
        models[name] = clf
        fits[name] = fit
    return TwoStageModel(
        stage1=models[STAGE1],
        stage2_benign=models[STAGE2_BENIGN],
        stage2_malignant=models[STAGE2_MALIGNANT],
        phases=train_pool[0].phases,
        input_shape=shape,
        mask_margin=settings.mask_margin,
        apply_mask=settings.apply_mask,
        fits=fits,
    )


def train_single(model_name: str, train_pool: Sequence[CompositeSet],
                 val_pool: Sequence[CompositeSet],
                 settings: TrainSettings = TrainSettings()) -> SingleModel:
    """Train one standalone model (the one-step baseline or a single stage)."""
    if model_name not in MODEL_CLASSES:
        raise ValueError(f"unknown model {model_name!r}")
    needed = {
        STAGE1: LEAF_ORDER,                      # both branches must appear
        ONE_STEP: LEAF_ORDER,
        STAGE2_BENIGN: BRANCH_LEAVES[Branch.BENIGN],
        STAGE2_MALIGNANT: BRANCH_LEAVES[Branch.MALIGNANT],
    }[model_name]
    pool, _ = stage_pool(train_pool, model_name)
    _check_leaf_coverage(pool, needed)
    clf, fit = train_model(model_name, train_pool, val_pool, settings, 0)
    return SingleModel(
        name=model_name,
        classes=MODEL_CLASSES[model_name],
        classifier=clf,
        phases=train_pool[0].phases,
        input_shape=train_pool[0].channels.shape,
        mask_margin=settings.mask_margin,
        apply_mask=settings.apply_mask,
        fit=fit,
    )


# ---------------------------------------------------------------------------
# Evaluation views


def evaluation_composites(grid: SliceGrid) -> list[CompositeSet]:
    """The K depth-aligned composites used for study-level prediction."""
    policy = ExpansionPolicy.uniform(ExpansionMode.MAJORITY)
    return enumerate_composites(grid, policy)


# ---------------------------------------------------------------------------
# Checkpoint bridging

_MARGIN_UNMASKED = -1


def _encode_margin(mask_margin: int, apply_mask: bool) -> int:
    return mask_margin if apply_mask else _MARGIN_UNMASKED


def _decode_margin(stored: int) -> tuple[int, bool]:
    return (2, False) if stored == _MARGIN_UNMASKED else (stored, True)


def two_stage_to_checkpoint(model: TwoStageModel, task: str) -> Checkpoint:
    records = tuple(
        ModelRecord(name=name, classes=MODEL_CLASSES[name],
                    input_shape=model.input_shape, classifier=clf)
        for name, clf in ((STAGE1, model.stage1),
                          (STAGE2_BENIGN, model.stage2_benign),
                          (STAGE2_MALIGNANT, model.stage2_malignant)))
    return Checkpoint(kind="two_stage", task=task, phases=model.phases,
                      mask_margin=_encode_margin(model.mask_margin, model.apply_mask),
                      models=records)


def single_to_checkpoint(model: SingleModel, task: str) -> Checkpoint:
    record = ModelRecord(name=model.name, classes=model.classes,
                         input_shape=model.input_shape, classifier=model.classifier)
    return Checkpoint(kind="single", task=task, phases=model.phases,
                      mask_margin=_encode_margin(model.mask_margin, model.apply_mask),
                      models=(record,))


def model_from_checkpoint(ckpt: Checkpoint):
    margin, apply_mask = _decode_margin(ckpt.mask_margin)
    if ckpt.kind == "two_stage":
        return TwoStageModel(
            stage1=ckpt.model(STAGE1).classifier,
            stage2_benign=ckpt.model(STAGE2_BENIGN).classifier,
            stage2_malignant=ckpt.model(STAGE2_MALIGNANT).classifier,
            phases=ckpt.phases,
            input_shape=ckpt.models[0].input_shape,
            mask_margin=margin,
            apply_mask=apply_mask,
        )
    if ckpt.kind == "single":
        record = ckpt.models[0]
        return SingleModel(
            name=record.name,
            classes=record.classes,
            classifier=record.classifier,
            phases=ckpt.phases,
            input_shape=record.input_shape,
            mask_margin=margin,
            apply_mask=apply_mask,
        )
    raise ValueError(f"unknown checkpoint kind {ckpt.kind!r}")
