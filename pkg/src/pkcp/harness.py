"""Declarative experiment harness.

A TOML config names the cohort, augmentation configuration, phase
subset, task, and seeds; the harness builds the training pool, trains,
evaluates on the validation split (plus an optional held-out cohort),
and writes per-seed and seed-aggregated metrics with 95% t-intervals.
Every cell (config, seed) is deterministic; files are written atomically
so independent cells may run in parallel (PKCP_THREADS).
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # Python 3.10
    import tomli as tomllib

from . import metrics as M
from .classifier import Hyperparams, save_checkpoint
from .cohort import CohortManifest, assign_whole_cohort, load_grids, load_manifest, split_by_patient
from .composites import (
    DEFAULT_POLICY,
    ExpansionMode,
    ExpansionPolicy,
    enumerate_composites,
    restrict_grid,
)
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
from .ioutil import atomic_write_text, canonical_json
from .mixup import MixupConfig
from .pipeline import (
    MODEL_CLASSES,
    ONE_STEP,
    STAGE1,
    STAGE2_BENIGN,
    STAGE2_MALIGNANT,
    SingleModel,
    TrainSettings,
    TwoStageModel,
    derive_seed,
    evaluation_composites,
    single_to_checkpoint,
    train_single,
    train_two_stage,
    two_stage_to_checkpoint,
)

AUG_CONFIGS = (
    "single_phase_single_slice",
    "three_phase_pkcp",
    "four_phase_pkcp_all_majority",
    "pkcp_no_aug",
    "pkcp_traditional_aug",
    "pkcp_mixup",
)

TASKS = (
    "detection_eval",
    "benign_vs_malignant",
    "benign_subtype",
    "malignant_subtype",
    "one_step",
    "two_step",
)

_BINARY_TASKS = {
    "benign_vs_malignant": STAGE1,
    "benign_subtype": STAGE2_BENIGN,
    "malignant_subtype": STAGE2_MALIGNANT,
}

_PHASE_CODES = {PhaseId.PC: "P", PhaseId.AP: "A", PhaseId.PVP: "V", PhaseId.DP: "D"}


def subset_code(phases: Sequence[PhaseId]) -> str:
    return "".join(_PHASE_CODES[p] for p in sorted(phases))


class ConfigError(ValueError):
    """Raised for invalid experiment configurations, before any compute."""


# ---------------------------------------------------------------------------
# Configuration model


@dataclass(frozen=True)
class DataSpec:
    manifest: str
    train_fraction: float = 0.7
    split_seed: int = 0
    test_manifest: Optional[str] = None
    detections: Optional[str] = None


@dataclass(frozen=True)
class TraditionalAugConfig:
    """Pinned defaults for the conventional augmentation contrast arm."""

    rotation_degrees: float = 15.0
    flip_probability: float = 0.5

    def __post_init__(self):
        if self.rotation_degrees < 0:
            raise ConfigError("rotation_degrees must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability must be in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    task: str
    aug_config: str
    data: DataSpec
    phase_subset: tuple[PhaseId, ...]
    seeds: tuple[int, ...]
    outputs: str
    classifier: str = "reference"
    hyperparams: Hyperparams = Hyperparams()
    mixup: MixupConfig = MixupConfig()
    traditional: TraditionalAugConfig = TraditionalAugConfig()
    mask_margin: int = 2
    apply_mask: bool = True
    single_phase: PhaseId = PhaseId.AP
    config_dir: Optional[Path] = None       # base for relative paths; not hashed


_SUBSET_SALT = 104729   # fixed salt separating subset draws from other seed uses


def random_three_phase_subset(base_seed: int) -> tuple[PhaseId, ...]:
    """Three of the four phases, drawn once per experiment, canonical order."""
    rng = np.random.default_rng(np.random.SeedSequence((base_seed, _SUBSET_SALT)))
    order = PhaseId.canonical_order()
    picked = rng.choice(len(order), size=3, replace=False)
    return tuple(order[i] for i in sorted(int(i) for i in picked))


def default_phase_subset(aug_config: str, single_phase: PhaseId,
                         base_seed: int = 0) -> tuple[PhaseId, ...]:
    if aug_config == "single_phase_single_slice":
        return (single_phase,)
    if aug_config == "three_phase_pkcp":
        return random_three_phase_subset(base_seed)
    return PhaseId.canonical_order()


def validate_config(cfg: ExperimentConfig) -> None:
    if not cfg.name:
        raise ConfigError("name must be non-empty")
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}; expected one of {', '.join(TASKS)}")
    if cfg.aug_config not in AUG_CONFIGS:
        raise ConfigError(f"unknown aug_config {cfg.aug_config!r}")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if not cfg.phase_subset:
        raise ConfigError("phase_subset must be non-empty")
    if len(set(cfg.phase_subset)) != len(cfg.phase_subset):
        raise ConfigError("phase_subset has duplicates")
    if tuple(sorted(cfg.phase_subset)) != cfg.phase_subset:
        raise ConfigError("phase_subset must be in canonical order PC < AP < PVP < DP")
    if cfg.classifier != "reference":
        raise ConfigError(f"unknown classifier {cfg.classifier!r}")
    if cfg.mask_margin < 0:
        raise ConfigError("mask_margin must be >= 0")
    if cfg.task == "detection_eval":
        if not cfg.data.detections:
            raise ConfigError("detection_eval needs data.detections")
        return
    if cfg.aug_config == "single_phase_single_slice" and len(cfg.phase_subset) != 1:
        raise ConfigError("single_phase_single_slice uses exactly one phase")
    if cfg.aug_config == "three_phase_pkcp" and len(cfg.phase_subset) != 3:
        raise ConfigError("three_phase_pkcp uses exactly three phases")
    if cfg.aug_config == "pkcp_mixup" and not cfg.mixup.enabled:
        raise ConfigError("pkcp_mixup requires mixup.enabled = true")
    hp = cfg.hyperparams
    if hp.learning_rate <= 0 or hp.batch_size < 1 or hp.max_epochs < 1 or hp.patience < 1:
        raise ConfigError("invalid hyperparams")


_TOP_KEYS = {"name", "task", "aug_config", "phase_subset", "seeds", "outputs",
             "classifier", "data", "hyperparams", "mixup", "traditional", "options"}
_DATA_KEYS = {"manifest", "train_fraction", "split_seed", "test_manifest", "detections"}
_HP_KEYS = {"learning_rate", "weight_decay", "batch_size", "max_epochs", "patience",
            "init_scale", "seed"}
_MIXUP_KEYS = {"enabled", "alpha", "beta", "seed"}
_TRAD_KEYS = {"rotation_degrees", "flip_probability"}
_OPTION_KEYS = {"mask_margin", "apply_mask", "single_phase"}


def _check_keys(table: Mapping, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc, config_dir=path.parent)


def parse_config(doc: Mapping, config_dir: Optional[Path] = None) -> ExperimentConfig:
    _check_keys(doc, _TOP_KEYS, "config")
    data_tbl = doc.get("data")
    if not isinstance(data_tbl, dict) or "manifest" not in data_tbl:
        raise ConfigError("config needs a [data] table with a manifest path")
    _check_keys(data_tbl, _DATA_KEYS, "[data]")
    hp_tbl = doc.get("hyperparams", {})
    _check_keys(hp_tbl, _HP_KEYS, "[hyperparams]")
    mixup_tbl = doc.get("mixup", {})
    _check_keys(mixup_tbl, _MIXUP_KEYS, "[mixup]")
    trad_tbl = doc.get("traditional", {})
    _check_keys(trad_tbl, _TRAD_KEYS, "[traditional]")
    opt_tbl = doc.get("options", {})
    _check_keys(opt_tbl, _OPTION_KEYS, "[options]")

    aug_config = str(doc.get("aug_config", "pkcp_mixup"))
    hp_seed = int(hp_tbl.get("seed", 0))
    try:
        single_phase = PhaseId.from_name(str(opt_tbl.get("single_phase", "AP")))
        if "phase_subset" in doc:
            subset = tuple(sorted(PhaseId.from_name(str(p)) for p in doc["phase_subset"]))
        else:
            subset = default_phase_subset(aug_config, single_phase, hp_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    cfg = ExperimentConfig(
        name=str(doc.get("name", "")),
        task=str(doc.get("task", "two_step")),
        aug_config=aug_config,
        data=DataSpec(
            manifest=str(data_tbl["manifest"]),
            train_fraction=float(data_tbl.get("train_fraction", 0.7)),
            split_seed=int(data_tbl.get("split_seed", 0)),
            test_manifest=str(data_tbl["test_manifest"]) if data_tbl.get("test_manifest") else None,
            detections=str(data_tbl["detections"]) if data_tbl.get("detections") else None,
        ),
        phase_subset=subset,
        seeds=tuple(int(s) for s in doc.get("seeds", [0])),
        outputs=str(doc.get("outputs", "runs/" + str(doc.get("name", "experiment")))),
        classifier=str(doc.get("classifier", "reference")),
        hyperparams=Hyperparams(
            learning_rate=float(hp_tbl.get("learning_rate", 0.001)),
            weight_decay=float(hp_tbl.get("weight_decay", 0.0001)),
            batch_size=int(hp_tbl.get("batch_size", 128)),
            max_epochs=int(hp_tbl.get("max_epochs", 300)),
            patience=int(hp_tbl.get("patience", 10)),
            init_scale=float(hp_tbl.get("init_scale", 0.01)),
            seed=int(hp_tbl.get("seed", 0)),
        ),
        mixup=MixupConfig(
            enabled=bool(mixup_tbl.get("enabled", aug_config == "pkcp_mixup")),
            alpha=float(mixup_tbl.get("alpha", 2.0)),
            beta=float(mixup_tbl.get("beta", 2.0)),
            seed=int(mixup_tbl.get("seed", 0)),
        ),
        traditional=TraditionalAugConfig(
            rotation_degrees=float(trad_tbl.get("rotation_degrees", 15.0)),
            flip_probability=float(trad_tbl.get("flip_probability", 0.5)),
        ),
        mask_margin=int(opt_tbl.get("mask_margin", 2)),
        apply_mask=bool(opt_tbl.get("apply_mask", True)),
        single_phase=single_phase,
        config_dir=config_dir,
    )
    validate_config(cfg)
    return cfg


def normalized_config_dict(cfg: ExperimentConfig) -> dict:
    """Full post-default config as plain data; equal configs serialize equal."""
    return {
        "name": cfg.name,
        "task": cfg.task,
        "aug_config": cfg.aug_config,
        "data": {
            "manifest": cfg.data.manifest,
            "train_fraction": cfg.data.train_fraction,
            "split_seed": cfg.data.split_seed,
            "test_manifest": cfg.data.test_manifest,
            "detections": cfg.data.detections,
        },
        "phase_subset": [p.name for p in cfg.phase_subset],
        "seeds": list(cfg.seeds),
        "outputs": cfg.outputs,
        "classifier": cfg.classifier,
        "hyperparams": dataclasses.asdict(cfg.hyperparams),
        "mixup": dataclasses.asdict(cfg.mixup),
        "traditional": dataclasses.asdict(cfg.traditional),
        "options": {
            "mask_margin": cfg.mask_margin,
            "apply_mask": cfg.apply_mask,
            "single_phase": cfg.single_phase.name,
        },
    }


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(normalized_config_dict(cfg)).encode("utf-8")).hexdigest()


def _resolve(cfg: ExperimentConfig, path: str) -> Path:
    p = Path(path)
    if p.is_absolute() or cfg.config_dir is None:
        return p
    return cfg.config_dir / p


# ---------------------------------------------------------------------------
# Traditional augmentation (rotation + horizontal flip)


def rotate_channels(channels: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Rotate about the image center, nearest-neighbor, borders filled 0."""
    if angle_degrees == 0.0:
        return np.array(channels, copy=True)
    _, h, w = channels.shape
    theta = math.radians(angle_degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    xo, yo = xs - cx, ys - cy
    # inverse map: output pixel samples the input at R(-theta)
    src_x = np.rint(cos_t * xo + sin_t * yo + cx).astype(np.int64)
    src_y = np.rint(-sin_t * xo + cos_t * yo + cy).astype(np.int64)
    valid = (src_x >= 0) & (src_x < w) & (src_y >= 0) & (src_y < h)
    out = np.zeros_like(channels)
    out[:, valid] = channels[:, src_y[valid], src_x[valid]]
    return out


def rotate_box(box: BoundingBox, angle_degrees: float, height: int,
               width: int) -> Optional[BoundingBox]:
    """Axis-aligned hull of the rotated box corners, clipped to the frame."""
    if angle_degrees == 0.0:
        return box
    theta = math.radians(angle_degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    corners = [(box.x_min, box.y_min), (box.x_min, box.y_max),
               (box.x_max, box.y_min), (box.x_max, box.y_max)]
    rx, ry = [], []
    for x, y in corners:
        xo, yo = x - cx, y - cy
        rx.append(cos_t * xo - sin_t * yo + cx)
        ry.append(sin_t * xo + cos_t * yo + cy)
    x_min = max(0, int(math.floor(min(rx))))
    y_min = max(0, int(math.floor(min(ry))))
    x_max = min(width, int(math.ceil(max(rx))))
    y_max = min(height, int(math.ceil(max(ry))))
    if x_min >= x_max or y_min >= y_max:
        return None                      # rotated entirely out of frame
    return BoundingBox(x_min, y_min, x_max, y_max)


def flip_box(box: BoundingBox, width: int) -> BoundingBox:
    return BoundingBox(width - box.x_max, box.y_min, width - box.x_min, box.y_max)


def apply_traditional_aug(comp: CompositeSet, cfg: TraditionalAugConfig,
                          rng: np.random.Generator) -> CompositeSet:
    """One random flip/rotation, identical across channels and the box.

    Draw order is fixed (flip decision, then angle) so a given generator
    state always produces the same transform.
    """
    _, h, w = comp.channels.shape
    do_flip = bool(rng.random() < cfg.flip_probability)
    angle = float(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)) \
        if cfg.rotation_degrees > 0 else 0.0

    channels = comp.channels
    box = comp.union_box
    if do_flip:
        channels = channels[:, :, ::-1]
        box = flip_box(box, w) if box is not None else None
    channels = rotate_channels(channels, angle)
    if box is not None:
        box = rotate_box(box, angle, h, w)
    return CompositeSet(
        report_id=comp.report_id,
        phases=comp.phases,
        source_indices=comp.source_indices,
        channels=channels,
        union_box=box,
        label=comp.label,
    )


# ---------------------------------------------------------------------------
# Dataset assembly


def _policy_for(aug_config: str) -> ExpansionPolicy:
    if aug_config in ("single_phase_single_slice", "four_phase_pkcp_all_majority"):
        return ExpansionPolicy.uniform(ExpansionMode.MAJORITY)
    return ExpansionPolicy(dict(DEFAULT_POLICY))


def training_pool(grids: Mapping[str, SliceGrid], report_ids: Sequence[str],
                  phase_subset: Sequence[PhaseId], aug_config: str) -> list[CompositeSet]:
    policy = _policy_for(aug_config)
    pool = []
    for rid in sorted(report_ids):
        restricted = restrict_grid(grids[rid], phase_subset)
        pool.extend(enumerate_composites(restricted, policy))
    return pool


def evaluation_pool(grids: Mapping[str, SliceGrid], report_ids: Sequence[str],
                    phase_subset: Sequence[PhaseId]) -> dict[str, list[CompositeSet]]:
    return {rid: evaluation_composites(restrict_grid(grids[rid], phase_subset))
            for rid in sorted(report_ids)}


def _settings_for(cfg: ExperimentConfig, run_seed: int) -> TrainSettings:
    hp = dataclasses.replace(cfg.hyperparams, seed=derive_seed(cfg.hyperparams.seed, run_seed))
    if cfg.aug_config == "pkcp_mixup":
        mixup = dataclasses.replace(cfg.mixup, seed=derive_seed(cfg.mixup.seed, run_seed))
        return TrainSettings(hp=hp, augmentation="mixup", mixup=mixup,
                             mask_margin=cfg.mask_margin, apply_mask=cfg.apply_mask)
    if cfg.aug_config == "pkcp_traditional_aug":
        def transform(comp, rng, _cfg=cfg.traditional):
            return apply_traditional_aug(comp, _cfg, rng)
        return TrainSettings(hp=hp, augmentation="transform", transform=transform,
                             mask_margin=cfg.mask_margin, apply_mask=cfg.apply_mask)
    return TrainSettings(hp=hp, augmentation="none",
                         mask_margin=cfg.mask_margin, apply_mask=cfg.apply_mask)


# ---------------------------------------------------------------------------
# Evaluation per task


def _report_truths(manifest: CohortManifest, split: str) -> dict[str, LeafClass]:
    return {r.report_id: r.class_label for _, r in manifest.reports_in_split(split)}


def _recall_by_class(truths: Sequence[LeafClass], predictions: Sequence[LeafClass],
                     classes: Sequence[LeafClass]) -> dict[str, Optional[float]]:
    out = {}
    for cls in classes:
        support = [p for t, p in zip(truths, predictions) if t is cls]
        out[f"recall_{cls.name}"] = (
            sum(1 for p in support if p is cls) / len(support) if support else None)
    return out


def _evaluate_two_stage(model: TwoStageModel, eval_pools: Mapping[str, list[CompositeSet]],
                        truths: Mapping[str, LeafClass]):
    rows, preds = [], {}
    for rid in sorted(eval_pools):
        pred = model.predict_study(eval_pools[rid])
        preds[rid] = pred
        rows.append(M.ClassificationRow(
            report_id=rid, task="two_step",
            probs={cls.name: float(p) for cls, p in zip(LEAF_ORDER, pred.composed_probs)},
            truth=truths[rid].name))
    ordered = sorted(eval_pools)
    truth_leaves = [truths[rid] for rid in ordered]
    pred_leaves = [preds[rid].final_class for rid in ordered]
    scores = np.array([preds[rid].p_malignant for rid in ordered])
    branch_truth = np.array([1 if t.branch is Branch.MALIGNANT else 0 for t in truth_leaves])

    values: dict[str, Optional[float]] = {}
    outcome = M.BinaryOutcomeSet(scores, branch_truth)
    values["stage1_auc"] = M.roc_auc(outcome) if 0 < branch_truth.sum() < len(branch_truth) else None
    values["accuracy"] = float(np.mean([p is t for p, t in zip(pred_leaves, truth_leaves)]))
    values.update(_recall_by_class(truth_leaves, pred_leaves, LEAF_ORDER))
    composed = np.stack([preds[rid].composed_probs for rid in ordered])
    truth_idx = np.array([LEAF_ORDER.index(t) for t in truth_leaves])
    mc = M.multiclass_auc(composed, truth_idx, [c.name for c in LEAF_ORDER])
    values["macro_auc"] = mc.macro
    values["weighted_auc"] = mc.weighted
    roc = M.roc_curve(outcome) if values["stage1_auc"] is not None else None
    return values, rows, roc


def _evaluate_multiclass(model: SingleModel, eval_pools: Mapping[str, list[CompositeSet]],
                         truths: Mapping[str, LeafClass], task: str):
    ordered = sorted(eval_pools)
    probs = np.stack([model.predict_study(eval_pools[rid]).probs for rid in ordered])
    truth_leaves = [truths[rid] for rid in ordered]
    truth_idx = np.array([LEAF_ORDER.index(t) for t in truth_leaves])
    pred_leaves = [LEAF_ORDER[int(i)] for i in probs.argmax(axis=1)]

    rows = [M.ClassificationRow(
        report_id=rid, task=task,
        probs={cls.name: float(p) for cls, p in zip(LEAF_ORDER, probs[i])},
        truth=truth_leaves[i].name) for i, rid in enumerate(ordered)]

    values: dict[str, Optional[float]] = {
        "accuracy": float(np.mean([p is t for p, t in zip(pred_leaves, truth_leaves)]))}
    values.update(_recall_by_class(truth_leaves, pred_leaves, LEAF_ORDER))
    mc = M.multiclass_auc(probs, truth_idx, [c.name for c in LEAF_ORDER])
    values["macro_auc"] = mc.macro
    values["weighted_auc"] = mc.weighted
    return values, rows, None


def _evaluate_binary(model: SingleModel, eval_pools: Mapping[str, list[CompositeSet]],
                     truths: Mapping[str, LeafClass], task: str):
    """Binary tasks score the second class of the model's pair as positive."""
    ordered = sorted(eval_pools)
    probs = np.stack([model.predict_study(eval_pools[rid]).probs for rid in ordered])
    positive_name = model.classes[1]
    if task == "benign_vs_malignant":
        truth_pos = np.array([1 if truths[rid].branch is Branch.MALIGNANT else 0
                              for rid in ordered])
    else:
        truth_pos = np.array([1 if truths[rid].name == positive_name else 0
                              for rid in ordered])
    rows = [M.ClassificationRow(
        report_id=rid, task=task,
        probs={name: float(p) for name, p in zip(model.classes, probs[i])},
        truth=truths[rid].name) for i, rid in enumerate(ordered)]

    outcome = M.BinaryOutcomeSet(probs[:, 1], truth_pos)
    bm = M.binary_metrics(outcome)
    values: dict[str, Optional[float]] = {
        "accuracy": bm.accuracy, "precision": bm.precision, "recall": bm.recall,
        "f1": bm.f1, "specificity": bm.specificity,
    }
    has_both = 0 < truth_pos.sum() < len(truth_pos)
    values["auc"] = M.roc_auc(outcome) if has_both else None
    roc = M.roc_curve(outcome) if has_both else None
    return values, rows, roc


def _eval_report_ids(manifest: CohortManifest, split: str, task: str) -> list[str]:
    truths = _report_truths(manifest, split)
    if task == "benign_subtype":
        keep = BRANCH_LEAVES[Branch.BENIGN]
    elif task == "malignant_subtype":
        keep = BRANCH_LEAVES[Branch.MALIGNANT]
    else:
        return sorted(truths)
    return sorted(rid for rid, cls in truths.items() if cls in keep)


# ---------------------------------------------------------------------------
# Run orchestration


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    out_dir: Path


@dataclass
class RunResult:
    config: ExperimentConfig
    config_hash: str
    out_dir: Path
    per_seed: list[SeedResult]
    summary: list


def _write_roc_csv(path: Path, roc: tuple[np.ndarray, np.ndarray]) -> None:
    fpr, tpr = roc
    lines = ["fpr,tpr"] + [f"{repr(float(x))},{repr(float(y))}" for x, y in zip(fpr, tpr)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _metric_rows(values: Mapping[str, Optional[float]], n: int) -> list[M.MetricRow]:
    return [M.MetricRow(metric=k, point=values[k], ci_lower=None, ci_upper=None, n=n)
            for k in sorted(values)]


def build_and_train(cfg: ExperimentConfig, run_seed: int, manifest: CohortManifest,
                    grids: Mapping[str, SliceGrid]):
    """Train the config's model for one seed; returns (model, checkpoint).

    The manifest must carry a split assignment; pools come from the train
    split, early stopping watches the validation split.
    """
    train_ids = sorted(r.report_id for _, r in manifest.reports_in_split("train"))
    pool = training_pool(grids, train_ids, cfg.phase_subset, cfg.aug_config)
    val_ids = _eval_report_ids(manifest, "val", cfg.task)
    val_pools = evaluation_pool(grids, val_ids, cfg.phase_subset)
    val_flat = [c for rid in sorted(val_pools) for c in val_pools[rid]]
    settings = _settings_for(cfg, run_seed)
    if cfg.task == "two_step":
        model = train_two_stage(pool, val_flat, settings)
        ckpt = two_stage_to_checkpoint(model, cfg.task)
    else:
        model_name = ONE_STEP if cfg.task == "one_step" else _BINARY_TASKS[cfg.task]
        model = train_single(model_name, pool, val_flat, settings)
        ckpt = single_to_checkpoint(model, cfg.task)
    return model, ckpt


def _run_seed_cell(cfg: ExperimentConfig, run_seed: int, manifest: CohortManifest,
                   grids: Mapping[str, SliceGrid],
                   test_manifest: Optional[CohortManifest],
                   test_grids: Optional[Mapping[str, SliceGrid]],
                   out_dir: Path) -> SeedResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    val_ids = _eval_report_ids(manifest, "val", cfg.task)
    val_pools = evaluation_pool(grids, val_ids, cfg.phase_subset)
    truths = _report_truths(manifest, "val")

    model, ckpt = build_and_train(cfg, run_seed, manifest, grids)
    if cfg.task == "two_step":
        values, rows, roc = _evaluate_two_stage(model, val_pools, truths)
    elif cfg.task == "one_step":
        values, rows, roc = _evaluate_multiclass(model, val_pools, truths, cfg.task)
    else:
        values, rows, roc = _evaluate_binary(model, val_pools, truths, cfg.task)

    if test_manifest is not None:
        test_ids = _eval_report_ids(test_manifest, "test", cfg.task)
        test_pools = evaluation_pool(test_grids, test_ids, cfg.phase_subset)
        test_truths = _report_truths(test_manifest, "test")
        if cfg.task == "two_step":
            test_values, test_rows, _ = _evaluate_two_stage(model, test_pools, test_truths)
        elif cfg.task == "one_step":
            test_values, test_rows, _ = _evaluate_multiclass(model, test_pools, test_truths, cfg.task)
        else:
            test_values, test_rows, _ = _evaluate_binary(model, test_pools, test_truths, cfg.task)
        values.update({f"test_{k}": v for k, v in test_values.items()})
        M.save_classification_predictions(test_rows, out_dir / "predictions_test.json")

    save_checkpoint(ckpt, out_dir / "model.bin")
    M.save_classification_predictions(rows, out_dir / "predictions.json")
    M.write_metrics_report(_metric_rows(values, 1), out_dir / "metrics.json",
                           out_dir / "metrics.csv")
    if roc is not None:
        _write_roc_csv(out_dir / "roc.csv", roc)
    return SeedResult(seed=run_seed, metrics=values, out_dir=out_dir)


def _run_detection(cfg: ExperimentConfig, out_dir: Path) -> RunResult:
    instances = M.load_detection_predictions(_resolve(cfg, cfg.data.detections))
    summary = M.average_precision(instances)
    values = {"ap": summary.ap, "precision": summary.precision,
              "recall": summary.recall, "f1": summary.f1}
    rows = _metric_rows(values, len(instances))
    out_dir.mkdir(parents=True, exist_ok=True)
    M.write_metrics_report(rows, out_dir / "metrics.json", out_dir / "metrics.csv")
    seed_result = SeedResult(seed=0, metrics=values, out_dir=out_dir)
    return RunResult(config=cfg, config_hash=config_hash(cfg), out_dir=out_dir,
                     per_seed=[seed_result], summary=rows)


def aggregate_metrics(per_seed: Sequence[Mapping[str, Optional[float]]]) -> list[M.MetricRow]:
    """Seed-mean with a 95% t-interval; absent values are excluded per metric."""
    names = sorted({k for values in per_seed for k in values})
    rows = []
    for name in names:
        defined = [values[name] for values in per_seed
                   if values.get(name) is not None]
        if not defined:
            rows.append(M.MetricRow(name, None, None, None, 0))
            continue
        if len(defined) == 1:
            rows.append(M.MetricRow(name, float(defined[0]), None, None, 1))
            continue
        mean, sem = M.mean_sem(defined)
        ci = M.t_confidence_interval(mean, sem, len(defined))
        rows.append(M.MetricRow(name, mean, ci.lower, ci.upper, len(defined)))
    return rows


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run every (seed) cell, then aggregate.  Fully deterministic."""
    validate_config(cfg)
    out_dir = _resolve(cfg, cfg.outputs)
    try:
        if cfg.task == "detection_eval":
            result = _run_detection(cfg, out_dir)
            _write_run_manifest(result)
            return result

        manifest = load_manifest(_resolve(cfg, cfg.data.manifest))
        manifest = split_by_patient(manifest, cfg.data.train_fraction, cfg.data.split_seed)
        grids = load_grids(manifest)
        test_manifest = test_grids = None
        if cfg.data.test_manifest:
            test_manifest = assign_whole_cohort(
                load_manifest(_resolve(cfg, cfg.data.test_manifest)), "test")
            test_grids = load_grids(test_manifest)

        threads = max(1, int(os.environ.get("PKCP_THREADS", "1")))
        cells = [(seed, out_dir / f"seed_{seed}") for seed in cfg.seeds]
        if threads > 1 and len(cells) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(_run_seed_cell, cfg, seed, manifest, grids,
                                       test_manifest, test_grids, cell_dir)
                           for seed, cell_dir in cells]
                per_seed = [f.result() for f in futures]
        else:
            per_seed = [_run_seed_cell(cfg, seed, manifest, grids,
                                       test_manifest, test_grids, cell_dir)
                        for seed, cell_dir in cells]
    except ConfigError:
        raise
    except Exception as exc:
        raise RuntimeError(f"experiment {cfg.name!r}: {exc}") from exc

    summary = aggregate_metrics([r.metrics for r in per_seed])
    summary_dir = out_dir / "summary"
    summary_dir.mkdir(parents=True, exist_ok=True)
    M.write_metrics_report(summary, summary_dir / "metrics.json",
                           summary_dir / "metrics.csv")
    result = RunResult(config=cfg, config_hash=config_hash(cfg), out_dir=out_dir,
                       per_seed=per_seed, summary=summary)
    _write_run_manifest(result)
    return result


def _write_run_manifest(result: RunResult) -> None:
    doc = {
        "name": result.config.name,
        "config": normalized_config_dict(result.config),
        "config_hash": result.config_hash,
        "artifacts": {
            "summary": "summary/metrics.json" if result.config.task != "detection_eval" else "metrics.json",
            "seeds": {str(r.seed): str(r.out_dir.relative_to(result.out_dir))
                      for r in result.per_seed if r.out_dir != result.out_dir},
        },
    }
    atomic_write_text(result.out_dir / "run_manifest.json", canonical_json(doc) + "\n")


# ---------------------------------------------------------------------------
# Ablation suites

AXES = ("aug", "phases", "steps")


def _leave_one_out_subsets() -> list[tuple[PhaseId, ...]]:
    full = PhaseId.canonical_order()
    subsets: list[tuple[PhaseId, ...]] = [full]
    for dropped in full:
        subsets.append(tuple(p for p in full if p is not dropped))
    return subsets


def ablation_variants(base: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")
    variants = []
    if axis == "aug":
        for aug in AUG_CONFIGS:
            cfg = dataclasses.replace(
                base, aug_config=aug,
                phase_subset=default_phase_subset(aug, base.single_phase,
                                                  base.hyperparams.seed),
                mixup=dataclasses.replace(base.mixup, enabled=True)
                if aug == "pkcp_mixup" else base.mixup)
            variants.append((aug, cfg))
    elif axis == "phases":
        for subset in _leave_one_out_subsets():
            variants.append((subset_code(subset),
                             dataclasses.replace(base, phase_subset=subset)))
    else:
        for task in ("one_step", "two_step"):
            variants.append((task, dataclasses.replace(base, task=task)))
    out = []
    for variant_name, cfg in variants:
        cfg = dataclasses.replace(
            cfg, name=f"{base.name}-{variant_name}",
            outputs=str(Path(base.outputs) / axis / variant_name))
        validate_config(cfg)
        out.append((variant_name, cfg))
    return out


@dataclass
class AblationResult:
    axis: str
    out_dir: Path
    runs: list            # (variant name, RunResult)
    comparison: list      # (variant, MetricRow)


def run_ablation_suite(base: ExperimentConfig, axis: str) -> AblationResult:
    """Run one axis of the ablation grid and assemble the comparison table."""
    variants = ablation_variants(base, axis)
    runs = [(name, run_experiment(cfg)) for name, cfg in variants]
    out_dir = _resolve(base, base.outputs) / axis

    comparison = [(name, row) for name, result in runs for row in result.summary]
    doc = [{"variant": name, "metric": row.metric, "point": row.point,
            "ci_lower": row.ci_lower, "ci_upper": row.ci_upper, "n": row.n}
           for name, row in comparison]
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "comparison.json", canonical_json(doc) + "\n")

    def cell(v):
        return "" if v is None else repr(float(v))

    lines = ["variant,metric,point,ci_lower,ci_upper,n"]
    for name, row in comparison:
        lines.append(f"{name},{row.metric},{cell(row.point)},{cell(row.ci_lower)},"
                     f"{cell(row.ci_upper)},{row.n}")
    atomic_write_text(out_dir / "comparison.csv", "\n".join(lines) + "\n")

    roc_lines = ["variant,seed,fpr,tpr"]
    for name, result in runs:
        for seed_result in result.per_seed:
            roc_path = seed_result.out_dir / "roc.csv"
            if roc_path.is_file():
                for line in roc_path.read_text().splitlines()[1:]:
                    roc_lines.append(f"{name},{seed_result.seed},{line}")
    atomic_write_text(out_dir / "plot_roc.csv", "\n".join(roc_lines) + "\n")
    return AblationResult(axis=axis, out_dir=out_dir, runs=runs, comparison=comparison)
