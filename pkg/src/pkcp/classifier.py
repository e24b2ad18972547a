"""Reference classifier: hand-designed image features into a single dense
softmax layer, trained by mini-batch SGD with weight decay and early
stopping.

The feature map is fixed, not learned.  Per channel: global mean and
variance, lesion-region mean and variance (region = union box dilated by
a margin), and an 8x8 average-pooled grid, 68 values; plus one shared
box-area fraction.  A P-channel composite therefore yields 68*P + 1
features.  Features are standardized with statistics frozen from the
unmixed training pool so that blended samples are measured on the same
scale as their parents.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import BoundingBox, PhaseId
from .ioutil import atomic_write_bytes

POOL_GRID = 8
FEATURES_PER_CHANNEL = 4 + POOL_GRID * POOL_GRID   # mean, var, region mean, region var, pool
SD_FLOOR = 1e-12


def feature_dim(n_channels: int) -> int:
    return FEATURES_PER_CHANNEL * n_channels + 1


# ---------------------------------------------------------------------------
# Feature extraction


def _as_unit_float(channels: np.ndarray) -> np.ndarray:
    if channels.dtype == np.uint8:
        return channels.astype(np.float64) / 255.0
    return np.asarray(channels, dtype=np.float64)


def _pooled(batch: np.ndarray) -> np.ndarray:
    """(N, P, H, W) -> (N, P, g, g) block averages; blocks cover the image."""
    n, p, h, w = batch.shape
    g = POOL_GRID
    if h < g or w < g:
        raise ValueError(f"image {h}x{w} smaller than {g}x{g} pooling grid")
    row_starts = (np.arange(g) * h) // g
    col_starts = (np.arange(g) * w) // g
    sums = np.add.reduceat(batch, row_starts, axis=2)
    sums = np.add.reduceat(sums, col_starts, axis=3)
    row_counts = np.diff(np.append(row_starts, h))
    col_counts = np.diff(np.append(col_starts, w))
    return sums / (row_counts[:, None] * col_counts[None, :])


def extract_features_batch(channels: Sequence[np.ndarray],
                           boxes: Sequence[Optional[BoundingBox]],
                           mask_margin: int = 2) -> np.ndarray:
    """Feature matrix (N, 68*P + 1) for N composites sharing one shape.

    Per-channel block layout: [mean, variance, region mean, region
    variance, 8x8 pool row-major]; the final column is the box-area
    fraction (0 when no box).  Region statistics fall back to whole-image
    statistics when a composite has no box.
    """
    batch = np.stack([_as_unit_float(c) for c in channels], axis=0)
    n, p, h, w = batch.shape
    if len(boxes) != n:
        raise ValueError("boxes and channels disagree in length")

    mean = batch.mean(axis=(2, 3))
    var = batch.var(axis=(2, 3))
    pooled = _pooled(batch).reshape(n, p, POOL_GRID * POOL_GRID)

    region_mean = np.empty((n, p))
    region_var = np.empty((n, p))
    area_frac = np.zeros(n)
    for i, box in enumerate(boxes):
        if box is None:
            region_mean[i] = mean[i]
            region_var[i] = var[i]
            continue
        roi = box.dilated(mask_margin, h, w)
        patch = batch[i, :, roi.y_min:roi.y_max, roi.x_min:roi.x_max]
        region_mean[i] = patch.mean(axis=(1, 2))
        region_var[i] = patch.var(axis=(1, 2))
        area_frac[i] = box.area / (h * w)

    per_channel = np.concatenate(
        [mean[:, :, None], var[:, :, None], region_mean[:, :, None],
         region_var[:, :, None], pooled], axis=2)
    return np.concatenate([per_channel.reshape(n, -1), area_frac[:, None]], axis=1)


def extract_features(channels: np.ndarray, box: Optional[BoundingBox],
                     mask_margin: int = 2) -> np.ndarray:
    return extract_features_batch([channels], [box], mask_margin)[0]


# ---------------------------------------------------------------------------
# Standardization


@dataclass(frozen=True)
class Standardizer:
    mu: np.ndarray
    sd: np.ndarray

    @staticmethod
    def fit(features: np.ndarray) -> "Standardizer":
        mu = features.mean(axis=0)
        sd = features.std(axis=0)
        sd = np.where(sd < SD_FLOOR, 1.0, sd)   # constant columns pass through
        return Standardizer(mu=mu, sd=sd)

    @staticmethod
    def identity(dim: int) -> "Standardizer":
        return Standardizer(mu=np.zeros(dim), sd=np.ones(dim))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mu) / self.sd


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 10
    init_scale: float = 0.01
    seed: int = 0


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean soft-target cross-entropy, -sum(y * log p) averaged over rows."""
    logp = np.log(np.clip(probs, 1e-300, None))
    return float(-(targets * logp).sum(axis=1).mean())


@dataclass
class FitResult:
    epochs_run: int
    best_epoch: int
    best_val_ce: float
    history: list = field(default_factory=list)   # (epoch, train objective, val CE)


class ArrayBatches:
    """Fixed feature/target arrays served in seeded per-epoch shuffles."""

    def __init__(self, features: np.ndarray, targets: np.ndarray,
                 batch_size: int, seed: int):
        if len(features) != len(targets):
            raise ValueError("features and targets disagree in length")
        if len(features) == 0:
            raise ValueError("empty training pool")
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


class ReferenceClassifier:
    """Linear softmax classifier over standardized features.

    Objective: soft-target cross-entropy plus 0.5 * weight_decay * ||W||^2
    (decay on W only, not the bias).  Optimized by plain SGD.
    """

    def __init__(self, n_features: int, n_classes: int,
                 hp: Hyperparams = Hyperparams(),
                 standardizer: Optional[Standardizer] = None):
        self.n_features = n_features
        self.n_classes = n_classes
        self.hp = hp
        self.standardizer = standardizer or Standardizer.identity(n_features)
        rng = np.random.default_rng(hp.seed)
        self.W = rng.uniform(-hp.init_scale, hp.init_scale, size=(n_features, n_classes))
        self.b = np.zeros(n_classes)

    # -- inference ---------------------------------------------------------

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        x = self.standardizer.apply(np.atleast_2d(features))
        return softmax(x @ self.W + self.b)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.predict_proba(features).argmax(axis=1)

    def val_cross_entropy(self, features: np.ndarray, targets: np.ndarray) -> float:
        return cross_entropy(self.predict_proba(features), targets)

    # -- training ----------------------------------------------------------

    def _objective_and_grads(self, x_std: np.ndarray, targets: np.ndarray):
        n = len(x_std)
        probs = softmax(x_std @ self.W + self.b)
        wd = self.hp.weight_decay
        obj = cross_entropy(probs, targets) + 0.5 * wd * float(np.sum(self.W * self.W))
        dz = (probs - targets) / n
        grad_w = x_std.T @ dz + wd * self.W
        grad_b = dz.sum(axis=0)
        return obj, grad_w, grad_b

    def step(self, x_std: np.ndarray, targets: np.ndarray) -> float:
        obj, grad_w, grad_b = self._objective_and_grads(x_std, targets)
        self.W -= self.hp.learning_rate * grad_w
        self.b -= self.hp.learning_rate * grad_b
        return obj

    def fit(self, source, val_features: Optional[np.ndarray] = None,
            val_targets: Optional[np.ndarray] = None) -> FitResult:
        """Train from a batch source yielding raw (unstandardized) features.

        `source.epoch(e)` must yield (features, targets) batches.  With a
        validation set, stops after `patience` epochs without a new best
        validation cross-entropy and restores the best weights.
        """
        has_val = val_features is not None
        best_ce = np.inf
        best = (self.W.copy(), self.b.copy())
        best_epoch = -1
        bad = 0
        history = []
        epochs_run = 0
        for epoch in range(self.hp.max_epochs):
            epochs_run = epoch + 1
            total, batches = 0.0, 0
            for features, targets in source.epoch(epoch):
                total += self.step(self.standardizer.apply(features), targets)
                batches += 1
            train_obj = total / max(batches, 1)
            if not has_val:
                history.append((epoch, train_obj, None))
                continue
            val_ce = self.val_cross_entropy(val_features, val_targets)
            history.append((epoch, train_obj, val_ce))
            if val_ce < best_ce:
                best_ce = val_ce
                best = (self.W.copy(), self.b.copy())
                best_epoch = epoch
                bad = 0
            else:
                bad += 1
                if bad >= self.hp.patience:
                    break
        if has_val:
            self.W, self.b = best
        else:
            best_epoch = epochs_run - 1
            best_ce = history[-1][1] if history else np.inf
        return FitResult(epochs_run=epochs_run, best_epoch=best_epoch,
                         best_val_ce=float(best_ce), history=history)

    def fit_arrays(self, features: np.ndarray, targets: np.ndarray,
                   val_features: Optional[np.ndarray] = None,
                   val_targets: Optional[np.ndarray] = None) -> FitResult:
        source = ArrayBatches(features, targets, self.hp.batch_size, self.hp.seed)
        return self.fit(source, val_features, val_targets)


def numeric_gradient(model: ReferenceClassifier, x_std: np.ndarray,
                     targets: np.ndarray, eps: float = 1e-5):
    """Central-difference gradients of the training objective."""
    grad_w = np.zeros_like(model.W)
    grad_b = np.zeros_like(model.b)

    def objective():
        probs = softmax(x_std @ model.W + model.b)
        return cross_entropy(probs, targets) + 0.5 * model.hp.weight_decay * float(
            np.sum(model.W * model.W))

    for idx in np.ndindex(model.W.shape):
        orig = model.W[idx]
        model.W[idx] = orig + eps
        hi = objective()
        model.W[idx] = orig - eps
        lo = objective()
        model.W[idx] = orig
        grad_w[idx] = (hi - lo) / (2 * eps)
    for j in range(model.b.size):
        orig = model.b[j]
        model.b[j] = orig + eps
        hi = objective()
        model.b[j] = orig - eps
        lo = objective()
        model.b[j] = orig
        grad_b[j] = (hi - lo) / (2 * eps)
    return grad_w, grad_b


def gradient_check(n_features: int = 30, n_classes: int = 4, n_batches: int = 20,
                   batch_size: int = 16, seed: int = 0) -> float:
    """Worst relative error between analytic and numeric gradients.

    Defaults give 124 checked parameters per batch (every entry of W and b).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for batch in range(n_batches):
        hp = Hyperparams(seed=seed + batch)
        model = ReferenceClassifier(n_features, n_classes, hp)
        model.W = rng.normal(0.0, 0.5, size=model.W.shape)
        model.b = rng.normal(0.0, 0.5, size=model.b.shape)
        x = rng.normal(0.0, 1.0, size=(batch_size, n_features))
        targets = rng.dirichlet(np.ones(n_classes), size=batch_size)
        _, ana_w, ana_b = model._objective_and_grads(x, targets)
        num_w, num_b = numeric_gradient(model, x, targets)
        for ana, num in ((ana_w, num_w), (ana_b, num_b)):
            denom = np.maximum(np.abs(ana) + np.abs(num), 1e-8)
            worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst


# ---------------------------------------------------------------------------
# Checkpoint container (binary: magic, version, JSON header, raw float64 arrays)

CKPT_MAGIC = b"PKCPCKPT"
CKPT_VERSION = 1
_ARRAY_NAMES = ("W", "b", "mu", "sd")


@dataclass(frozen=True)
class ModelRecord:
    name: str
    classes: tuple[str, ...]
    input_shape: tuple[int, int, int]    # (P, H, W)
    classifier: ReferenceClassifier


@dataclass(frozen=True)
class Checkpoint:
    kind: str                            # "single" or "two_stage"
    task: str
    phases: tuple[PhaseId, ...]
    mask_margin: int
    models: tuple[ModelRecord, ...]

    def model(self, name: str) -> ModelRecord:
        for record in self.models:
            if record.name == name:
                return record
        raise KeyError(f"checkpoint has no model {name!r}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays: list[np.ndarray] = []
    model_docs = []
    for record in ckpt.models:
        clf = record.classifier
        named = {"W": clf.W, "b": clf.b, "mu": clf.standardizer.mu, "sd": clf.standardizer.sd}
        model_docs.append({
            "name": record.name,
            "classes": list(record.classes),
            "input_shape": list(record.input_shape),
            "pool_grid": POOL_GRID,
            "arrays": [{"name": n, "shape": list(named[n].shape)} for n in _ARRAY_NAMES],
        })
        arrays.extend(named[n] for n in _ARRAY_NAMES)
    header = json.dumps({
        "schema_version": CKPT_VERSION,
        "kind": ckpt.kind,
        "task": ckpt.task,
        "phases": [p.name for p in ckpt.phases],
        "mask_margin": ckpt.mask_margin,
        "models": model_docs,
    }, sort_keys=True).encode("utf-8")

    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<IQ", CKPT_VERSION, len(header))
    blob += header
    for arr in arrays:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    atomic_write_bytes(Path(path), bytes(blob))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    version, header_len = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 8 + struct.calcsize("<IQ")
    header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    records = []
    for doc in header["models"]:
        named = {}
        for spec in doc["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += count * 8
            named[spec["name"]] = arr.astype(np.float64)
        n_features, n_classes = named["W"].shape
        clf = ReferenceClassifier(n_features, n_classes,
                                  standardizer=Standardizer(named["mu"], named["sd"]))
        clf.W = named["W"]
        clf.b = named["b"]
        records.append(ModelRecord(
            name=doc["name"],
            classes=tuple(doc["classes"]),
            input_shape=tuple(doc["input_shape"]),
            classifier=clf,
        ))
    if offset != len(data):
        raise ValueError("checkpoint has trailing bytes")
    return Checkpoint(
        kind=header["kind"],
        task=header["task"],
        phases=tuple(PhaseId.from_name(n) for n in header["phases"]),
        mask_margin=int(header["mask_margin"]),
        models=tuple(records),
    )
