"""Cohort ingestion: manifest I/O, HU windowing, patient-grouped splits, and
the synthetic lesion phantom generator used for desk-scale verification.

A cohort lives in one directory: a `manifest.json` (schema documented in
docs/manifest_schema.md) plus 8-bit grayscale PNG slice images referenced by
relative path.  Manifest images are already display-windowed; raw HU arrays
are brought into that space with :func:`apply_window`.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from PIL import Image

from .core import (
    LEAF_ORDER,
    BoundingBox,
    LeafClass,
    PhaseId,
    Slice,
    SliceGrid,
)
from .ioutil import atomic_write_text, canonical_json

SCHEMA_VERSION = 1

TRAIN, VAL, TEST = "train", "val", "test"


class ManifestError(ValueError):
    """Raised for schema violations and missing cohort files."""


# ---------------------------------------------------------------------------
# Manifest model


@dataclass(frozen=True)
class SliceEntry:
    phase: PhaseId
    k: int
    path: str                      # relative to the manifest directory
    box: Optional[BoundingBox]


@dataclass(frozen=True)
class ReportRecord:
    report_id: str
    class_label: LeafClass
    slices: tuple[SliceEntry, ...]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: float
    sex: str
    reports: tuple[ReportRecord, ...]


@dataclass(frozen=True)
class CohortManifest:
    root: Path
    phases: tuple[PhaseId, ...]
    slices_per_phase: int          # K
    patients: tuple[PatientRecord, ...]
    image_size: Optional[tuple[int, int]] = None   # (H, W) when declared
    split_assignment: Optional[Mapping[str, str]] = None  # report_id -> train|val|test

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    def reports(self):
        for patient in self.patients:
            for report in patient.reports:
                yield patient, report

    @property
    def n_reports(self) -> int:
        return sum(len(p.reports) for p in self.patients)

    @property
    def n_slices(self) -> int:
        return sum(len(r.slices) for _, r in self.reports())

    def split_of(self, report_id: str) -> Optional[str]:
        if self.split_assignment is None:
            return None
        return self.split_assignment.get(report_id)

    def reports_in_split(self, split: str):
        for patient, report in self.reports():
            if self.split_of(report.report_id) == split:
                yield patient, report


# ---------------------------------------------------------------------------
# Manifest parsing / serialization


def _require(cond: bool, where: str, msg: str):
    if not cond:
        raise ManifestError(f"{where}: {msg}")


def _parse_box(raw, where: str) -> Optional[BoundingBox]:
    if raw is None:
        return None
    _require(isinstance(raw, list) and len(raw) == 4, where, "box must be [x_min,y_min,x_max,y_max] or null")
    _require(all(isinstance(v, int) for v in raw), where, "box coordinates must be integers")
    try:
        return BoundingBox(*raw)
    except ValueError as exc:
        raise ManifestError(f"{where}: {exc}") from None


def load_manifest(path: str | Path, check_images: bool = True) -> CohortManifest:
    """Parse and fully validate a cohort manifest.

    Every referenced image file must exist and agree with the declared
    image size (when the manifest declares one) and with its report's other
    slices.  Raises :class:`ManifestError` naming the offending field.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from None

    root = path.parent
    _require(isinstance(doc, dict), str(path), "top level must be an object")
    _require(doc.get("schema_version") == SCHEMA_VERSION, "schema_version",
             f"expected {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")

    raw_phases = doc.get("phases")
    _require(isinstance(raw_phases, list) and raw_phases, "phases", "must be a non-empty list")
    phases = tuple(PhaseId.from_name(str(p)) for p in raw_phases)
    _require(len(set(phases)) == len(phases), "phases", "duplicate phase")
    _require(list(phases) == sorted(phases), "phases", "must be in canonical order PC < AP < PVP < DP")

    K = doc.get("K")
    _require(isinstance(K, int) and K >= 1, "K", "must be an integer >= 1")

    image_size = None
    if doc.get("image_size") is not None:
        raw_size = doc["image_size"]
        _require(isinstance(raw_size, list) and len(raw_size) == 2
                 and all(isinstance(v, int) and v > 0 for v in raw_size),
                 "image_size", "must be [height, width] with positive integers")
        image_size = (raw_size[0], raw_size[1])

    raw_patients = doc.get("patients")
    _require(isinstance(raw_patients, list), "patients", "must be a list")

    patients = []
    seen_patients: set[str] = set()
    seen_reports: set[str] = set()
    for i, rp in enumerate(raw_patients):
        where = f"patients[{i}]"
        _require(isinstance(rp, dict), where, "must be an object")
        pid = rp.get("patient_id")
        _require(isinstance(pid, str) and pid, f"{where}.patient_id", "must be a non-empty string")
        _require(pid not in seen_patients, f"{where}.patient_id", f"duplicate patient_id {pid!r}")
        seen_patients.add(pid)
        age = rp.get("age")
        _require(isinstance(age, (int, float)), f"{where}.age", "must be a number")
        sex = rp.get("sex")
        _require(isinstance(sex, str) and sex, f"{where}.sex", "must be a non-empty string")

        reports = []
        for j, rr in enumerate(rp.get("reports") or []):
            rwhere = f"{where}.reports[{j}]"
            rid = rr.get("report_id")
            _require(isinstance(rid, str) and rid, f"{rwhere}.report_id", "must be a non-empty string")
            _require(rid not in seen_reports, f"{rwhere}.report_id", f"duplicate report_id {rid!r}")
            seen_reports.add(rid)
            try:
                cls = LeafClass.from_name(str(rr.get("class")))
            except ValueError as exc:
                raise ManifestError(f"{rwhere}.class: {exc}") from None

            raw_slices = rr.get("slices")
            _require(isinstance(raw_slices, list), f"{rwhere}.slices", "must be a list")
            entries = []
            seen_cells: set[tuple[PhaseId, int]] = set()
            for s, rs in enumerate(raw_slices):
                swhere = f"{rwhere}.slices[{s}]"
                try:
                    phase = PhaseId.from_name(str(rs.get("phase")))
                except ValueError as exc:
                    raise ManifestError(f"{swhere}.phase: {exc}") from None
                _require(phase in phases, f"{swhere}.phase", f"{phase.name} not in manifest phases")
                k = rs.get("k")
                _require(isinstance(k, int) and 1 <= k <= K, f"{swhere}.k", f"must be in 1..{K}")
                _require((phase, k) not in seen_cells, swhere, f"duplicate cell ({phase.name}, {k})")
                seen_cells.add((phase, k))
                rel = rs.get("path")
                _require(isinstance(rel, str) and rel, f"{swhere}.path", "must be a non-empty string")
                box = _parse_box(rs.get("box"), f"{swhere}.box")
                entries.append(SliceEntry(phase, k, rel, box))

            _require(len(entries) == len(phases) * K, f"{rwhere}.slices",
                     f"expected {len(phases) * K} slices (P x K), got {len(entries)}")
            reports.append(ReportRecord(rid, cls, tuple(entries)))
        patients.append(PatientRecord(pid, float(age), sex, tuple(reports)))

    manifest = CohortManifest(root=root, phases=phases, slices_per_phase=K,
                              patients=tuple(patients), image_size=image_size)
    if check_images:
        _check_images(manifest)
    return manifest


def _check_images(manifest: CohortManifest) -> None:
    for patient, report in manifest.reports():
        report_size = manifest.image_size
        for entry in report.slices:
            full = manifest.root / entry.path
            where = f"report {report.report_id} slice ({entry.phase.name}, {entry.k})"
            if not full.is_file():
                raise ManifestError(f"{where}: image not found: {full}")
            with Image.open(full) as im:
                size = (im.height, im.width)
            if report_size is None:
                report_size = size
            elif size != report_size:
                raise ManifestError(f"{where}: image size {size} != expected {report_size}")
            if entry.box is not None and not entry.box.within_image(*size):
                raise ManifestError(f"{where}: box {entry.box.as_tuple()} exceeds image bounds {size}")


def manifest_to_dict(manifest: CohortManifest) -> dict:
    doc: dict = {
        "schema_version": SCHEMA_VERSION,
        "phases": [p.name for p in manifest.phases],
        "K": manifest.slices_per_phase,
        "patients": [
            {
                "patient_id": p.patient_id,
                "age": p.age,
                "sex": p.sex,
                "reports": [
                    {
                        "report_id": r.report_id,
                        "class": r.class_label.name,
                        "slices": [
                            {
                                "phase": e.phase.name,
                                "k": e.k,
                                "path": e.path,
                                "box": list(e.box.as_tuple()) if e.box else None,
                            }
                            for e in r.slices
                        ],
                    }
                    for r in p.reports
                ],
            }
            for p in manifest.patients
        ],
    }
    if manifest.image_size is not None:
        doc["image_size"] = list(manifest.image_size)
    return doc


def save_manifest(manifest: CohortManifest, path: str | Path) -> None:
    atomic_write_text(Path(path), canonical_json(manifest_to_dict(manifest)) + "\n")


# ---------------------------------------------------------------------------
# Grid construction


def load_slice_image(manifest: CohortManifest, entry: SliceEntry) -> np.ndarray:
    with Image.open(manifest.root / entry.path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8)


def build_grid(manifest: CohortManifest, patient: PatientRecord, report: ReportRecord) -> SliceGrid:
    """Materialize one report's P x K slice grid, loading pixel data."""
    by_cell = {(e.phase, e.k): e for e in report.slices}
    rows = []
    for phase in manifest.phases:
        row = []
        for k in range(1, manifest.slices_per_phase + 1):
            entry = by_cell[(phase, k)]
            row.append(Slice(
                patient_id=patient.patient_id,
                report_id=report.report_id,
                phase=phase,
                depth_index=k,
                pixels=load_slice_image(manifest, entry),
                lesion_box=entry.box,
            ))
        rows.append(tuple(row))
    return SliceGrid(report_id=report.report_id, class_label=report.class_label,
                     phases=manifest.phases, slices=tuple(rows))


def load_grids(manifest: CohortManifest) -> dict[str, SliceGrid]:
    return {r.report_id: build_grid(manifest, p, r) for p, r in manifest.reports()}


# ---------------------------------------------------------------------------
# HU windowing


@dataclass(frozen=True)
class WindowSpec:
    """Display window: level (center) and width, both in HU."""

    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("window width must be positive")


PRECONTRAST_WINDOW = WindowSpec(level=40.0, width=250.0)
ENHANCED_WINDOW = WindowSpec(level=45.0, width=290.0)


def apply_window(hu: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Map HU values to 8-bit display intensities.

    out = round(clamp((hu - (level - width/2)) / width, 0, 1) * 255) with
    rounding half away from zero; monotone non-decreasing in hu.
    """
    hu = np.asarray(hu, dtype=np.float64)
    lo = spec.level - spec.width / 2.0
    scaled = np.clip((hu - lo) / spec.width, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)  # values >= 0, so this is half-away


# ---------------------------------------------------------------------------
# Patient-grouped splitting


def split_by_patient(manifest: CohortManifest, train_fraction: float, seed: int) -> CohortManifest:
    """Assign whole patients to train/val by a seeded permutation.

    |train| = round(train_fraction * n_patients), half away from zero.  All
    of a patient's reports land on the same side, so no patient leaks
    across the split.
    """
    n = manifest.n_patients
    if n < 2:
        raise ValueError("need at least 2 patients to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n_train = int(math.floor(train_fraction * n + 0.5))
    if n_train == 0 or n_train == n:
        raise ValueError(f"train_fraction {train_fraction} yields an empty split for {n} patients")

    ids = sorted(p.patient_id for p in manifest.patients)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    train_ids = set(order[:n_train])

    assignment = {}
    for patient in manifest.patients:
        split = TRAIN if patient.patient_id in train_ids else VAL
        for report in patient.reports:
            assignment[report.report_id] = split
    return dataclasses.replace(manifest, split_assignment=assignment)


def assign_whole_cohort(manifest: CohortManifest, split: str) -> CohortManifest:
    """Mark every report of a cohort with one split label (e.g. a held-out test cohort)."""
    assignment = {r.report_id: split for _, r in manifest.reports()}
    return dataclasses.replace(manifest, split_assignment=assignment)


# ---------------------------------------------------------------------------
# Synthetic phantom cohorts


@dataclass(frozen=True)
class LesionProfile:
    """Phase-wise appearance of one tumor class on the phantom.

    Intensities are 8-bit display values.  `ring` paints the outer annulus
    of the lesion disk, `core` the interior; `scar` (optional) paints a
    small central region, used for classes defined by a persistent central
    scar.  `core_texture` adds +amplitude to core pixels of odd (x+y)
    parity, a deterministic stand-in for heterogeneous enhancement.
    """

    core: Mapping[PhaseId, float]
    ring: Mapping[PhaseId, float]
    scar: Optional[Mapping[PhaseId, float]] = None
    core_texture: float = 0.0


def _profile(core, ring, scar=None, texture=0.0) -> LesionProfile:
    order = PhaseId.canonical_order()
    return LesionProfile(
        core=dict(zip(order, core)),
        ring=dict(zip(order, ring)),
        scar=None if scar is None else dict(zip(order, scar)),
        core_texture=texture,
    )


# Phase order in every tuple: PC, AP, PVP, DP.
DEFAULT_PROFILES: dict[LeafClass, LesionProfile] = {
    # peripheral ring lights up in AP, fills in centripetally by DP
    LeafClass.HH: _profile(core=(70, 72, 140, 185), ring=(70, 205, 195, 185)),
    # enhancing lesion with a persistent low-intensity central scar
    LeafClass.OBHT: _profile(core=(78, 165, 155, 150), ring=(78, 165, 155, 150),
                             scar=(45, 45, 48, 50)),
    # bright heterogeneous AP core, washed out by DP
    LeafClass.HB: _profile(core=(66, 215, 120, 58), ring=(66, 185, 120, 58), texture=18.0),
    # uniform AP enhancement with strong delayed washout
    LeafClass.OMHT: _profile(core=(72, 192, 100, 42), ring=(72, 192, 100, 42)),
}

RING_INNER_FRACTION = 0.6   # core/ring boundary as a fraction of lesion radius
SCAR_FRACTION = 0.3


@dataclass(frozen=True)
class PhantomSpec:
    """Everything that determines a synthetic cohort, including the seed."""

    counts: Mapping[LeafClass, int]
    image_size: tuple[int, int] = (64, 64)
    noise_sigma: float = 0.0
    lesion_radius_range: tuple[float, float] = (8.0, 13.0)
    slices_per_phase: int = 3
    background: int = 90
    seed: int = 0
    reports_per_patient: int = 1
    profiles: Mapping[LeafClass, LesionProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise ValueError("class counts must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        r_lo, r_hi = self.lesion_radius_range
        if not 0 < r_lo <= r_hi:
            raise ValueError("invalid lesion radius range")
        if 2 * (r_hi + 2) >= min(self.image_size):
            raise ValueError("lesion radius range does not fit the image")
        if self.slices_per_phase < 1 or self.reports_per_patient < 1:
            raise ValueError("slices_per_phase and reports_per_patient must be >= 1")


@dataclass(frozen=True)
class SliceTruth:
    """Generator-side ground truth for one (report, depth) cross-section."""

    disk: np.ndarray            # bool, lesion support
    ring: np.ndarray            # bool, outer annulus
    core: np.ndarray            # bool, interior
    scar: Optional[np.ndarray]  # bool, central scar (profile-dependent)
    box: BoundingBox


@dataclass
class PhantomCohort:
    manifest: CohortManifest
    truth: dict[tuple[str, int], SliceTruth]   # (report_id, k) -> ground truth


def _depth_factor(k: int, K: int) -> float:
    # widest cross-section at the central slice, shrinking toward the ends
    if K == 1:
        return 1.0
    mid = (K + 1) / 2.0
    return 1.0 - 0.3 * abs(k - mid) / (K - mid)


def generate_phantom_cohort(spec: PhantomSpec, out_dir: str | Path) -> PhantomCohort:
    """Write a synthetic cohort (images + manifest.json) under `out_dir`.

    Lesions are disks with class-conditional phase dynamics taken from
    `spec.profiles`; bounding boxes are exact because the generator knows
    the lesion support.  Fully deterministic for a fixed spec.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    H, W = spec.image_size
    K = spec.slices_per_phase
    phases = PhaseId.canonical_order()
    rng = np.random.default_rng(spec.seed)
    ys, xs = np.mgrid[0:H, 0:W]

    patients = []
    truth: dict[tuple[str, int], SliceTruth] = {}
    pid_no = 0
    for cls in LEAF_ORDER:
        profile = spec.profiles[cls]
        for _ in range(int(spec.counts.get(cls, 0))):
            pid_no += 1
            patient_id = f"P{pid_no:04d}"
            age = round(float(rng.uniform(0.3, 14.0)), 1)
            sex = "F" if rng.random() < 0.5 else "M"

            reports = []
            for study in range(1, spec.reports_per_patient + 1):
                report_id = f"{patient_id}-S{study}"
                r_lo, r_hi = spec.lesion_radius_range
                radius = float(rng.uniform(r_lo, r_hi))
                margin = radius + 2.0
                cx = float(rng.uniform(margin, W - margin))
                cy = float(rng.uniform(margin, H - margin))

                entries = []
                for k in range(1, K + 1):
                    r_k = radius * _depth_factor(k, K)
                    dist2 = (xs - cx) ** 2 + (ys - cy) ** 2
                    disk = dist2 <= r_k ** 2
                    core = dist2 <= (RING_INNER_FRACTION * r_k) ** 2
                    ring = disk & ~core
                    scar = dist2 <= (SCAR_FRACTION * r_k) ** 2 if profile.scar else None
                    box = _mask_box(disk)
                    truth[(report_id, k)] = SliceTruth(disk, ring, core, scar, box)

                    for phase in phases:
                        img = np.full((H, W), float(spec.background))
                        img[ring] = profile.ring[phase]
                        img[core] = profile.core[phase]
                        if profile.core_texture:
                            img[core & ((xs + ys) % 2 == 1)] += profile.core_texture
                        if scar is not None:
                            img[scar] = profile.scar[phase]
                        if spec.noise_sigma > 0:
                            img += rng.normal(0.0, spec.noise_sigma, size=(H, W))
                        pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)

                        rel = f"images/{report_id}_{phase.name}_{k}.png"
                        full = out_dir / rel
                        full.parent.mkdir(parents=True, exist_ok=True)
                        Image.fromarray(pixels, mode="L").save(full)
                        entries.append(SliceEntry(phase=phase, k=k, path=rel, box=box))

                # manifest order: canonical phase-major, depth-minor
                entries.sort(key=lambda e: (e.phase.value, e.k))
                reports.append(ReportRecord(report_id, cls, tuple(entries)))
            patients.append(PatientRecord(patient_id, age, sex, tuple(reports)))

    manifest = CohortManifest(root=out_dir, phases=phases, slices_per_phase=K,
                              patients=tuple(patients), image_size=(H, W))
    save_manifest(manifest, out_dir / "manifest.json")
    return PhantomCohort(manifest=manifest, truth=truth)


def _mask_box(mask: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty lesion mask")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
