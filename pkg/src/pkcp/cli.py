"""Command-line entry points.

Subcommands: phantom (synthetic cohort), enumerate (composite export),
train, predict, run (experiment), ablate (comparison suite), report
(print stored metrics).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics as M
from .classifier import load_checkpoint, save_checkpoint
from .cohort import (
    ManifestError,
    PhantomSpec,
    generate_phantom_cohort,
    load_grids,
    load_manifest,
    split_by_patient,
)
from .composites import (
    DEFAULT_POLICY,
    ExpansionMode,
    ExpansionPolicy,
    enumerate_composites,
    restrict_grid,
)
from .core import LEAF_ORDER, LeafClass
from .harness import (
    ConfigError,
    load_experiment_config,
    build_and_train,
    run_ablation_suite,
    run_experiment,
)
from .ioutil import atomic_write_bytes, atomic_write_text, canonical_json
from .pipeline import SingleModel, evaluation_composites, model_from_checkpoint

_POLICIES = {
    "default": ExpansionPolicy(dict(DEFAULT_POLICY)),
    "all-minority": ExpansionPolicy.uniform(ExpansionMode.MINORITY),
    "all-majority": ExpansionPolicy.uniform(ExpansionMode.MAJORITY),
}


def _parse_counts(text: str) -> dict[LeafClass, int]:
    counts = {}
    for part in text.split(","):
        if "=" not in part:
            raise ValueError(f"bad counts entry {part!r}; expected CLASS=N")
        name, _, value = part.partition("=")
        counts[LeafClass.from_name(name.strip())] = int(value)
    return counts


def _parse_size(text: str) -> tuple[int, int]:
    h, _, w = text.partition("x")
    return int(h), int(w)


def cmd_phantom(args) -> int:
    extra = {}
    if args.radius is not None:
        lo, _, hi = args.radius.partition(",")
        extra["lesion_radius_range"] = (float(lo), float(hi))
    spec = PhantomSpec(
        counts=_parse_counts(args.counts),
        image_size=_parse_size(args.size),
        noise_sigma=args.noise,
        seed=args.seed,
        **extra,
    )
    cohort = generate_phantom_cohort(spec, args.out)
    print(f"wrote {cohort.manifest.n_reports} reports "
          f"({cohort.manifest.n_slices} slices) to {args.out}")
    return 0


def cmd_enumerate(args) -> int:
    manifest = load_manifest(args.manifest)
    grids = load_grids(manifest)
    policy = _POLICIES[args.policy]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    blob = bytearray()
    entries = []
    shape = None
    for rid in sorted(grids):
        for comp in enumerate_composites(grids[rid], policy):
            if shape is None:
                shape = comp.channels.shape
            elif comp.channels.shape != shape:
                raise ValueError("composites disagree in shape")
            entries.append({
                "report_id": comp.report_id,
                "source_indices": list(comp.source_indices),
                "union_box": list(comp.union_box.as_tuple()) if comp.union_box else None,
                "label": [float(v) for v in comp.label],
                "offset": len(blob),
            })
            blob += comp.channels.tobytes()
    atomic_write_bytes(out_dir / "composites.u8", bytes(blob))
    index = {"dtype": "uint8", "shape": list(shape) if shape else [],
             "entries": entries}
    atomic_write_text(out_dir / "index.json", canonical_json(index) + "\n")
    print(f"wrote {len(entries)} composites to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    if cfg.task == "detection_eval":
        raise ConfigError("detection_eval has no model to train")
    manifest = load_manifest(_resolve_against(cfg, cfg.data.manifest))
    manifest = split_by_patient(manifest, cfg.data.train_fraction, cfg.data.split_seed)
    grids = load_grids(manifest)
    seed = cfg.seeds[0]
    _, ckpt = build_and_train(cfg, seed, manifest, grids)
    save_checkpoint(ckpt, args.out)
    print(f"trained {cfg.task} (seed {seed}); checkpoint at {args.out}")
    return 0


def _resolve_against(cfg, path: str) -> Path:
    p = Path(path)
    if p.is_absolute() or cfg.config_dir is None:
        return p
    return cfg.config_dir / p


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.model)
    model = model_from_checkpoint(ckpt)
    manifest = load_manifest(args.manifest)
    grids = load_grids(manifest)
    truths = {r.report_id: r.class_label for _, r in manifest.reports()}

    rows = []
    for rid in sorted(grids):
        comps = evaluation_composites(restrict_grid(grids[rid], ckpt.phases))
        if isinstance(model, SingleModel):
            probs = model.predict_study(comps).probs
            names = model.classes
        else:
            probs = model.predict_study(comps).composed_probs
            names = tuple(c.name for c in LEAF_ORDER)
        rows.append(M.ClassificationRow(
            report_id=rid, task=ckpt.task,
            probs={n: float(p) for n, p in zip(names, probs)},
            truth=truths[rid].name))
    M.save_classification_predictions(rows, args.out)
    print(f"wrote {len(rows)} study predictions to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = load_experiment_config(args.config)
    result = run_experiment(cfg)
    print(f"experiment {cfg.name!r} ({result.config_hash[:12]}) -> {result.out_dir}")
    for row in result.summary:
        point = "absent" if row.point is None else f"{row.point:.4f}"
        print(f"  {row.metric}: {point}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_experiment_config(args.config)
    result = run_ablation_suite(cfg, args.axis)
    print(f"ablation axis {args.axis!r} -> {result.out_dir}")
    for name, _ in result.runs:
        print(f"  variant {name}")
    return 0


def cmd_report(args) -> int:
    in_dir = Path(args.in_dir)
    candidates = [in_dir / "summary" / "metrics.json", in_dir / "comparison.json",
                  in_dir / "metrics.json"]
    found = next((p for p in candidates if p.is_file()), None)
    if found is None:
        raise FileNotFoundError(f"no metrics files under {in_dir}")
    with open(found, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if args.format == "json":
        print(canonical_json(doc))
        return 0
    keys = sorted({k for row in doc for k in row})
    print(",".join(keys))
    for row in doc:
        print(",".join("" if row.get(k) is None else str(row.get(k)) for k in keys))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pkcp",
        description="Multi-phase composite augmentation and two-stage diagnosis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic lesion cohort")
    p.add_argument("--out", required=True, help="output cohort directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--counts", required=True,
                   help="per-class patient counts, e.g. HH=10,OBHT=3,HB=6,OMHT=2")
    p.add_argument("--size", default="64x64", help="image size HxW")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sigma")
    p.add_argument("--radius", default=None,
                   help="lesion radius range LO,HI (default 8,13)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("enumerate", help="export composites as raw tensors + index")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", choices=sorted(_POLICIES), default="default")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("train", help="train one model from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="study-level predictions from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run an ablation axis over a base config")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=("phases", "aug", "steps"), required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="print stored metrics")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
