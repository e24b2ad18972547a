"""Harness tests: configs, traditional augmentation, pools, runs, ablations."""

import dataclasses
import json

import numpy as np
import pytest

from pkcp.classifier import Hyperparams
from pkcp.cohort import PhantomSpec, generate_phantom_cohort
from pkcp.composites import ExpansionMode
from pkcp.core import BoundingBox, LeafClass, PhaseId
from pkcp.harness import (
    AUG_CONFIGS,
    AXES,
    ConfigError,
    DataSpec,
    ExperimentConfig,
    TraditionalAugConfig,
    ablation_variants,
    aggregate_metrics,
    apply_traditional_aug,
    config_hash,
    default_phase_subset,
    flip_box,
    load_experiment_config,
    normalized_config_dict,
    parse_config,
    random_three_phase_subset,
    rotate_box,
    rotate_channels,
    run_ablation_suite,
    run_experiment,
    subset_code,
    training_pool,
    validate_config,
)
from pkcp.cohort import load_grids, split_by_patient
from pkcp.metrics import load_metrics_report
from tests.test_pipeline import make_pool


def minimal_doc(**overrides):
    doc = {
        "name": "exp",
        "task": "two_step",
        "aug_config": "pkcp_no_aug",
        "data": {"manifest": "cohort/manifest.json"},
        "seeds": [0],
        "outputs": "runs/exp",
    }
    doc.update(overrides)
    return doc


class TestConfigParsing:
    def test_defaults_applied(self):
        cfg = parse_config(minimal_doc())
        assert cfg.task == "two_step"
        assert cfg.phase_subset == PhaseId.canonical_order()
        assert cfg.hyperparams == Hyperparams()
        assert cfg.mixup.enabled is False        # not the mixup config
        assert cfg.data.train_fraction == 0.7
        assert cfg.mask_margin == 2 and cfg.apply_mask is True

    def test_mixup_enabled_by_default_for_mixup_config(self):
        cfg = parse_config(minimal_doc(aug_config="pkcp_mixup"))
        assert cfg.mixup.enabled is True

    def test_single_phase_default_subset(self):
        cfg = parse_config(minimal_doc(aug_config="single_phase_single_slice"))
        assert cfg.phase_subset == (PhaseId.AP,)
        doc = minimal_doc(aug_config="single_phase_single_slice",
                          options={"single_phase": "PVP"})
        assert parse_config(doc).phase_subset == (PhaseId.PVP,)

    def test_three_phase_default_subset_seeded(self):
        a = parse_config(minimal_doc(aug_config="three_phase_pkcp"))
        b = parse_config(minimal_doc(aug_config="three_phase_pkcp"))
        assert a.phase_subset == b.phase_subset
        assert len(a.phase_subset) == 3
        # a different base seed may draw a different subset
        docs = [minimal_doc(aug_config="three_phase_pkcp",
                            hyperparams={"seed": s}) for s in range(8)]
        subsets = {parse_config(d).phase_subset for d in docs}
        assert len(subsets) > 1

    def test_explicit_subset_overrides_draw(self):
        doc = minimal_doc(aug_config="three_phase_pkcp",
                          phase_subset=["DP", "PC", "AP"])
        cfg = parse_config(doc)
        assert cfg.phase_subset == (PhaseId.PC, PhaseId.AP, PhaseId.DP)

    def test_unknown_top_key_rejected(self):
        with pytest.raises(ConfigError, match="typo_key"):
            parse_config(minimal_doc(typo_key=1))

    def test_unknown_nested_key_rejected(self):
        doc = minimal_doc(hyperparams={"learning_rate": 0.1, "lr": 0.1})
        with pytest.raises(ConfigError, match=r"\[hyperparams\].*lr"):
            parse_config(doc)

    def test_missing_manifest_rejected(self):
        doc = minimal_doc()
        del doc["data"]
        with pytest.raises(ConfigError, match="manifest"):
            parse_config(doc)

    def test_unknown_task_and_aug(self):
        with pytest.raises(ConfigError, match="unknown task"):
            parse_config(minimal_doc(task="triage"))
        with pytest.raises(ConfigError, match="unknown aug_config"):
            parse_config(minimal_doc(aug_config="cutmix"))

    def test_unknown_classifier_rejected(self):
        with pytest.raises(ConfigError, match="classifier"):
            parse_config(minimal_doc(classifier="resnet18"))

    def test_subset_constraints(self):
        doc = minimal_doc(aug_config="single_phase_single_slice",
                          phase_subset=["AP", "PVP"])
        with pytest.raises(ConfigError, match="exactly one phase"):
            parse_config(doc)
        doc = minimal_doc(aug_config="three_phase_pkcp",
                          phase_subset=["AP", "PVP", "DP", "PC"])
        with pytest.raises(ConfigError, match="exactly three"):
            parse_config(doc)

    def test_detection_needs_predictions_file(self):
        with pytest.raises(ConfigError, match="detections"):
            parse_config(minimal_doc(task="detection_eval"))

    def test_mixup_config_cannot_disable_mixup(self):
        doc = minimal_doc(aug_config="pkcp_mixup", mixup={"enabled": False})
        with pytest.raises(ConfigError, match="mixup.enabled"):
            parse_config(doc)

    def test_canonical_order_enforced(self):
        cfg = parse_config(minimal_doc())
        bad = dataclasses.replace(cfg, phase_subset=(PhaseId.AP, PhaseId.PC,
                                                     PhaseId.PVP, PhaseId.DP))
        with pytest.raises(ConfigError, match="canonical order"):
            validate_config(bad)

    def test_toml_round_trip(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text(
            'name = "exp"\n'
            'task = "two_step"\n'
            'aug_config = "pkcp_mixup"\n'
            'seeds = [0, 1]\n'
            'outputs = "runs/exp"\n'
            '[data]\n'
            'manifest = "cohort/manifest.json"\n'
            '[hyperparams]\n'
            'learning_rate = 0.05\n'
            '[mixup]\n'
            'alpha = 2.0\n')
        cfg = load_experiment_config(path)
        assert cfg.name == "exp"
        assert cfg.seeds == (0, 1)
        assert cfg.hyperparams.learning_rate == 0.05
        assert cfg.config_dir == tmp_path

    def test_toml_errors_become_config_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(tmp_path / "absent.toml")
        bad = tmp_path / "bad.toml"
        bad.write_text("name = [unclosed\n")
        with pytest.raises(ConfigError):
            load_experiment_config(bad)


class TestConfigHash:
    def test_stable_and_sensitive(self):
        a = parse_config(minimal_doc())
        b = parse_config(minimal_doc())
        c = parse_config(minimal_doc(seeds=[1]))
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)

    def test_config_dir_not_hashed(self, tmp_path):
        a = parse_config(minimal_doc(), config_dir=tmp_path)
        b = parse_config(minimal_doc(), config_dir=None)
        assert config_hash(a) == config_hash(b)

    def test_normalized_dict_includes_resolved_subset(self):
        cfg = parse_config(minimal_doc(aug_config="three_phase_pkcp"))
        doc = normalized_config_dict(cfg)
        assert len(doc["phase_subset"]) == 3


class TestSubsetHelpers:
    def test_subset_code(self):
        assert subset_code(PhaseId.canonical_order()) == "PAVD"
        assert subset_code((PhaseId.DP, PhaseId.PC)) == "PD"

    def test_random_subset_properties(self):
        for seed in range(10):
            subset = random_three_phase_subset(seed)
            assert len(subset) == 3
            assert subset == tuple(sorted(subset))
            assert random_three_phase_subset(seed) == subset

    def test_default_subset_full_for_four_phase(self):
        for aug in ("four_phase_pkcp_all_majority", "pkcp_no_aug",
                    "pkcp_traditional_aug", "pkcp_mixup"):
            assert default_phase_subset(aug, PhaseId.AP) == PhaseId.canonical_order()


class TestTraditionalAug:
    def test_flip_box_example(self):
        # box (1,0,3,2) in a width-10 frame lands at (7,0,9,2)
        assert flip_box(BoundingBox(1, 0, 3, 2), 10).as_tuple() == (7, 0, 9, 2)

    def test_flip_box_involution(self):
        box = BoundingBox(2, 3, 6, 9)
        assert flip_box(flip_box(box, 12), 12) == box

    def test_rotate_channels_zero_is_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (2, 9, 9)).astype(np.uint8)
        assert np.array_equal(rotate_channels(img, 0.0), img)

    def test_rotate_center_pixel_fixed(self):
        img = np.zeros((1, 9, 9), dtype=np.uint8)
        img[0, 4, 4] = 200
        out = rotate_channels(img, 13.0)
        assert out[0, 4, 4] == 200

    def test_rotation_inverse_pair_mostly_restores(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (1, 33, 33)).astype(np.uint8)
        back = rotate_channels(rotate_channels(img, 90.0), -90.0)
        # 90-degree nearest-neighbor rotation is exact on the interior
        assert np.array_equal(back, img)

    def test_rotate_box_zero_identity_and_clip(self):
        box = BoundingBox(1, 1, 5, 5)
        assert rotate_box(box, 0.0, 8, 8) == box
        # near-corner box under a large rotation clips to the frame
        rotated = rotate_box(BoundingBox(0, 0, 4, 4), 45.0, 8, 8)
        assert rotated is not None
        assert rotated.within_image(8, 8)

    def test_rotate_box_covers_rotated_pixels(self):
        # lesion support after rotation stays inside the rotated box
        img = np.zeros((1, 21, 21), dtype=np.uint8)
        img[0, 8:13, 6:11] = 255
        box = BoundingBox(6, 8, 11, 13)
        for angle in (-15.0, -7.0, 7.0, 15.0):
            out = rotate_channels(img, angle)
            rbox = rotate_box(box, angle, 21, 21)
            ys, xs = np.nonzero(out[0])
            assert rbox.x_min <= xs.min() and xs.max() < rbox.x_max
            assert rbox.y_min <= ys.min() and ys.max() < rbox.y_max

    def test_rotate_box_out_of_frame_is_none(self):
        # a box at the far edge of a wide strip rotates out of the frame
        box = BoundingBox(90, 0, 100, 10)
        assert rotate_box(box, 45.0, 10, 100) is None

    def test_apply_deterministic_and_draw_order(self):
        comp = make_pool([LeafClass.HH])[0]
        cfg = TraditionalAugConfig(rotation_degrees=15.0, flip_probability=0.5)
        out1 = apply_traditional_aug(comp, cfg, np.random.default_rng(42))
        out2 = apply_traditional_aug(comp, cfg, np.random.default_rng(42))
        assert np.array_equal(out1.channels, out2.channels)
        assert out1.union_box == out2.union_box
        # frozen order: flip decision first, then the angle
        rng = np.random.default_rng(42)
        do_flip = bool(rng.random() < 0.5)
        angle = float(rng.uniform(-15.0, 15.0))
        channels = comp.channels[:, :, ::-1] if do_flip else comp.channels
        expected = rotate_channels(channels, angle)
        assert np.array_equal(out1.channels, expected)

    def test_flip_only(self):
        comp = make_pool([LeafClass.HH])[0]
        cfg = TraditionalAugConfig(rotation_degrees=0.0, flip_probability=1.0)
        out = apply_traditional_aug(comp, cfg, np.random.default_rng(0))
        assert np.array_equal(out.channels, comp.channels[:, :, ::-1])
        assert out.union_box == flip_box(comp.union_box, comp.channels.shape[2])
        assert np.array_equal(out.label, comp.label)
        assert out.report_id == comp.report_id

    def test_invalid_settings_rejected(self):
        with pytest.raises(ConfigError):
            TraditionalAugConfig(rotation_degrees=-1.0)
        with pytest.raises(ConfigError):
            TraditionalAugConfig(flip_probability=1.5)


@pytest.fixture(scope="module")
def tiny_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("harness_cohort")
    spec = PhantomSpec(
        counts={LeafClass.HH: 3, LeafClass.OBHT: 2,
                LeafClass.HB: 3, LeafClass.OMHT: 2},
        image_size=(24, 24), noise_sigma=2.0, seed=31,
        lesion_radius_range=(6.0, 8.0))
    cohort = generate_phantom_cohort(spec, out)
    return out, cohort


class TestPools:
    def test_training_pool_counts_by_policy(self, tiny_cohort):
        _, cohort = tiny_cohort
        grids = load_grids(cohort.manifest)
        rids = sorted(grids)
        full = PhaseId.canonical_order()
        n_min = sum(1 for r in rids
                    if grids[r].class_label in (LeafClass.OBHT, LeafClass.OMHT))
        n_maj = len(rids) - n_min
        pool = training_pool(grids, rids, full, "pkcp_no_aug")
        assert len(pool) == n_min * 81 + n_maj * 3
        pool = training_pool(grids, rids, full, "four_phase_pkcp_all_majority")
        assert len(pool) == len(rids) * 3
        sub = (PhaseId.AP,)
        pool = training_pool(grids, rids, sub, "single_phase_single_slice")
        assert len(pool) == len(rids) * 3
        assert all(c.channels.shape[0] == 1 for c in pool)
        three = (PhaseId.AP, PhaseId.PVP, PhaseId.DP)
        pool = training_pool(grids, rids, three, "three_phase_pkcp")
        assert len(pool) == n_min * 27 + n_maj * 3

    def test_pool_order_by_report_id(self, tiny_cohort):
        _, cohort = tiny_cohort
        grids = load_grids(cohort.manifest)
        pool = training_pool(grids, sorted(grids), PhaseId.canonical_order(),
                             "four_phase_pkcp_all_majority")
        rids = [c.report_id for c in pool]
        assert rids == sorted(rids)


class TestAggregation:
    def test_mean_and_interval(self):
        per_seed = [{"auc": 0.90}, {"auc": 0.94}, {"auc": 0.92}]
        rows = aggregate_metrics(per_seed)
        row = next(r for r in rows if r.metric == "auc")
        from pkcp.metrics import mean_sem, t_confidence_interval
        mean, sem = mean_sem([0.90, 0.94, 0.92])
        ci = t_confidence_interval(mean, sem, 3)
        assert row.point == pytest.approx(mean, abs=1e-15)
        assert row.ci_lower == pytest.approx(ci.lower, abs=1e-12)
        assert row.ci_upper == pytest.approx(ci.upper, abs=1e-12)
        assert row.n == 3

    def test_absent_values_excluded(self):
        per_seed = [{"recall_OMHT": None}, {"recall_OMHT": 1.0}, {"recall_OMHT": 0.5}]
        row = aggregate_metrics(per_seed)[0]
        assert row.n == 2
        assert row.point == pytest.approx(0.75, abs=1e-15)

    def test_single_seed_no_interval(self):
        row = aggregate_metrics([{"auc": 0.9}])[0]
        assert row.point == 0.9
        assert row.ci_lower is None and row.ci_upper is None
        assert row.n == 1

    def test_all_absent(self):
        row = aggregate_metrics([{"x": None}, {"x": None}])[0]
        assert row.point is None and row.n == 0


FAST_HP = {"learning_rate": 0.05, "max_epochs": 15, "patience": 5,
           "batch_size": 64, "seed": 0}


def experiment_doc(manifest_path, out_dir, **overrides):
    doc = {
        "name": "harness-test",
        "task": "two_step",
        "aug_config": "pkcp_no_aug",
        "data": {"manifest": str(manifest_path), "split_seed": 3},
        "seeds": [0, 1],
        "outputs": str(out_dir),
        "hyperparams": dict(FAST_HP),
    }
    doc.update(overrides)
    return doc


class TestRunExperiment:
    def test_artifact_layout_and_aggregation(self, tiny_cohort, tmp_path):
        root, _ = tiny_cohort
        cfg = parse_config(experiment_doc(root / "manifest.json", tmp_path / "run"))
        result = run_experiment(cfg)
        for seed in (0, 1):
            cell = tmp_path / "run" / f"seed_{seed}"
            assert (cell / "model.bin").is_file()
            assert (cell / "predictions.json").is_file()
            assert (cell / "metrics.json").is_file()
            assert (cell / "metrics.csv").is_file()
            assert (cell / "roc.csv").is_file()
        summary = load_metrics_report(tmp_path / "run" / "summary" / "metrics.json")
        by_name = {r.metric: r for r in summary}
        assert by_name["accuracy"].n == 2
        assert (tmp_path / "run" / "run_manifest.json").is_file()
        manifest_doc = json.loads((tmp_path / "run" / "run_manifest.json").read_text())
        assert manifest_doc["config_hash"] == result.config_hash
        assert manifest_doc["artifacts"]["seeds"] == {"0": "seed_0", "1": "seed_1"}

    def test_predictions_cover_val_reports(self, tiny_cohort, tmp_path):
        root, cohort = tiny_cohort
        cfg = parse_config(experiment_doc(root / "manifest.json", tmp_path / "run",
                                          seeds=[0]))
        run_experiment(cfg)
        rows = json.loads((tmp_path / "run" / "seed_0" / "predictions.json").read_text())
        manifest = split_by_patient(cohort.manifest, 0.7, 3)
        val_ids = sorted(r.report_id for _, r in manifest.reports_in_split("val"))
        assert [r["report_id"] for r in rows] == val_ids
        for row in rows:
            assert abs(sum(row["probs"].values()) - 1.0) < 1e-9

    def test_determinism_across_reruns(self, tiny_cohort, tmp_path):
        root, _ = tiny_cohort
        cfg_a = parse_config(experiment_doc(root / "manifest.json", tmp_path / "a",
                                            seeds=[0], aug_config="pkcp_mixup"))
        cfg_b = parse_config(experiment_doc(root / "manifest.json", tmp_path / "b",
                                            seeds=[0], aug_config="pkcp_mixup"))
        run_experiment(cfg_a)
        run_experiment(cfg_b)
        for name in ("model.bin", "predictions.json", "metrics.json", "metrics.csv"):
            assert ((tmp_path / "a" / "seed_0" / name).read_bytes()
                    == (tmp_path / "b" / "seed_0" / name).read_bytes()), name

    def test_failure_names_experiment(self, tmp_path):
        cfg = parse_config(experiment_doc(tmp_path / "absent" / "manifest.json",
                                          tmp_path / "run", name="doomed"))
        with pytest.raises(RuntimeError, match="doomed"):
            run_experiment(cfg)

    def test_binary_task_run(self, tiny_cohort, tmp_path):
        root, _ = tiny_cohort
        cfg = parse_config(experiment_doc(root / "manifest.json", tmp_path / "run",
                                          task="benign_vs_malignant", seeds=[0]))
        result = run_experiment(cfg)
        values = result.per_seed[0].metrics
        assert "auc" in values and "specificity" in values

    def test_subtype_task_filters_reports(self, tiny_cohort, tmp_path):
        root, cohort = tiny_cohort
        cfg = parse_config(experiment_doc(root / "manifest.json", tmp_path / "run",
                                          task="benign_subtype", seeds=[0]))
        run_experiment(cfg)
        rows = json.loads((tmp_path / "run" / "seed_0" / "predictions.json").read_text())
        manifest = split_by_patient(cohort.manifest, 0.7, 3)
        for row in rows:
            assert row["truth"] in ("HH", "OBHT")


class TestDetectionEval:
    def test_single_cell_layout(self, tmp_path):
        detections = [
            {"image_id": "a", "boxes": [[0, 0, 10, 10, 0.9]],
             "gt": [[0, 0, 10, 10]]},
            {"image_id": "b", "boxes": [[50, 50, 60, 60, 0.8]],
             "gt": [[0, 0, 10, 10]]},
        ]
        det_path = tmp_path / "detections.json"
        det_path.write_text(json.dumps(detections))
        doc = {
            "name": "det",
            "task": "detection_eval",
            "aug_config": "pkcp_no_aug",
            "data": {"manifest": "unused.json", "detections": str(det_path)},
            "seeds": [0],
            "outputs": str(tmp_path / "run"),
        }
        result = run_experiment(parse_config(doc))
        # one evaluation cell, no per-seed directories
        assert not (tmp_path / "run" / "seed_0").exists()
        rows = load_metrics_report(tmp_path / "run" / "metrics.json")
        by_name = {r.metric: r for r in rows}
        # pooled flags [TP, FP] over 2 gt: AP = 0.5
        assert by_name["ap"].point == pytest.approx(0.5, abs=1e-12)
        assert result.per_seed[0].metrics["recall"] == pytest.approx(0.5, abs=1e-12)


class TestAblations:
    def test_axes_and_variant_shapes(self):
        base = parse_config(minimal_doc(hyperparams=dict(FAST_HP)))
        aug = ablation_variants(base, "aug")
        assert [name for name, _ in aug] == list(AUG_CONFIGS)
        assert all(cfg.name == f"exp-{name}" for name, cfg in aug)
        phases = ablation_variants(base, "phases")
        assert [name for name, _ in phases] == ["PAVD", "AVD", "PVD", "PAD", "PAV"]
        assert phases[1][1].phase_subset == (PhaseId.AP, PhaseId.PVP, PhaseId.DP)
        steps = ablation_variants(base, "steps")
        assert [name for name, _ in steps] == ["one_step", "two_step"]

    def test_aug_axis_fixes_subsets(self):
        base = parse_config(minimal_doc(hyperparams=dict(FAST_HP)))
        variants = dict(ablation_variants(base, "aug"))
        assert len(variants["single_phase_single_slice"].phase_subset) == 1
        assert len(variants["three_phase_pkcp"].phase_subset) == 3
        assert variants["pkcp_mixup"].mixup.enabled is True

    def test_unknown_axis(self):
        base = parse_config(minimal_doc())
        with pytest.raises(ConfigError, match="axis"):
            ablation_variants(base, "dropout")

    def test_steps_suite_end_to_end(self, tiny_cohort, tmp_path):
        root, _ = tiny_cohort
        base = parse_config(experiment_doc(root / "manifest.json",
                                           tmp_path / "suite", seeds=[0]))
        result = run_ablation_suite(base, "steps")
        suite_dir = tmp_path / "suite" / "steps"
        assert (suite_dir / "comparison.json").is_file()
        assert (suite_dir / "comparison.csv").is_file()
        assert (suite_dir / "plot_roc.csv").is_file()
        comparison = json.loads((suite_dir / "comparison.json").read_text())
        variants = {row["variant"] for row in comparison}
        assert variants == {"one_step", "two_step"}
        csv_head = (suite_dir / "comparison.csv").read_text().splitlines()[0]
        assert csv_head == "variant,metric,point,ci_lower,ci_upper,n"
        roc_head = (suite_dir / "plot_roc.csv").read_text().splitlines()[0]
        assert roc_head == "variant,seed,fpr,tpr"
        assert (suite_dir / "one_step" / "summary" / "metrics.json").is_file()
        assert (suite_dir / "two_step" / "summary" / "metrics.json").is_file()
