"""Blending tests: lift/quantize, mixing algebra, lambda law, pair draws."""

import numpy as np
import pytest

from pkcp.core import BoundingBox, LeafClass, PhaseId, one_hot
from pkcp.composites import ExpansionMode, ExpansionPolicy, enumerate_composites
from pkcp.mixup import (
    MixupConfig,
    PairSampler,
    element_rng,
    lift_to_unit,
    mix,
    mix_arrays,
    quantize_u8,
    sample_lambda,
)
from tests.test_composites import make_grid


def make_composite(value, label_cls, report_id="R1", box=None, k=1):
    grid = make_grid(k=k, label=label_cls, report_id=report_id,
                     boxes=None if box is None else {(PhaseId.PC, 1): box})
    policy = ExpansionPolicy.uniform(ExpansionMode.MAJORITY)
    return enumerate_composites(grid, policy)[0]


class TestLiftQuantize:
    def test_lift_range_and_dtype(self):
        arr = np.array([[0, 128, 255]], dtype=np.uint8)
        unit = lift_to_unit(arr)
        assert unit.dtype == np.float64
        assert unit[0].tolist() == [0.0, 128 / 255.0, 1.0]

    def test_lift_rejects_non_uint8(self):
        with pytest.raises(ValueError):
            lift_to_unit(np.zeros((2, 2), dtype=np.float64))

    def test_quantize_round_trip_exact_on_grid(self):
        # every uint8 value survives lift -> quantize
        values = np.arange(256, dtype=np.uint8)
        assert np.array_equal(quantize_u8(lift_to_unit(values)), values)

    def test_quantize_rounds_half_up_and_clips(self):
        assert quantize_u8(np.array([0.5 / 255.0])).tolist() == [1]
        assert quantize_u8(np.array([-0.5])).tolist() == [0]
        assert quantize_u8(np.array([1.5])).tolist() == [255]


class TestMixArrays:
    def test_convex_combination(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        assert mix_arrays(a, b, 0.3).tolist() == pytest.approx([0.3, 0.7])

    def test_endpoints(self):
        a = np.array([0.2, 0.8])
        b = np.array([0.9, 0.1])
        assert mix_arrays(a, b, 1.0).tolist() == a.tolist()
        assert mix_arrays(a, b, 0.0).tolist() == b.tolist()

    def test_rejects_bad_lambda_and_shape(self):
        with pytest.raises(ValueError):
            mix_arrays(np.zeros(2), np.zeros(2), 1.1)
        with pytest.raises(ValueError):
            mix_arrays(np.zeros(2), np.zeros(3), 0.5)


class TestMix:
    def test_pixel_algebra_exact(self):
        a = make_composite(0, LeafClass.HH, "RA")
        b = make_composite(0, LeafClass.OMHT, "RB")
        lam = 0.25
        mixed = mix(a, b, lam)
        expected = lam * lift_to_unit(a.channels) + (1 - lam) * lift_to_unit(b.channels)
        assert np.array_equal(mixed.channels, expected)
        assert mixed.channels.dtype == np.float64

    def test_label_mixing_linear(self):
        a = make_composite(0, LeafClass.HH, "RA")
        b = make_composite(0, LeafClass.HB, "RB")
        mixed = mix(a, b, 0.7)
        expected = 0.7 * one_hot(LeafClass.HH) + 0.3 * one_hot(LeafClass.HB)
        assert mixed.label == pytest.approx(expected, abs=1e-15)
        assert abs(mixed.label.sum() - 1.0) < 1e-12

    def test_box_is_parent_union(self):
        a = make_composite(0, LeafClass.HH, "RA", box=BoundingBox(1, 1, 3, 3))
        b = make_composite(0, LeafClass.HB, "RB", box=BoundingBox(2, 2, 5, 5))
        mixed = mix(a, b, 0.5)
        assert mixed.union_box.as_tuple() == (1, 1, 5, 5)
        assert mixed.parents == ("RA", "RB")

    def test_one_absent_box_passes_through(self):
        a = make_composite(0, LeafClass.HH, "RA", box=BoundingBox(1, 1, 3, 3))
        b = make_composite(0, LeafClass.HB, "RB")
        assert mix(a, b, 0.5).union_box.as_tuple() == (1, 1, 3, 3)
        assert mix(b, b, 0.5).union_box is None

    def test_phase_layouts_must_agree(self):
        from pkcp.composites import restrict_phases
        a = make_composite(0, LeafClass.HH, "RA")
        b = restrict_phases(make_composite(0, LeafClass.HB, "RB"),
                            [PhaseId.PC, PhaseId.AP])
        with pytest.raises(ValueError, match="phase layouts"):
            mix(a, b, 0.5)

    def test_image_before_feature_not_feature_interpolation(self):
        # features of the blend differ from the blend of features for any
        # nonlinear feature; variance is the witness
        rng = np.random.default_rng(3)
        pix_a = rng.integers(0, 256, (1, 6, 6)).astype(np.uint8)
        pix_b = rng.integers(0, 256, (1, 6, 6)).astype(np.uint8)
        lam = 0.5
        blended = lam * lift_to_unit(pix_a) + (1 - lam) * lift_to_unit(pix_b)
        var_of_blend = blended.var()
        blend_of_vars = lam * lift_to_unit(pix_a).var() + (1 - lam) * lift_to_unit(pix_b).var()
        assert var_of_blend != pytest.approx(blend_of_vars, abs=1e-6)


class TestLambdaLaw:
    def test_beta_22_moments_monte_carlo(self):
        rng = np.random.default_rng(12345)
        draws = np.array([sample_lambda(rng, 2.0, 2.0) for _ in range(200_000)])
        # Beta(2,2): mean 1/2, var 1/20
        assert abs(draws.mean() - 0.5) < 0.005
        assert abs(draws.var() - 0.05) < 0.005
        assert draws.min() >= 0.0 and draws.max() <= 1.0

    def test_config_validates_shapes(self):
        MixupConfig(alpha=2.0, beta=2.0)
        with pytest.raises(ValueError):
            MixupConfig(alpha=0.0)
        with pytest.raises(ValueError):
            MixupConfig(beta=-1.0)


class TestElementRng:
    def test_keyed_independence(self):
        a = element_rng(7, 3, 5).random(4)
        b = element_rng(7, 3, 5).random(4)
        assert np.array_equal(a, b)
        c = element_rng(7, 3, 6).random(4)
        d = element_rng(7, 4, 5).random(4)
        e = element_rng(8, 3, 5).random(4)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)
        assert not np.array_equal(a, e)

    def test_batch_composition_invariance(self):
        # element (batch, idx) sees the same stream however many peers it has
        lam_alone = sample_lambda(element_rng(0, 2, 7), 2.0, 2.0)
        for _ in range(3):
            assert sample_lambda(element_rng(0, 2, 7), 2.0, 2.0) == lam_alone


class TestPairSampler:
    def test_first_slot_instance_uniform(self):
        # 3 of class 0, 1 of class 1: first slot hits index 3 w.p. 1/4
        labels = [0, 0, 0, 1]
        sampler = PairSampler(labels)
        rng = np.random.default_rng(0)
        firsts = [sampler.sample_pair(rng)[0] for _ in range(40_000)]
        freq = np.bincount(firsts, minlength=4) / len(firsts)
        assert freq == pytest.approx([0.25] * 4, abs=0.02)

    def test_second_slot_class_balanced(self):
        # rare class occupies the second slot half the time despite 1/4 share
        labels = [0, 0, 0, 1]
        sampler = PairSampler(labels)
        rng = np.random.default_rng(1)
        seconds = [sampler.sample_pair(rng)[1] for _ in range(40_000)]
        rare_rate = np.mean([labels[c] == 1 for c in seconds])
        assert rare_rate == pytest.approx(0.5, abs=0.02)

    def test_second_slot_uniform_within_class(self):
        labels = [0, 0, 1, 1, 1]
        sampler = PairSampler(labels)
        rng = np.random.default_rng(2)
        seconds = [sampler.sample_pair(rng)[1] for _ in range(60_000)]
        freq = np.bincount(seconds, minlength=5) / len(seconds)
        # class 0 members: 1/2 * 1/2 each; class 1 members: 1/2 * 1/3 each
        assert freq == pytest.approx([0.25, 0.25, 1 / 6, 1 / 6, 1 / 6], abs=0.02)

    def test_draw_order_pair_then_lambda(self):
        # the frozen contract: both parent indices drawn before lambda
        sampler = PairSampler([0, 0, 1, 1])
        rng = np.random.default_rng(9)
        i, c = sampler.sample_pair(rng)
        lam = sample_lambda(rng, 2.0, 2.0)
        rng2 = np.random.default_rng(9)
        i2 = int(rng2.integers(4))
        cls = int(rng2.integers(2))
        members = [0, 1] if cls == 0 else [2, 3]
        c2 = members[int(rng2.integers(2))]
        lam2 = float(rng2.beta(2.0, 2.0))
        assert (i, c, lam) == (i2, c2, lam2)

    def test_empty_pool_rejected(self):
        with pytest.raises(ValueError):
            PairSampler([])
