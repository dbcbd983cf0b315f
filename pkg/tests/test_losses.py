import math

import numpy as np
import pytest

from pyrmask import tensor as T
from pyrmask.errors import ConfigError, DataError, ShapeError
from pyrmask.losses import (UNLABELED, GroundTruthSet, LossConfig,
                            area_downsample, attention_targets,
                            attention_weight_loss, binary_targets_at, ce_loss,
                            decompose_gt, dice_loss, focal_ce_loss, focal_loss,
                            target_entropy, total_loss)
from pyrmask.tensor import Tensor


@pytest.fixture(autouse=True)
def clean_tape():
    T.tape().clear()
    yield
    T.tape().clear()


def rng(seed=0):
    return np.random.default_rng(seed)


def gt_from(present, masks):
    return GroundTruthSet(present=np.asarray(present, dtype=bool),
                          masks=np.asarray(masks, dtype=np.float64))


def full_mask_gt(k_present, n_categories, h, w):
    present = np.zeros(n_categories, dtype=bool)
    masks = np.zeros((n_categories, h, w))
    present[k_present] = True
    masks[k_present] = 1.0
    return gt_from(present, masks)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.lambda_focal == 20.0
        assert cfg.lambda_dice == 1.0
        assert cfg.lambda_attn == 0.1
        assert cfg.alpha == 0.25 and cfg.gamma == 2.0
        assert cfg.null_weight == 0.1
        assert cfg.attn_detach_fraction == 0.75

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossConfig(lambda_dice=-1.0)

    def test_detach_fraction_bounds(self):
        with pytest.raises(ConfigError):
            LossConfig(attn_detach_fraction=0.0)
        with pytest.raises(ConfigError):
            LossConfig(attn_detach_fraction=1.5)
        LossConfig(attn_detach_fraction=1.0)


class TestDecomposeGt:
    def test_slots_follow_categories(self):
        label = np.zeros((4, 4), dtype=np.int64)
        label[0, :] = 2
        label[3, :] = 5
        gt = decompose_gt(label, 8)
        assert list(gt.present_indices()) == [0, 2, 5]
        assert gt.masks[2].sum() == 4
        assert gt.masks[3].sum() == 0

    def test_round_trip_reconstruction(self):
        label = rng(1).integers(0, 6, size=(16, 16))
        label[0, 0] = UNLABELED
        gt = decompose_gt(label, 6)
        rebuilt = np.full_like(label, UNLABELED)
        for k in gt.present_indices():
            rebuilt[gt.masks[k] > 0] = k
        labeled = label != UNLABELED
        assert np.array_equal(rebuilt[labeled], label[labeled])
        assert rebuilt[0, 0] == UNLABELED

    def test_all_unlabeled_gives_all_absent(self):
        gt = decompose_gt(np.full((4, 4), UNLABELED), 3)
        assert not gt.present.any()
        assert gt.masks.sum() == 0

    def test_out_of_range_label_rejected(self):
        with pytest.raises(DataError):
            decompose_gt(np.array([[0, 7]]), 4)

    def test_masks_are_disjoint(self):
        gt = decompose_gt(rng(2).integers(0, 4, size=(8, 8)), 4)
        assert np.array_equal(gt.masks.sum(axis=0), np.ones((8, 8)))


class TestDownsampling:
    def test_area_downsample_averages_cells(self):
        x = np.arange(16.0).reshape(4, 4)
        out = area_downsample(x, 2)
        np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]], atol=0)

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            area_downsample(np.zeros((6, 6)), 4)

    def test_binary_targets_rebinarize_at_positive(self):
        # a single hot pixel survives pooling as a full 1 in its cell
        masks = np.zeros((1, 8, 8))
        masks[0, 3, 5] = 1.0
        gt = gt_from([True], masks)
        t = binary_targets_at(gt, 4, 4)
        assert t.shape == (1, 4, 4)
        assert t[0, 1, 2] == 1.0
        assert t.sum() == 1.0


class TestFocalLoss:
    def test_hand_value_half_probability(self):
        # p = 0.5 on a target-1 pixel: 0.25 * 0.25 * ln 2
        gt = full_mask_gt([0], 1, 4, 4)
        loss = focal_loss(Tensor(np.zeros((1, 4, 4))), gt, 0.25, 2.0)
        np.testing.assert_allclose(loss.item(), 0.25 * 0.25 * math.log(2.0),
                                   atol=1e-12)

    def test_confident_correct_prediction_vanishes(self):
        gt = full_mask_gt([0], 1, 4, 4)
        loss = focal_loss(Tensor(np.full((1, 4, 4), 40.0)), gt, 0.25, 2.0)
        assert 0.0 <= loss.item() < 1e-12

    def test_absent_slots_never_touched(self):
        gt = full_mask_gt([0], 2, 4, 4)
        logits = Tensor(rng(1).normal(size=(2, 4, 4)), requires_grad=True)
        with T.fresh_tape():
            T.backward(focal_loss(logits, gt, 0.25, 2.0))
        assert np.abs(logits.grad[0]).max() > 0
        assert np.array_equal(logits.grad[1], np.zeros((4, 4)))

    def test_no_present_categories_warns_and_returns_zero(self):
        gt = gt_from([False], np.zeros((1, 4, 4)))
        with pytest.warns(UserWarning):
            loss = focal_loss(Tensor(np.zeros((1, 4, 4))), gt, 0.25, 2.0)
        assert loss.item() == 0.0

    def test_huge_logits_stay_finite(self):
        gt = full_mask_gt([0], 1, 4, 4)
        for sign in (1.0, -1.0):
            loss = focal_loss(Tensor(np.full((1, 4, 4), sign * 1e4)), gt,
                              0.25, 2.0)
            assert math.isfinite(loss.item())


class TestDiceLoss:
    def test_perfect_match_is_zero(self):
        masks = np.zeros((1, 8, 8))
        masks[0, 2:6, 2:6] = 1.0
        gt = gt_from([True], masks)
        loss = dice_loss(Tensor(masks.copy()), gt)
        assert loss.item() == 0.0

    def test_disjoint_hand_value(self):
        # areas 100 each, no overlap: 1 - (0 + 1) / (100 + 100 + 1)
        m = np.zeros((1, 16, 16))
        t = np.zeros((1, 16, 16))
        m[0].reshape(-1)[:100] = 1.0
        t[0].reshape(-1)[100:200] = 1.0
        gt = gt_from([True], t)
        loss = dice_loss(Tensor(m), gt)
        np.testing.assert_allclose(loss.item(), 1.0 - 1.0 / 201.0, atol=1e-12)

    def test_absent_slot_gets_no_gradient(self):
        gt = full_mask_gt([1], 2, 4, 4)
        probs = Tensor(rng(3).uniform(0.01, 0.99, size=(2, 4, 4)),
                       requires_grad=True)
        with T.fresh_tape():
            T.backward(dice_loss(probs, gt))
        assert np.array_equal(probs.grad[0], np.zeros((4, 4)))
        assert np.abs(probs.grad[1]).max() > 0


class TestCeLoss:
    def test_symmetric_logits_present(self):
        gt = full_mask_gt([0], 1, 2, 2)
        loss = ce_loss(Tensor(np.zeros((1, 2))), gt)
        np.testing.assert_allclose(loss.item(), math.log(2.0), atol=1e-12)

    def test_symmetric_logits_absent_scaled_by_null_weight(self):
        gt = gt_from([False], np.zeros((1, 2, 2)))
        loss = ce_loss(Tensor(np.zeros((1, 2))), gt)
        np.testing.assert_allclose(loss.item(), 0.1 * math.log(2.0), atol=1e-12)

    def test_confident_correct_hand_value(self):
        # present logits (10, 0): -log softmax = log(1 + e^-10)
        gt = full_mask_gt([0], 1, 2, 2)
        loss = ce_loss(Tensor(np.array([[10.0, 0.0]])), gt)
        np.testing.assert_allclose(loss.item(), math.log1p(math.exp(-10.0)),
                                   rtol=1e-9)

    def test_mean_over_all_slots(self):
        # two slots, one present one absent, both logits (0, 0)
        gt = full_mask_gt([0], 2, 2, 2)
        loss = ce_loss(Tensor(np.zeros((2, 2))), gt)
        want = (math.log(2.0) + 0.1 * math.log(2.0)) / 2.0
        np.testing.assert_allclose(loss.item(), want, atol=1e-12)

    def test_shape_validated(self):
        with pytest.raises(ShapeError):
            ce_loss(Tensor(np.zeros((2, 3))), full_mask_gt([0], 2, 2, 2))


class TestFocalCeLoss:
    def test_present_half_probability_hand_value(self):
        gt = full_mask_gt([0], 1, 2, 2)
        loss = focal_ce_loss({8: Tensor(np.zeros((1, 2)))}, gt, 0.25, 2.0)
        np.testing.assert_allclose(loss.item(), 0.25 * 0.25 * math.log(2.0),
                                   atol=1e-12)

    def test_absent_half_probability_hand_value(self):
        # alpha_t = 0.75 on the not-exist branch
        gt = gt_from([False], np.zeros((1, 2, 2)))
        loss = focal_ce_loss({8: Tensor(np.zeros((1, 2)))}, gt, 0.25, 2.0)
        np.testing.assert_allclose(loss.item(), 0.75 * 0.25 * math.log(2.0),
                                   atol=1e-12)

    def test_confident_present_vanishes(self):
        gt = full_mask_gt([0], 1, 2, 2)
        loss = focal_ce_loss({8: Tensor(np.array([[40.0, 0.0]]))}, gt, 0.25, 2.0)
        assert 0.0 <= loss.item() < 1e-12

    def test_scales_averaged(self):
        gt = full_mask_gt([0], 1, 2, 2)
        per_scale = {8: Tensor(np.zeros((1, 2))), 16: Tensor(np.zeros((1, 2))),
                     32: Tensor(np.array([[40.0, 0.0]]))}
        loss = focal_ce_loss(per_scale, gt, 0.25, 2.0)
        want = 2.0 * (0.25 * 0.25 * math.log(2.0)) / 3.0
        np.testing.assert_allclose(loss.item(), want, atol=1e-12)


class TestAttentionTargets:
    def test_present_target_is_normalized_fractional_mask(self):
        masks = np.zeros((1, 8, 8))
        masks[0, :4, :] = 1.0
        gt = gt_from([True], masks)
        targets, weights = attention_targets(gt, 4, 4)
        np.testing.assert_allclose(targets.sum(axis=1), [1.0], atol=1e-12)
        t = targets[0].reshape(4, 4)
        np.testing.assert_allclose(t[:2], 1.0 / 8.0, atol=1e-12)
        np.testing.assert_allclose(t[2:], 0.0, atol=0)
        assert weights[0] == 1.0

    def test_absent_target_uniform_with_small_weight(self):
        gt = gt_from([False], np.zeros((1, 8, 8)))
        targets, weights = attention_targets(gt, 4, 4)
        np.testing.assert_allclose(targets[0], 1.0 / 16.0, atol=0)
        assert weights[0] == 0.1

    def test_null_weight_zeroed_when_disabled(self):
        gt = gt_from([False, True], [np.zeros((8, 8)), np.ones((8, 8))])
        _, weights = attention_targets(gt, 4, 4, include_null=False)
        assert weights[0] == 0.0 and weights[1] == 1.0


class TestAttentionWeightLoss:
    def test_uniform_everything_gives_log_n(self):
        # full-image mask, uniform weights over 4x4: CE = ln 16, then the
        # 0.1 loss multiplier
        gt = full_mask_gt([0], 1, 16, 16)
        w = Tensor(np.full((1, 4, 4), 1.0 / 16.0))
        loss = attention_weight_loss([{8: w}], gt, LossConfig())
        np.testing.assert_allclose(loss.item(), 0.1 * math.log(16.0), atol=1e-12)

    def test_absent_category_contribution(self):
        # slot 0 present full mask, slot 1 absent: (ln16 + 0.1 ln16) / 2
        gt = full_mask_gt([0], 2, 16, 16)
        w = Tensor(np.full((2, 4, 4), 1.0 / 16.0))
        loss = attention_weight_loss([{8: w}], gt, LossConfig())
        want = 0.1 * (1.1 * math.log(16.0)) / 2.0
        np.testing.assert_allclose(loss.item(), want, atol=1e-12)

    def test_matching_target_hits_entropy_floor(self):
        label = rng(4).integers(0, 3, size=(16, 16))
        gt = decompose_gt(label, 3)
        targets, _ = attention_targets(gt, 4, 4)
        w = Tensor(targets.reshape(3, 4, 4))
        loss = attention_weight_loss([{4: w}], gt, LossConfig(lambda_attn=1.0))
        ent = target_entropy(gt, 4, 4)
        weights = np.where(gt.present, 1.0, 0.1)
        np.testing.assert_allclose(loss.item(), (ent * weights).sum() / 3.0,
                                   atol=1e-9)

    def test_gibbs_inequality_on_random_maps(self):
        label = rng(5).integers(0, 3, size=(16, 16))
        gt = decompose_gt(label, 3)
        ent = target_entropy(gt, 4, 4)
        weights = np.where(gt.present, 1.0, 0.1)
        floor = (ent * weights).sum() / 3.0
        for seed in range(10):
            raw = rng(seed).normal(size=(3, 16))
            w = T.reshape(T.softmax(Tensor(raw), axis=-1), (3, 4, 4))
            loss = attention_weight_loss([{4: w}], gt, LossConfig(lambda_attn=1.0))
            assert loss.item() >= floor - 1e-9

    def test_mean_over_layers_and_scales(self):
        gt = full_mask_gt([0], 1, 16, 16)
        w8 = Tensor(np.full((1, 2, 2), 1.0 / 4.0))
        w16 = Tensor(np.full((1, 1, 1), 1.0))
        layers = [{8: w8, 16: w16}, {8: w8, 16: w16}]
        loss = attention_weight_loss(layers, gt, LossConfig(lambda_attn=1.0))
        want = (math.log(4.0) + 0.0) / 2.0
        np.testing.assert_allclose(loss.item(), want, atol=1e-12)

    def test_empty_layer_list_rejected(self):
        with pytest.raises(ConfigError):
            attention_weight_loss([], full_mask_gt([0], 1, 8, 8), LossConfig())


class TestPermutationInvariance:
    def test_losses_invariant_under_joint_category_permutation(self):
        g = rng(6)
        label = g.integers(0, 4, size=(8, 8))
        gt = decompose_gt(label, 4)
        perm = np.array([3, 1, 0, 2])
        gt_p = GroundTruthSet(present=gt.present[perm], masks=gt.masks[perm])
        mask_logits = g.normal(size=(4, 8, 8))
        prob_logits = g.normal(size=(4, 2))
        a = focal_loss(Tensor(mask_logits), gt, 0.25, 2.0).item()
        b = focal_loss(Tensor(mask_logits[perm]), gt_p, 0.25, 2.0).item()
        np.testing.assert_allclose(a, b, rtol=1e-12)
        a = ce_loss(Tensor(prob_logits), gt).item()
        b = ce_loss(Tensor(prob_logits[perm]), gt_p).item()
        np.testing.assert_allclose(a, b, rtol=1e-12)
        a = dice_loss(T.sigmoid(Tensor(mask_logits)), gt).item()
        b = dice_loss(T.sigmoid(Tensor(mask_logits[perm])), gt_p).item()
        np.testing.assert_allclose(a, b, rtol=1e-12)


def make_bundle(k, h, w, seed):
    # hand-built prediction bundle over leaf tensors, single-scale flavor
    g = rng(seed)
    prob = Tensor(g.normal(size=(k, 2)), requires_grad=True)
    mask = Tensor(g.normal(size=(k, h, w)), requires_grad=True)

    class Bundle:
        prob_logits_per_scale = {8: prob}
        avg_prob_logits = prob
        p = T.reshape(T.narrow(T.softmax(prob, -1), 1, 0, 1), (k,))
        mask_logits_per_scale = {8: mask}
        avg_mask_logits = mask
        m = T.sigmoid(mask)

    return Bundle(), prob, mask


class TestTotalLoss:
    def test_counts_all_supervision_points(self):
        gt = decompose_gt(rng(7).integers(0, 3, size=(8, 8)), 3)
        bundles = []
        for i in range(3):
            b, _, _ = make_bundle(3, 8, 8, seed=10 + i)
            bundles.append(b)
        w = Tensor(np.full((3, 4, 4), 1.0 / 16.0))
        single = total_loss(bundles[:1], [{8: w}], gt, LossConfig(lambda_attn=0.0),
                            step=0, total_steps=10).item()
        triple = total_loss(bundles, [{8: w}], gt, LossConfig(lambda_attn=0.0),
                            step=0, total_steps=10).item()
        assert triple > single

    def test_attention_term_dropped_at_detach_boundary(self):
        gt = decompose_gt(rng(8).integers(0, 3, size=(8, 8)), 3)
        bundle, _, _ = make_bundle(3, 8, 8, seed=20)
        raw = Tensor(rng(9).normal(size=(3, 16)), requires_grad=True)
        cfg = LossConfig()

        def build(step):
            w = T.reshape(T.softmax(raw, -1), (3, 4, 4))
            return total_loss([bundle], [{8: w}], gt, cfg,
                              step=step, total_steps=1000)

        raw.grad = None
        with T.fresh_tape():
            before = build(749)
            T.backward(before)
        assert raw.grad is not None and np.abs(raw.grad).max() > 0

        raw.grad = None
        with T.fresh_tape():
            at = build(750)
            T.backward(at)
        assert raw.grad is None
        assert before.item() > at.item()

    def test_zero_lambda_attn_drops_term_before_boundary(self):
        gt = decompose_gt(rng(10).integers(0, 2, size=(8, 8)), 2)
        bundle, _, _ = make_bundle(2, 8, 8, seed=21)
        w = Tensor(np.full((2, 4, 4), 1.0 / 16.0))
        with_term = total_loss([bundle], [{8: w}], gt, LossConfig(),
                               step=0, total_steps=10).item()
        without = total_loss([bundle], [{8: w}], gt, LossConfig(lambda_attn=0.0),
                             step=0, total_steps=10).item()
        assert with_term > without

    def test_perfect_dice_only_config_is_zero(self):
        masks = np.zeros((2, 8, 8))
        masks[0, :4] = 1.0
        masks[1, 4:] = 1.0
        gt = gt_from([True, True], masks)
        prob = Tensor(np.zeros((2, 2)))

        class Bundle:
            prob_logits_per_scale = {8: prob}
            avg_prob_logits = prob
            p = Tensor(np.full(2, 0.5))
            mask_logits_per_scale = {8: Tensor(masks)}
            avg_mask_logits = Tensor(masks)
            m = Tensor(masks.copy())

        cfg = LossConfig(lambda_focal=0.0, lambda_ce=0.0, lambda_focal_ce=0.0,
                         lambda_attn=0.0, lambda_dice=1.0)
        w = Tensor(np.full((2, 4, 4), 1.0 / 16.0))
        loss = total_loss([Bundle()], [{8: w}], gt, cfg, step=0, total_steps=10)
        assert loss.item() == 0.0
