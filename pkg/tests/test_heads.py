import math

import numpy as np
import pytest

from pyrmask import tensor as T
from pyrmask.errors import ShapeError
from pyrmask.heads import (MaskFeatureHead, MaskHead, ProbabilityHead,
                           class_prediction, exact_mean3)
from pyrmask.nn import ParamStore
from pyrmask.tensor import Tensor


@pytest.fixture(autouse=True)
def clean_tape():
    T.tape().clear()
    yield
    T.tape().clear()


SCALES = (8, 16, 32)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestExactMean3:
    def test_identical_inputs_return_bit_equal(self):
        x = rng(1).normal(size=(4, 7))
        out = exact_mean3(Tensor(x), Tensor(x.copy()), Tensor(x.copy()))
        assert np.array_equal(out.data, x)

    def test_is_the_arithmetic_mean(self):
        a, b, c = (rng(s).normal(size=(3, 3)) for s in (2, 3, 4))
        out = exact_mean3(Tensor(a), Tensor(b), Tensor(c))
        np.testing.assert_allclose(out.data, (a + b + c) / 3.0, atol=1e-14)


class TestProbabilityHead:
    def test_zero_queries_zero_weights_give_half(self):
        store = ParamStore()
        head = ProbabilityHead(store, rng(0), 6, SCALES)
        for _, p in store.items():
            p.data[:] = 0.0
        states = {s: Tensor(np.zeros((4, 6))) for s in SCALES}
        avg = ProbabilityHead.average(head.per_scale_logits(states), SCALES)
        p = ProbabilityHead.probabilities(avg)
        np.testing.assert_allclose(p.data, np.full(4, 0.5), atol=1e-15)

    def test_ln3_logit_gives_three_quarters(self):
        # softmax((ln 3, 0)) first component = 3 / (3 + 1)
        p = ProbabilityHead.probabilities(Tensor(np.array([[math.log(3.0), 0.0]])))
        np.testing.assert_allclose(p.data, [0.75], atol=1e-12)

    def test_identical_per_scale_logits_average_bit_equal(self):
        logits = rng(1).normal(size=(5, 2))
        per_scale = {s: Tensor(logits.copy()) for s in SCALES}
        avg = ProbabilityHead.average(per_scale, SCALES)
        assert np.array_equal(avg.data, logits)

    def test_single_scale_average_is_identity(self):
        t = Tensor(rng(2).normal(size=(3, 2)))
        assert ProbabilityHead.average({16: t}, (16,)) is t

    def test_two_scales_rejected(self):
        ts = {8: Tensor(np.zeros((2, 2))), 16: Tensor(np.zeros((2, 2)))}
        with pytest.raises(ShapeError):
            ProbabilityHead.average(ts, (8, 16))

    def test_probability_strictly_inside_unit_interval(self):
        # moderate logits; a margin beyond ~37 rounds p to exactly 1.0
        logits = Tensor(rng(3).normal(0.0, 3.0, size=(20, 2)))
        p = ProbabilityHead.probabilities(logits).data
        assert np.all(p > 0.0) and np.all(p < 1.0)


class TestMaskFeatureHead:
    def test_zero_input_gives_zero(self):
        store = ParamStore()
        head = MaskFeatureHead(store, rng(0), 4)
        out = head(Tensor(np.zeros((4, 5, 5)))).data
        assert np.array_equal(out, np.zeros((4, 5, 5)))

    def test_identity_kernel_passes_input_through(self):
        store = ParamStore()
        head = MaskFeatureHead(store, rng(0), 1)
        head.conv.w.data[:] = 0.0
        head.conv.w.data[0, 0, 1, 1] = 1.0
        x = rng(1).normal(size=(1, 6, 6))
        assert np.array_equal(head(Tensor(x)).data, x)


class TestMaskHead:
    def test_zero_mask_feature_gives_half_probability(self):
        store = ParamStore()
        head = MaskHead(store, rng(0), 6, SCALES)
        states = {s: Tensor(rng(s).normal(size=(3, 6))) for s in SCALES}
        per_scale = head.per_scale_logits(states, Tensor(np.zeros((6, 4, 4))))
        avg = MaskHead.average(per_scale, SCALES)
        m = T.sigmoid(avg).data
        assert np.array_equal(avg.data, np.zeros((3, 4, 4)))
        np.testing.assert_allclose(m, np.full((3, 4, 4), 0.5), atol=1e-15)

    def test_identity_mlp_single_channel(self):
        # K=1, C=1, every fc = identity, positive query: logits = q * M
        store = ParamStore()
        head = MaskHead(store, rng(0), 1, (8,))
        for i in range(3):
            store[f"mask_head.s8.fc{i}.w"].data[:] = 1.0
            store[f"mask_head.s8.fc{i}.b"].data[:] = 0.0
        m_feat = rng(1).normal(size=(1, 3, 3))
        q = 1.7
        out = head.per_scale_logits({8: Tensor(np.array([[q]]))},
                                    Tensor(m_feat))[8]
        np.testing.assert_allclose(out.data, q * m_feat, atol=1e-15)

    def test_mlp_has_three_layers_per_scale(self):
        store = ParamStore()
        MaskHead(store, rng(0), 4, SCALES)
        for s in SCALES:
            for i in range(3):
                assert f"mask_head.s{s}.fc{i}.w" in store
        assert len(store) == 3 * 3 * 2


class TestClassPrediction:
    def test_hand_case(self):
        # scores: 0.9 * 0.3 = 0.27 beats 0.2 * 0.9 = 0.18
        p = np.array([0.9, 0.2])
        m = np.array([[[0.3]], [[0.9]]])
        assert class_prediction(p, m)[0, 0] == 0

    def test_dominant_probability_wins_everywhere(self):
        p = np.array([1.0 - 1e-6, 1e-6])
        m = np.stack([np.full((4, 4), 0.6), rng(1).uniform(0.7, 1.0, (4, 4))])
        assert np.array_equal(class_prediction(p, m), np.zeros((4, 4), dtype=int))

    def test_ties_go_to_lowest_index(self):
        p = np.array([0.5, 0.5, 0.5])
        m = np.full((3, 2, 2), 0.5)
        assert np.array_equal(class_prediction(p, m), np.zeros((2, 2), dtype=int))

    def test_matches_brute_force_oracle(self):
        for seed in range(100):
            g = rng(seed)
            p = g.uniform(0.01, 0.99, size=5)
            m = g.uniform(0.01, 0.99, size=(5, 8, 8))
            got = class_prediction(p, m)
            want = np.zeros((8, 8), dtype=int)
            for y in range(8):
                for x in range(8):
                    best, best_k = -1.0, 0
                    for k in range(5):
                        s = p[k] * m[k, y, x]
                        if s > best:
                            best, best_k = s, k
                    want[y, x] = best_k
            assert np.array_equal(got, want), seed

    def test_positive_scaling_invariance(self):
        # power-of-two factor keeps every product exact, so order holds
        g = rng(7)
        p = g.uniform(0.01, 0.99, size=4)
        m = g.uniform(0.01, 0.99, size=(4, 6, 6))
        assert np.array_equal(class_prediction(p, m), class_prediction(p * 4.0, m))

    def test_permuting_categories_relabels_output(self):
        g = rng(8)
        p = g.uniform(0.01, 0.99, size=4)
        m = g.uniform(0.01, 0.99, size=(4, 5, 5))
        base = class_prediction(p, m)
        perm = np.array([2, 3, 1, 0])
        relabeled = class_prediction(p[perm], m[perm])
        # argmax breaks exact ties by position, none occur for random data
        inverse = np.argsort(perm)
        assert np.array_equal(inverse[base], relabeled)

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            class_prediction(np.zeros(3), np.zeros((2, 4, 4)))
        with pytest.raises(ShapeError):
            class_prediction(np.zeros((3, 1)), np.zeros((3, 4, 4)))
