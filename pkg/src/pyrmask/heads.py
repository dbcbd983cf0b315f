"""Probability and mask heads plus per-pixel class assignment.

Both heads read the query state of every scale, produce per-scale logits,
and average the three logit sets into the final prediction. The average
uses a + ((b - a) + (c - a)) / 3, which is the arithmetic mean but returns
the shared value bit-exactly when all three inputs are identical.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Conv2d, Linear, ParamStore
from .tensor import Tensor


def exact_mean3(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    return a + ((b - a) + (c - a)) / 3.0


class MaskFeatureHead:
    """3x3 width-preserving conv applied to the stride-4 pyramid level."""

    def __init__(self, store: ParamStore, rng, width: int):
        self.conv = Conv2d(store, "mask_feature", rng, width, width, 3)

    def __call__(self, p4: Tensor) -> Tensor:
        return self.conv(p4)


class ProbabilityHead:
    """Three separate linear maps to 2 logits, one per scale, averaged.

    Per category the two logits score (present, not-present); the
    probability is the first softmax component of the averaged logits.
    """

    def __init__(self, store: ParamStore, rng, dim: int, scales):
        self.scales = tuple(scales)
        self.proj = {
            s: Linear(store, f"prob_head.s{s}", rng, dim, 2) for s in self.scales
        }

    def per_scale_logits(self, states: dict[int, Tensor]) -> dict[int, Tensor]:
        return {s: self.proj[s](states[s]) for s in self.scales}

    @staticmethod
    def average(per_scale: dict[int, Tensor], scales) -> Tensor:
        logits = [per_scale[s] for s in scales]
        if len(logits) == 1:
            return logits[0]
        if len(logits) != 3:
            raise ShapeError(f"expected 1 or 3 scales, got {len(logits)}")
        return exact_mean3(*logits)

    @staticmethod
    def probabilities(avg_logits: Tensor) -> Tensor:
        sm = T.softmax(avg_logits, axis=-1)
        k = avg_logits.shape[0]
        return T.reshape(T.narrow(sm, 1, 0, 1), (k,))


class MaskHead:
    """Per-scale 3-layer MLP on queries, then product with the mask feature.

    logits_s[k, h, w] = sum_c mlp_s(q_s)[k, c] * M[c, h, w]; the final mask
    logits are the cross-scale average and m = sigmoid of it.
    """

    def __init__(self, store: ParamStore, rng, dim: int, scales):
        self.scales = tuple(scales)
        self.mlps = {}
        for s in self.scales:
            self.mlps[s] = [
                Linear(store, f"mask_head.s{s}.fc{i}", rng, dim, dim) for i in range(3)
            ]

    def embed(self, q: Tensor, scale: int) -> Tensor:
        fc0, fc1, fc2 = self.mlps[scale]
        return fc2(T.relu(fc1(T.relu(fc0(q)))))

    def per_scale_logits(self, states: dict[int, Tensor], mask_feature: Tensor
                         ) -> dict[int, Tensor]:
        c, h, w = mask_feature.shape
        flat = T.reshape(mask_feature, (c, h * w))
        out = {}
        for s in self.scales:
            k = states[s].shape[0]
            out[s] = T.reshape(T.matmul(self.embed(states[s], s), flat), (k, h, w))
        return out

    @staticmethod
    def average(per_scale: dict[int, Tensor], scales) -> Tensor:
        logits = [per_scale[s] for s in scales]
        if len(logits) == 1:
            return logits[0]
        if len(logits) != 3:
            raise ShapeError(f"expected 1 or 3 scales, got {len(logits)}")
        return exact_mean3(*logits)


def class_prediction(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Per pixel argmax_k of p[k] * m[k, h, w]; ties go to the lowest k."""
    p = np.asarray(p, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if p.ndim != 1 or m.ndim != 3 or m.shape[0] != p.shape[0]:
        raise ShapeError(f"class_prediction: p {p.shape} vs m {m.shape}")
    scores = p[:, None, None] * m
    return np.argmax(scores, axis=0)
