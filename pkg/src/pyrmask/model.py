"""The assembled segmentation model and its inference entry points.

Forward produces a prediction bundle for every supervision point: the
input queries (depth 0) and each decoder layer's output. All points share
the same heads. Inference reads the deepest bundle, multiplies category
probability into the category mask, upsamples the score maps to image
resolution, and takes the per-pixel argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import QUERY_SCALES, Decoder, DecoderOutputs, QueryBank
from .errors import ConfigError
from .heads import MaskFeatureHead, MaskHead, ProbabilityHead
from .nn import ParamStore
from .pyramid import FeatureExtractor, FeaturePyramid
from .tensor import Tensor

TTA_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


@dataclass
class PredictionBundle:
    prob_logits_per_scale: dict[int, Tensor]
    avg_prob_logits: Tensor
    p: Tensor
    mask_logits_per_scale: dict[int, Tensor]
    avg_mask_logits: Tensor
    m: Tensor


@dataclass
class ModelOutputs:
    pyramid: FeaturePyramid
    decoder: DecoderOutputs
    bundles: list[PredictionBundle]

    @property
    def final(self) -> PredictionBundle:
        return self.bundles[-1]


class SegmentationModel:
    def __init__(self, n_categories: int, channels: int, depth: int, heads: int,
                 seed: int, scales=QUERY_SCALES, cross_scale: bool = True):
        if channels % 4:
            raise ConfigError(f"channels={channels} must be divisible by 4")
        self.n_categories = n_categories
        self.channels = channels
        self.depth = depth
        self.scales = tuple(scales)
        self.cross_scale = cross_scale
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.extractor = FeatureExtractor(self.store, rng, channels)
        self.bank = QueryBank(self.store, rng, n_categories, channels, self.scales)
        self.decoder = Decoder(self.store, rng, channels, heads, depth, self.scales)
        self.mask_feature = MaskFeatureHead(self.store, rng, channels)
        self.prob_head = ProbabilityHead(self.store, rng, channels, self.scales)
        self.mask_head = MaskHead(self.store, rng, channels, self.scales)

    def bundle_from(self, states: dict[int, Tensor], mask_feat: Tensor) -> PredictionBundle:
        prob_per_scale = self.prob_head.per_scale_logits(states)
        avg_prob = ProbabilityHead.average(prob_per_scale, self.scales)
        p = ProbabilityHead.probabilities(avg_prob)
        mask_per_scale = self.mask_head.per_scale_logits(states, mask_feat)
        avg_mask = MaskHead.average(mask_per_scale, self.scales)
        m = T.sigmoid(avg_mask)
        return PredictionBundle(
            prob_logits_per_scale=prob_per_scale,
            avg_prob_logits=avg_prob,
            p=p,
            mask_logits_per_scale=mask_per_scale,
            avg_mask_logits=avg_mask,
            m=m,
        )

    def forward(self, image: Tensor) -> ModelOutputs:
        pyramid = self.extractor(image)
        mask_feat = self.mask_feature(pyramid.p4)
        dec = self.decoder(pyramid, self.bank,
                           disable_cross_scale=not self.cross_scale)
        bundles = [self.bundle_from(states, mask_feat) for states in dec.query_states]
        return ModelOutputs(pyramid=pyramid, decoder=dec, bundles=bundles)

    # -- inference ------------------------------------------------------

    def scores(self, image: np.ndarray, prediction_average: bool = False) -> np.ndarray:
        """Per-pixel class scores [K, H/4, W/4] from the deepest bundle.

        Default: p[k] * sigmoid(mean mask logits). With prediction_average,
        per-scale probability-times-mask maps are averaged instead.
        """
        with T.no_grad():
            out = self.forward(Tensor(image))
            b = out.final
            if not prediction_average:
                return b.p.data[:, None, None] * b.m.data
            acc = None
            for s in self.scales:
                p_s = _softmax_rows(b.prob_logits_per_scale[s].data)[:, 0]
                m_s = _sigmoid_np(b.mask_logits_per_scale[s].data)
                score = p_s[:, None, None] * m_s
                acc = score if acc is None else acc + score
            return acc / len(self.scales)

    def predict(self, image: np.ndarray, prediction_average: bool = False) -> np.ndarray:
        """Single-scale segmentation: upsample scores to H x W, argmax."""
        h, w = image.shape[1], image.shape[2]
        sc = self.scores(image, prediction_average)
        up = T.resize_bilinear_np(sc, h, w)
        return np.argmax(up, axis=0)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def round_to_multiple_of_32(x: float) -> int:
    """Nearest multiple of 32, halves rounding up, floor of 32."""
    return max(32, int(np.floor(x / 32.0 + 0.5)) * 32)


def multi_scale_inference(model: SegmentationModel, image: np.ndarray,
                          scales=TTA_SCALES, hflip: bool = True,
                          prediction_average: bool = False) -> np.ndarray:
    """Average class-score maps over scale/flip variants, then argmax.

    Each variant resizes the image (sizes snapped to multiples of 32),
    optionally mirrors it, computes scores, un-mirrors, and bilinearly
    resizes the scores back to the input resolution.
    """
    h, w = image.shape[1], image.shape[2]
    flips = (False, True) if hflip else (False,)
    acc = None
    n = 0
    for scale in scales:
        th = round_to_multiple_of_32(h * scale)
        tw = round_to_multiple_of_32(w * scale)
        resized = T.resize_bilinear_np(image, th, tw)
        for flip in flips:
            variant = resized[:, :, ::-1].copy() if flip else resized
            sc = model.scores(variant, prediction_average=prediction_average)
            if flip:
                sc = sc[:, :, ::-1]
            acc_term = T.resize_bilinear_np(np.ascontiguousarray(sc), h, w)
            acc = acc_term if acc is None else acc + acc_term
            n += 1
    return np.argmax(acc / n, axis=0)
