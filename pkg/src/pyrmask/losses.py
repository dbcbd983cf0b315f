"""Training objective: mask losses, classification losses, and the
cross-entropy supervision applied directly to query-pixel attention maps.

Ground truth arrives as a fixed-slot set: slot k is category k, either
present with a binary mask or absent. Losses that "discard" absent
categories never touch their logits, so those slots receive no gradient
from the mask terms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

UNLABELED = 255


@dataclass
class LossConfig:
    lambda_focal: float = 20.0
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    lambda_focal_ce: float = 2.0
    lambda_attn: float = 0.1
    alpha: float = 0.25
    gamma: float = 2.0
    null_weight: float = 0.1
    attn_detach_fraction: float = 0.75
    # ablation switch: drop the uniform-target terms for absent categories
    attn_null_target: bool = True

    def __post_init__(self):
        for name in ("lambda_focal", "lambda_dice", "lambda_ce", "lambda_focal_ce",
                     "lambda_attn", "alpha", "gamma", "null_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.attn_detach_fraction <= 1.0:
            raise ConfigError(
                f"attn_detach_fraction must be in (0, 1], got {self.attn_detach_fraction}"
            )


@dataclass
class GroundTruthSet:
    """present[k] says whether slot k is a real category in this image;
    masks[k] is its full-resolution {0,1} indicator (all zero when absent)."""
    present: np.ndarray
    masks: np.ndarray

    @property
    def n_categories(self) -> int:
        return self.present.shape[0]

    def present_indices(self) -> np.ndarray:
        return np.flatnonzero(self.present)


def decompose_gt(label_map: np.ndarray, n_categories: int) -> GroundTruthSet:
    """Split a label map into per-category indicator masks, fixed slots."""
    label_map = np.asarray(label_map)
    labeled = label_map != UNLABELED
    bad = labeled & ((label_map < 0) | (label_map >= n_categories))
    if np.any(bad):
        raise DataError(
            f"labels outside 0..{n_categories - 1}: {sorted(set(label_map[bad].tolist()))[:5]}"
        )
    masks = np.zeros((n_categories,) + label_map.shape)
    present = np.zeros(n_categories, dtype=bool)
    for k in range(n_categories):
        hit = labeled & (label_map == k)
        if hit.any():
            present[k] = True
            masks[k] = hit.astype(np.float64)
    return GroundTruthSet(present=present, masks=masks)


def area_downsample(mask: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a [H, W] map by an integer factor (sizes must divide)."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"size {h}x{w} not divisible by {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def binary_targets_at(gt: GroundTruthSet, out_h: int, out_w: int) -> np.ndarray:
    """Present-category masks area-pooled to out_h x out_w, re-binarized at > 0."""
    idx = gt.present_indices()
    h = gt.masks.shape[1]
    factor = h // out_h
    out = np.empty((idx.size, out_h, out_w))
    for row, k in enumerate(idx):
        out[row] = (area_downsample(gt.masks[k], factor) > 0).astype(np.float64)
    return out


def _no_present_warning(name: str) -> Tensor:
    warnings.warn(f"{name}: no present categories, returning 0", stacklevel=3)
    return Tensor(0.0)


def focal_loss(mask_logits: Tensor, gt: GroundTruthSet, alpha: float, gamma: float) -> Tensor:
    """Binary focal loss on present categories' mask logits at stride 4."""
    idx = gt.present_indices()
    if idx.size == 0:
        return _no_present_warning("focal_loss")
    k, h, w = mask_logits.shape
    logits = T.gather_rows(mask_logits, idx)
    t = binary_targets_at(gt, h, w)
    sign = 2.0 * t - 1.0
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    # p_t = sigmoid(sign * logit): -log p_t = softplus(-sign * logit),
    # 1 - p_t = sigmoid(-sign * logit); stable at any logit magnitude
    flipped = T.mul(logits, Tensor(-sign))
    modulator = T.sigmoid(flipped) ** gamma
    nll = T.softplus(flipped)
    return T.tmean(T.mul(T.mul(modulator, nll), Tensor(alpha_t)))


def dice_loss(mask_probs: Tensor, gt: GroundTruthSet) -> Tensor:
    """Soft dice with +1 smoothing, averaged over present categories."""
    idx = gt.present_indices()
    if idx.size == 0:
        return _no_present_warning("dice_loss")
    k, h, w = mask_probs.shape
    m = T.gather_rows(mask_probs, idx)
    t = binary_targets_at(gt, h, w)
    inter = T.tsum(T.mul(m, Tensor(t)), axis=(1, 2))
    msum = T.tsum(m, axis=(1, 2))
    tsum = t.sum(axis=(1, 2))
    ratio = T.div(inter * 2.0 + 1.0, msum + Tensor(tsum + 1.0))
    return T.tmean(-ratio + 1.0)


def ce_loss(avg_prob_logits: Tensor, gt: GroundTruthSet, null_weight: float = 0.1) -> Tensor:
    """Two-class softmax CE per category; absent-category terms scaled
    by null_weight; mean over all categories."""
    k = avg_prob_logits.shape[0]
    if avg_prob_logits.shape != (k, 2):
        raise ShapeError(f"expected [K, 2] logits, got {avg_prob_logits.shape}")
    # target column: 0 where present, 1 where absent
    onehot = np.zeros((k, 2))
    onehot[gt.present, 0] = 1.0
    onehot[~gt.present, 1] = 1.0
    p_target = T.tsum(T.mul(T.softmax(avg_prob_logits, axis=-1), Tensor(onehot)), axis=-1)
    nll = -T.log_clamped(p_target)
    weights = np.where(gt.present, 1.0, null_weight)
    return T.tsum(T.mul(nll, Tensor(weights))) / float(k)


def _focal_term(p_category: Tensor, gt: GroundTruthSet, alpha: float, gamma: float) -> Tensor:
    """Mean over categories of -alpha_t (1 - p_t)^gamma log p_t with
    p_t = p when present, 1 - p when absent."""
    t = gt.present.astype(np.float64)
    p_t = T.mul(p_category, Tensor(t)) + T.mul(-p_category + 1.0, Tensor(1.0 - t))
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    mod = (-p_t + 1.0) ** gamma
    nll = -T.log_clamped(p_t)
    return T.tmean(T.mul(T.mul(mod, nll), Tensor(alpha_t)))


def focal_ce_loss(prob_logits_per_scale: dict[int, Tensor], gt: GroundTruthSet,
                  alpha: float, gamma: float) -> Tensor:
    """Focal-style CE on each scale's own probabilities, then scale mean."""
    terms = []
    for s in sorted(prob_logits_per_scale):
        logits = prob_logits_per_scale[s]
        kk = logits.shape[0]
        sm = T.softmax(logits, axis=-1)
        p = T.reshape(T.narrow(sm, 1, 0, 1), (kk,))
        terms.append(_focal_term(p, gt, alpha, gamma))
    total = terms[0]
    for extra in terms[1:]:
        total = total + extra
    return total / float(len(terms))


def attention_targets(gt: GroundTruthSet, out_h: int, out_w: int,
                      include_null: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Target distribution per category at one scale plus category weights.

    Present rows: fractional area-downsampled mask normalized to sum 1
    (uniform fallback if it lost all mass). Absent rows: uniform 1/n with
    weight 0.1, or weight 0 when include_null is off.
    """
    k = gt.n_categories
    n = out_h * out_w
    h = gt.masks.shape[1]
    factor = h // out_h
    targets = np.full((k, n), 1.0 / n)
    weights = np.where(gt.present, 1.0, 0.1 if include_null else 0.0)
    for kk in gt.present_indices():
        frac = area_downsample(gt.masks[kk], factor).reshape(-1)
        mass = frac.sum()
        if mass > 0:
            targets[kk] = frac / mass
    return targets, weights


def attention_weight_loss(attn_weights: list[dict[int, Tensor]], gt: GroundTruthSet,
                          config: LossConfig) -> Tensor:
    """Cross-entropy from normalized GT masks to attention maps, averaged
    over categories, scales, and layers, scaled by lambda_attn."""
    if not attn_weights:
        raise ConfigError("attention_weight_loss needs at least one layer of weights")
    per_pair = []
    for layer_maps in attn_weights:
        for s in sorted(layer_maps):
            w = layer_maps[s]
            k, h, ww = w.shape
            targets, cat_w = attention_targets(gt, h, ww, config.attn_null_target)
            flat = T.reshape(w, (k, h * ww))
            ce = -T.tsum(T.mul(T.log_clamped(flat), Tensor(targets)), axis=-1)
            denom = float(np.count_nonzero(cat_w)) if not config.attn_null_target else float(k)
            if denom == 0.0:
                per_pair.append(Tensor(0.0))
                continue
            per_pair.append(T.tsum(T.mul(ce, Tensor(cat_w))) / denom)
    total = per_pair[0]
    for extra in per_pair[1:]:
        total = total + extra
    return (total / float(len(per_pair))) * config.lambda_attn


def target_entropy(gt: GroundTruthSet, out_h: int, out_w: int) -> np.ndarray:
    """Per-category entropy of the attention target, the CE floor for a
    map that matches its target exactly."""
    targets, _ = attention_targets(gt, out_h, out_w)
    return np.array([-(row[row > 0] * np.log(row[row > 0])).sum() for row in targets])


def supervision_point_loss(bundle, gt: GroundTruthSet, config: LossConfig) -> Tensor:
    """Classification + mask terms for one supervision point's predictions."""
    loss = ce_loss(bundle.avg_prob_logits, gt, config.null_weight) * config.lambda_ce
    loss = loss + focal_ce_loss(
        bundle.prob_logits_per_scale, gt, config.alpha, config.gamma
    ) * config.lambda_focal_ce
    if gt.present_indices().size:
        loss = loss + focal_loss(
            bundle.avg_mask_logits, gt, config.alpha, config.gamma
        ) * config.lambda_focal
        loss = loss + dice_loss(bundle.m, gt) * config.lambda_dice
    return loss


def total_loss(bundles, attn_weights: list[dict[int, Tensor]], gt: GroundTruthSet,
               config: LossConfig, step: int, total_steps: int) -> Tensor:
    """Sum of per-supervision-point terms plus the attention-map term.

    Past the detach boundary (step >= fraction * total_steps) the attention
    term is dropped entirely: zero value, zero gradient.
    """
    total = None
    for bundle in bundles:
        term = supervision_point_loss(bundle, gt, config)
        total = term if total is None else total + term
    if step < config.attn_detach_fraction * total_steps and config.lambda_attn > 0:
        total = total + attention_weight_loss(attn_weights, gt, config)
    return total
