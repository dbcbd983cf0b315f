"""Query decoder over the feature pyramid.

Each depth runs three attention stages in order:

1. per-scale self-attention among that scale's category queries,
2. inter-query attention across the concatenated queries of all scales,
3. per-scale cross-attention from queries to that scale's pixels.

Every stage is a post-norm transformer sub-layer: x = LN(x + attention),
x = LN(x + FFN(x)). Learnable per-query positional encodings are added to
the attention Q/K inputs only, never to V, and the same encoding tensor is
reused at every depth. Stage 3 also emits, per scale, the query-to-pixel
attention distribution (softmax over pixels of head-averaged scores),
which downstream losses supervise directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import FeedForward, LayerNorm, MultiHeadAttention, ParamStore, token_init
from .pyramid import FeaturePyramid
from .tensor import Tensor

QUERY_SCALES = (8, 16, 32)

_SINE_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def sinusoidal_encoding_2d(channels: int, h: int, w: int) -> np.ndarray:
    """Fixed [channels, h, w] position code; first half rows, second half columns.

    Within each half, even channels carry sin and odd carry cos of
    position / 10000^(2i/d). Pure function of the shape.
    """
    if channels % 2:
        raise ConfigError(f"sine encoding needs even channel count, got {channels}")
    key = (channels, h, w)
    if key not in _SINE_CACHE:
        half = channels // 2

        def axis_code(n: int, d: int) -> np.ndarray:
            pos = np.arange(n, dtype=np.float64)[:, None]
            i = np.arange(d, dtype=np.float64)[None, :]
            ang = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
            return np.where(np.arange(d)[None, :] % 2 == 0, np.sin(ang), np.cos(ang))

        pe = np.zeros((channels, h, w))
        pe[:half] = axis_code(h, half).T[:, :, None]
        pe[half:] = axis_code(w, channels - half).T[:, None, :]
        _SINE_CACHE[key] = pe
    return _SINE_CACHE[key]


class QueryBank:
    """Per-scale learnable query and positional-encoding matrices [K, C]."""

    def __init__(self, store: ParamStore, rng, n_categories: int, dim: int,
                 scales=QUERY_SCALES):
        if n_categories < 1:
            raise ConfigError(f"need at least one category, got {n_categories}")
        self.n_categories = n_categories
        self.dim = dim
        self.scales = tuple(scales)
        self.queries = {
            s: store.create(f"queries.q{s}", token_init(rng, n_categories, dim))
            for s in self.scales
        }
        self.pos = {
            s: store.create(f"queries.pos{s}", token_init(rng, n_categories, dim))
            for s in self.scales
        }


class AttentionBlock:
    """Post-norm sub-layer: LN(x + MHA), then LN(x + FFN(x))."""

    def __init__(self, store: ParamStore, name: str, rng, dim: int, heads: int):
        self.attn = MultiHeadAttention(store, f"{name}.mha", rng, dim, heads)
        self.ln_attn = LayerNorm(store, f"{name}.ln1", dim)
        self.ffn = FeedForward(store, f"{name}.ffn", rng, dim)
        self.ln_ffn = LayerNorm(store, f"{name}.ln2", dim)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, residual: Tensor):
        mixed, score_logits = self.attn(q_in, k_in, v_in)
        x = self.ln_attn(residual + mixed)
        x = self.ln_ffn(x + self.ffn(x))
        return x, score_logits


class DecoderLayer:
    def __init__(self, store: ParamStore, name: str, rng, dim: int, heads: int,
                 scales=QUERY_SCALES):
        self.scales = tuple(scales)
        self.self_attn = {
            s: AttentionBlock(store, f"{name}.self{s}", rng, dim, heads)
            for s in self.scales
        }
        self.fuse = AttentionBlock(store, f"{name}.fuse", rng, dim, heads)
        self.pixel_attn = {
            s: AttentionBlock(store, f"{name}.pixel{s}", rng, dim, heads)
            for s in self.scales
        }


@dataclass
class DecoderOutputs:
    """query_states: depth+1 snapshots (index 0 = the input queries);
    attn_weights: one dict per depth mapping scale -> [K, H/s, W/s]."""
    query_states: list[dict[int, Tensor]]
    attn_weights: list[dict[int, Tensor]]


def _flatten_pixels(p: Tensor) -> Tensor:
    c, h, w = p.shape
    return T.transpose(T.reshape(p, (c, h * w)), (1, 0))


def self_attention_stage(block: AttentionBlock, q: Tensor, pos: Tensor) -> Tensor:
    qk = q + pos
    out, _ = block(qk, qk, q, q)
    return out


def cross_scale_stage(block: AttentionBlock, states: dict[int, Tensor],
                      pos: dict[int, Tensor], scales) -> dict[int, Tensor]:
    k = states[scales[0]].shape[0]
    if any(states[s].shape[0] != k for s in scales):
        raise ShapeError("query counts differ across scales")
    tokens = T.concat([states[s] for s in scales], axis=0)
    pos_all = T.concat([pos[s] for s in scales], axis=0)
    qk = tokens + pos_all
    out, _ = block(qk, qk, tokens, tokens)
    return {s: T.narrow(out, 0, i * k, k) for i, s in enumerate(scales)}


def pixel_attention_stage(block: AttentionBlock, q: Tensor, pixel_map: Tensor,
                          pos: Tensor):
    """Returns the updated queries and the per-query pixel distribution."""
    c, h, w = pixel_map.shape
    pixels = _flatten_pixels(pixel_map)
    sine = Tensor(sinusoidal_encoding_2d(c, h, w).reshape(c, h * w).T)
    out, score_logits = block(q + pos, pixels + sine, pixels, q)
    avg_logits = T.tmean(score_logits, axis=0)
    weights = T.reshape(T.softmax(avg_logits, axis=-1), (q.shape[0], h, w))
    return out, weights


class Decoder:
    def __init__(self, store: ParamStore, rng, dim: int, heads: int, depth: int,
                 scales=QUERY_SCALES):
        if depth < 1:
            raise ConfigError(f"decoder depth must be >= 1, got {depth}")
        self.scales = tuple(scales)
        self.depth = depth
        self.layers = [
            DecoderLayer(store, f"decoder.layer{i}", rng, dim, heads, self.scales)
            for i in range(depth)
        ]

    def __call__(self, pyramid: FeaturePyramid, bank: QueryBank,
                 disable_cross_scale: bool = False) -> DecoderOutputs:
        states = {s: bank.queries[s] for s in self.scales}
        snapshots = [dict(states)]
        all_weights = []
        for layer in self.layers:
            states = {
                s: self_attention_stage(layer.self_attn[s], states[s], bank.pos[s])
                for s in self.scales
            }
            if not disable_cross_scale and len(self.scales) > 1:
                states = cross_scale_stage(layer.fuse, states, bank.pos, self.scales)
            weights = {}
            for s in self.scales:
                states[s], weights[s] = pixel_attention_stage(
                    layer.pixel_attn[s], states[s], pyramid.level(s), bank.pos[s]
                )
            snapshots.append(dict(states))
            all_weights.append(weights)
        return DecoderOutputs(query_states=snapshots, attn_weights=all_weights)
