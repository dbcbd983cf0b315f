"""Parameter registry and the small set of trainable building blocks.

Modules register their parameters in a ParamStore under dotted names at
construction time. Construction order is the RNG consumption order, so a
given seed always produces the same initial weights.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class ParamStore:
    """Flat name -> Tensor registry with stable iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def n_scalars(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}"
            )
        for k, p in self._params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ShapeError(f"parameter {k!r}: stored {a.shape} vs model {p.data.shape}")
            p.data = a.copy()


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


def he_normal_conv(rng: np.random.Generator, c_out: int, c_in_per_group: int, k: int) -> np.ndarray:
    std = math.sqrt(2.0 / (c_in_per_group * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in_per_group, k, k))


def token_init(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=(n, dim))


class Linear:
    """y = x @ W + b with W: [d_in, d_out]."""

    def __init__(self, store: ParamStore, name: str, rng, d_in: int, d_out: int,
                 bias: bool = True):
        self.w = store.create(f"{name}.w", xavier_uniform(rng, d_in, d_out))
        self.b = store.create(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return T.add_bias(y, self.b) if self.b is not None else y


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.g = store.create(f"{name}.g", np.ones(dim))
        self.b = store.create(f"{name}.b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


class FeedForward:
    """Two-layer MLP with ReLU, hidden width 4x the model dim."""

    def __init__(self, store: ParamStore, name: str, rng, dim: int):
        self.fc1 = Linear(store, f"{name}.fc1", rng, dim, 4 * dim)
        self.fc2 = Linear(store, f"{name}.fc2", rng, 4 * dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class MultiHeadAttention:
    """Scaled dot-product attention over [N, dim] token matrices.

    Returns (output, weight_logits): weight_logits is the per-head
    pre-softmax score block [heads, Nq, Nk], kept on the graph so a loss
    taken off the attention weights reaches the projections.
    """

    def __init__(self, store: ParamStore, name: str, rng, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"dim={dim} not divisible by heads={heads}")
        self.dim = dim
        self.heads = heads
        self.d_head = dim // heads
        self.proj_q = Linear(store, f"{name}.q", rng, dim, dim)
        # no key bias: a shared key offset shifts every score row by the
        # same amount and cancels in the row softmax, so the parameter
        # could never receive gradient
        self.proj_k = Linear(store, f"{name}.k", rng, dim, dim, bias=False)
        self.proj_v = Linear(store, f"{name}.v", rng, dim, dim)
        self.proj_out = Linear(store, f"{name}.out", rng, dim, dim)

    def _split(self, x: Tensor, n: int) -> Tensor:
        return T.transpose(T.reshape(x, (n, self.heads, self.d_head)), (1, 0, 2))

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor):
        nq, nk = q_in.shape[0], k_in.shape[0]
        q = self._split(self.proj_q(q_in), nq)
        k = self._split(self.proj_k(k_in), nk)
        v = self._split(self.proj_v(v_in), nk)
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.d_head))
        attn = T.softmax(scores, axis=-1)
        mixed = T.matmul(attn, v)
        merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (nq, self.dim))
        out = self.proj_out(merged)
        return out, scores


class Conv2d:
    """Same-padded grouped 2d convolution over [C, H, W]."""

    def __init__(self, store: ParamStore, name: str, rng, c_in: int, c_out: int,
                 k: int, groups: int = 1):
        if c_in % groups or c_out % groups:
            raise ConfigError(f"conv {name}: channels {c_in}->{c_out} vs groups={groups}")
        self.groups = groups
        self.w = store.create(f"{name}.w", he_normal_conv(rng, c_out, c_in // groups, k))
        self.b = store.create(f"{name}.b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, groups=self.groups)
