"""Scaled dot-product and multihead attention on ``numkernel`` tensors.

Sequences are ``[len, d]``; a leading batch axis ``[B, len, d]`` is also
accepted, in which case ``key_mask`` (bool ``[B, lk]``) marks the real key rows
of padded sequences. Masked keys get zero weight, so a padded batch reproduces
the per-sample results. Projections carry no bias and there is no positional
encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import DimensionError, Tensor

# Logit offset for padded keys; exp() of it underflows to exactly 0.
_MASKED = -1e30


@dataclass
class MHAParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int = 8

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {w.shape}")
        if d % self.heads:
            raise DimensionError(f"model dim {d} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: nk.CounterRNG, dim: int, heads: int = 8) -> "MHAParams":
        return cls(*(nk.init_uniform(rng, (dim, dim)) for _ in range(4)), heads=heads)

    @classmethod
    def identity(cls, dim: int, heads: int = 1) -> "MHAParams":
        eye = np.eye(dim)
        return cls(*(nk.parameter(eye) for _ in range(4)), heads=heads)

    def parameters(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return nk.transpose(x, axes)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """softmax(Q Kᵀ / sqrt(dk)) V over the last two axes.

    Returns ``(output, weights)``; weights rows are over keys. ``key_mask``
    must broadcast to the weights' shape with keys on the last axis.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    dk = q.shape[-1]
    scores = nk.scale(nk.matmul(q, _swap_last(k)), 1.0 / math.sqrt(dk))
    if key_mask is not None:
        offset = np.where(np.broadcast_to(key_mask, scores.shape), 0.0, _MASKED)
        scores = nk.add_constant(scores, offset)
    weights = nk.softmax(scores, axis=-1)
    return nk.matmul(weights, v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = nk.reshape(x, (*lead, length, heads, d // heads))
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return nk.transpose(x, axes)  # [..., heads, len, dh]


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    x = nk.transpose(x, axes)
    return nk.reshape(x, (*lead, length, heads * dh))


def multihead(
    query_seq: Tensor,
    kv_seq: Tensor,
    params: MHAParams,
    key_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Project, split into heads, attend per head, merge, output-project.

    Output has the query's length. With ``return_weights`` the per-head
    attention weights ``[..., heads, lq, lk]`` are returned as well.
    """
    d = params.dim
    if query_seq.shape[-1] != d or kv_seq.shape[-1] != d:
        raise DimensionError(
            f"attention params expect dim {d}, got query {query_seq.shape} and key/value {kv_seq.shape}"
        )
    if query_seq.shape[:-2] != kv_seq.shape[:-2]:
        raise DimensionError(f"batch axes differ: {query_seq.shape} vs {kv_seq.shape}")
    h = params.heads
    q = _split_heads(nk.matmul(query_seq, params.wq), h)
    k = _split_heads(nk.matmul(kv_seq, params.wk), h)
    v = _split_heads(nk.matmul(kv_seq, params.wv), h)
    mask = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != kv_seq.shape[:-1]:
            raise DimensionError(f"key_mask {key_mask.shape} does not match {kv_seq.shape[:-1]}")
        mask = key_mask[..., None, None, :]  # over heads and query rows
    out, weights = scaled_dot_attention(q, k, v, mask)
    out = nk.matmul(_merge_heads(out), params.wo)
    return (out, weights) if return_weights else out


def cross_attn(a: Tensor, b: Tensor, params: MHAParams, b_mask: np.ndarray | None = None) -> Tensor:
    """``a`` queries ``b`` (``b`` supplies keys and values)."""
    return multihead(a, b, params, key_mask=b_mask)


def self_attn(x: Tensor, params: MHAParams, mask: np.ndarray | None = None) -> Tensor:
    return multihead(x, x, params, key_mask=mask)
