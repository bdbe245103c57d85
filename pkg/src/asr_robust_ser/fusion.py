"""Bimodal fusion: six baselines plus modality-gated fusion.

Every function takes audio ``A`` and text ``T`` sequences already projected to
a shared model dim ``d`` (``[len, d]``, or ``[B, len, d]`` with bool masks
marking real rows) and returns a :class:`FusedVector` that feeds the backbone.

Output sizes:

=====================  ===========
early                  2d
cross-attention        2d
tensor                 (d+1)^2
nl-gate                2d
misa                   4d'
modality-gated         d
=====================  ===========

Late fusion works on two backbones' outputs instead, see :func:`late_fusion`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import numkernel as nk
from .attention import MHAParams, cross_attn, self_attn
from .numkernel import DimensionError, Tensor

TECHNIQUES = ("early", "late", "cross_attention", "tensor", "nl_gate", "misa", "modality_gated")


@dataclass
class FusedVector:
    values: Tensor
    op: str
    dims: dict[str, int]
    aux_losses: dict[str, Tensor] = field(default_factory=dict)
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.values.shape[-1]


def _check_pair(A: Tensor, T: Tensor) -> int:
    if A.shape[-1] != T.shape[-1]:
        raise DimensionError(f"audio dim {A.shape[-1]} != text dim {T.shape[-1]}")
    if A.shape[:-2] != T.shape[:-2]:
        raise DimensionError(f"batch axes differ: {A.shape} vs {T.shape}")
    return A.shape[-1]


def _full_mask(x: Tensor, mask) -> np.ndarray:
    return np.ones(x.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)


def pool(x: Tensor, mask=None) -> Tensor:
    if mask is None:
        return nk.mean_pool(x, axis=-2)
    return nk.masked_mean(x, mask)


def concat_seq(parts: list[Tensor], masks: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
    """Concatenate sequences along the time axis, carrying their masks along."""
    return nk.concat(parts, axis=-2), np.concatenate(masks, axis=-1)


# --------------------------------------------------------------------------- baselines


def early_fusion(A: Tensor, T: Tensor, a_mask=None, t_mask=None) -> FusedVector:
    d = _check_pair(A, T)
    out = nk.concat([pool(A, a_mask), pool(T, t_mask)], axis=-1)
    return FusedVector(out, "early", {"d": d})


def late_fusion(out_a: Tensor, out_t: Tensor) -> Tensor:
    """Decision-level fusion: the mean of two independently trained models' outputs."""
    if out_a.shape != out_t.shape:
        raise DimensionError(f"late fusion needs equal outputs, got {out_a.shape} and {out_t.shape}")
    return nk.scale(nk.add(out_a, out_t), 0.5)


def cross_attention_fusion(
    A: Tensor, T: Tensor, params: MHAParams, a_mask=None, t_mask=None
) -> FusedVector:
    """Each modality queries the other with one shared attention block; pooled halves concatenated."""
    d = _check_pair(A, T)
    a_ctx = cross_attn(A, T, params, t_mask)
    t_ctx = cross_attn(T, A, params, a_mask)
    out = nk.concat([pool(a_ctx, a_mask), pool(t_ctx, t_mask)], axis=-1)
    return FusedVector(out, "cross_attention", {"d": d})


def tensor_fusion(A: Tensor, T: Tensor, a_mask=None, t_mask=None) -> FusedVector:
    d = _check_pair(A, T)
    out = nk.outer_augmented(pool(A, a_mask), pool(T, t_mask))
    return FusedVector(out, "tensor", {"d": d})


@dataclass
class NLGateParams:
    audio_attn: MHAParams
    text_attn: MHAParams
    audio_bias: Tensor
    text_bias: Tensor

    @classmethod
    def init(cls, rng: nk.CounterRNG, dim: int, heads: int = 8) -> "NLGateParams":
        return cls(
            MHAParams.init(rng.child("audio"), dim, heads),
            MHAParams.init(rng.child("text"), dim, heads),
            nk.parameter(np.zeros(dim)),
            nk.parameter(np.zeros(dim)),
        )

    def parameters(self) -> list[Tensor]:
        return self.audio_attn.parameters() + self.text_attn.parameters() + [self.audio_bias, self.text_bias]


def nl_gate_fusion(A: Tensor, T: Tensor, params: NLGateParams, a_mask=None, t_mask=None) -> FusedVector:
    """Bidirectional gating: each sequence is scaled by a sigmoid gate computed by
    attending to the other modality, then both are pooled and concatenated."""
    d = _check_pair(A, T)
    gate_a = nk.sigmoid(nk.add_bias(cross_attn(A, T, params.audio_attn, t_mask), params.audio_bias))
    gate_t = nk.sigmoid(nk.add_bias(cross_attn(T, A, params.text_attn, a_mask), params.text_bias))
    gated_a = nk.mul(gate_a, A)
    gated_t = nk.mul(gate_t, T)
    out = nk.concat([pool(gated_a, a_mask), pool(gated_t, t_mask)], axis=-1)
    return FusedVector(out, "nl_gate", {"d": d})


@dataclass
class MISAParams:
    shared: Tensor
    private_audio: Tensor
    private_text: Tensor
    sim_weight: float = 0.1
    diff_weight: float = 0.1

    @classmethod
    def init(cls, rng: nk.CounterRNG, dim: int, sub_dim: int, sim_weight=0.1, diff_weight=0.1) -> "MISAParams":
        return cls(
            nk.init_uniform(rng.child("shared"), (dim, sub_dim)),
            nk.init_uniform(rng.child("audio"), (dim, sub_dim)),
            nk.init_uniform(rng.child("text"), (dim, sub_dim)),
            sim_weight,
            diff_weight,
        )

    @property
    def sub_dim(self) -> int:
        return self.shared.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.shared, self.private_audio, self.private_text]


def _batch_mean(x: Tensor) -> Tensor:
    """Mean of per-sample scalars (shape ``()`` or ``[B]``)."""
    n = x.data.size
    return nk.scale(nk.sum_all(x), 1.0 / n)


def _row_dot(x: Tensor, y: Tensor) -> Tensor:
    prod = nk.mul(x, y)
    ones = Tensor(np.ones((x.shape[-1], 1)))
    if prod.ndim == 1:
        prod = nk.reshape(prod, (1, -1))
    return nk.reshape(nk.matmul(prod, ones), prod.shape[:-1])


def misa_fusion(A: Tensor, T: Tensor, params: MISAParams, a_mask=None, t_mask=None) -> FusedVector:
    """Shared (modality-invariant) and private (modality-specific) projections of the
    pooled inputs, with similarity and difference losses for the trainer to weight."""
    d = _check_pair(A, T)
    a = pool(A, a_mask)
    t = pool(T, t_mask)

    def project(x, w):
        if x.ndim == 1:
            return nk.reshape(nk.matmul(nk.reshape(x, (1, -1)), w), (w.shape[1],))
        return nk.matmul(x, w)

    shared_a = project(a, params.shared)
    shared_t = project(t, params.shared)
    private_a = project(a, params.private_audio)
    private_t = project(t, params.private_text)
    out = nk.concat([shared_a, shared_t, private_a, private_t], axis=-1)

    gap = nk.sub(shared_a, shared_t)
    similarity = _batch_mean(_row_dot(gap, gap))
    difference = _batch_mean(
        nk.add(nk.square(_row_dot(shared_a, private_a)), nk.square(_row_dot(shared_t, private_t)))
    )
    return FusedVector(
        out,
        "misa",
        {"d": d, "sub_dim": params.sub_dim},
        aux_losses={"similarity": similarity, "difference": difference},
        info={"weights": {"similarity": params.sim_weight, "difference": params.diff_weight}},
    )


# --------------------------------------------------------------------------- modality-gated


@dataclass
class ModalityGateParams:
    """Gating logits ``w1`` (audio, text), concatenation logits ``w2`` (audio, text,
    fused) and the two attention blocks. Both logit vectors start all-ones."""

    w1: Tensor
    w2: Tensor
    cross: MHAParams
    self_: MHAParams

    def __post_init__(self):
        if self.w1.shape != (2,) or self.w2.shape != (3,):
            raise ValueError(f"w1 must have 2 logits and w2 3, got {self.w1.shape} and {self.w2.shape}")
        if not (np.all(np.isfinite(self.w1.data)) and np.all(np.isfinite(self.w2.data))):
            raise ValueError("gate logits must be finite")
        if self.cross.dim != self.self_.dim:
            raise DimensionError("cross and self attention dims differ")

    @classmethod
    def init(cls, rng: nk.CounterRNG, dim: int, heads: int = 8) -> "ModalityGateParams":
        return cls(
            nk.parameter(np.ones(2)),
            nk.parameter(np.ones(3)),
            MHAParams.init(rng.child("cross"), dim, heads),
            MHAParams.init(rng.child("self"), dim, heads),
        )

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2] + self.cross.parameters() + self.self_.parameters()


def gate_branch(w1_probs: np.ndarray) -> int:
    """Dominant modality index; ties go to audio (index 0)."""
    return int(np.argmax(w1_probs))


def modality_gated_fusion(
    A: Tensor, T: Tensor, params: ModalityGateParams, a_mask=None, t_mask=None, branch: int | None = None
) -> FusedVector:
    """Softmax-normalised modality weights pick a dominant modality, which is kept
    raw while the other is replaced by cross-attention with the dominant one as
    query. Self-attention runs over the time-concatenated pair, and the final
    sequence concatenates weighted ``A``, ``T`` and the attended result before
    mean pooling.

    ``branch`` pins the dominant-modality choice (used to hold it fixed while
    differentiating numerically); by default it is the argmax of softmax(w1).
    """
    d = _check_pair(A, T)
    if d != params.cross.dim:
        raise DimensionError(f"features have dim {d}, gate params expect {params.cross.dim}")
    a_mask = _full_mask(A, a_mask)
    t_mask = _full_mask(T, t_mask)

    w1 = nk.softmax(params.w1)
    w2 = nk.softmax(params.w2)
    w1_a, w1_t = nk.take(w1, 0), nk.take(w1, 1)
    w2_a, w2_t, w2_at = nk.take(w2, 0), nk.take(w2, 1), nk.take(w2, 2)

    if branch is None:
        branch = gate_branch(w1.data)
    if branch == 0:
        a_prime, a_prime_mask = nk.scale(A, w1_a), a_mask
        t_prime, t_prime_mask = nk.scale(cross_attn(A, T, params.cross, t_mask), w1_t), a_mask
    else:
        a_prime, a_prime_mask = nk.scale(cross_attn(T, A, params.cross, a_mask), w1_a), t_mask
        t_prime, t_prime_mask = nk.scale(T, w1_t), t_mask

    joint, joint_mask = concat_seq([a_prime, t_prime], [a_prime_mask, t_prime_mask])
    H = self_attn(joint, params.self_, joint_mask)
    H_prime, H_prime_mask = concat_seq(
        [nk.scale(A, w2_a), nk.scale(T, w2_t), nk.scale(H, w2_at)],
        [a_mask, t_mask, joint_mask],
    )
    out = nk.masked_mean(H_prime, H_prime_mask)
    return FusedVector(
        out,
        "modality_gated",
        {"d": d},
        info={
            "w1": w1.data.copy(),
            "w2": w2.data.copy(),
            "branch": branch,
            "H_len": H.shape[-2],
            "H_prime_len": H_prime.shape[-2],
        },
    )


def fused_dim(technique: str, d: int, sub_dim: int | None = None) -> int:
    """Backbone input size produced by a fusion technique (late fusion: per-modality ``d``)."""
    sizes = {
        "early": 2 * d,
        "cross_attention": 2 * d,
        "tensor": (d + 1) ** 2,
        "nl_gate": 2 * d,
        "modality_gated": d,
        "late": d,
    }
    if technique == "misa":
        if sub_dim is None:
            raise ValueError("misa needs sub_dim")
        return 4 * sub_dim
    try:
        return sizes[technique]
    except KeyError:
        raise ValueError(f"unknown fusion technique {technique!r}") from None
