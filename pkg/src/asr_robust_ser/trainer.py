"""Backbone SER model, losses, AdamW, k-fold splits and the seeded training loop."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fusion as F
from . import numkernel as nk
from .attention import MHAParams
from .numkernel import CounterRNG, DimensionError, Tensor

log = logging.getLogger(__name__)

HIDDEN = (128, 16)


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------- backbone


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: CounterRNG, n_in: int, n_out: int) -> "Dense":
        bound = 1.0 / math.sqrt(n_in)
        return cls(nk.parameter(rng.uniform((n_in, n_out), -bound, bound)),
                   nk.parameter(rng.uniform((n_out,), -bound, bound)))

    def __call__(self, x: Tensor) -> Tensor:
        return nk.add_bias(nk.matmul(x, self.weight), self.bias)


@dataclass
class BackboneParams:
    """dense(in→128) → ReLU → dense(128→16) → ReLU → head(16→K or m)."""

    dense1: Dense
    dense2: Dense
    head: Dense

    @classmethod
    def init(cls, rng: CounterRNG, in_dim: int, out_dim: int, hidden: Sequence[int] = HIDDEN) -> "BackboneParams":
        h1, h2 = hidden
        return cls(
            Dense.init(rng.child("dense1"), in_dim, h1),
            Dense.init(rng.child("dense2"), h1, h2),
            Dense.init(rng.child("head"), h2, out_dim),
        )

    @property
    def in_dim(self) -> int:
        return self.dense1.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.head.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.dense1.weight, self.dense1.bias, self.dense2.weight, self.dense2.bias,
                self.head.weight, self.head.bias]

    def count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def backbone_forward(x: Tensor, params: BackboneParams) -> Tensor:
    """Logits (classification) or raw predictions (regression); no output activation."""
    if x.shape[-1] != params.in_dim:
        raise DimensionError(f"backbone expects input dim {params.in_dim}, got {x.shape[-1]}")
    single = x.ndim == 1
    if single:
        x = nk.reshape(x, (1, -1))
    h = nk.relu(params.dense1(x))
    h = nk.relu(params.dense2(h))
    out = params.head(h)
    return nk.reshape(out, (params.out_dim,)) if single else out


# --------------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = nk.reshape(logits, (1, -1))
        labels = labels.reshape(1)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"{logits.shape[0]} outputs but labels of shape {labels.shape}")
    picked = nk.gather_rows(nk.log_softmax(logits, axis=-1), labels)
    return nk.scale(nk.sum_all(picked), -1.0 / logits.shape[0])


def mse(outputs: Tensor, targets) -> Tensor:
    """Squared error summed over output dims, averaged over the batch."""
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.ndim == 1:
        outputs = nk.reshape(outputs, (1, -1))
        targets = targets.reshape(1, -1)
    targets = targets.reshape(outputs.shape[0], -1)
    if targets.shape != outputs.shape:
        raise DimensionError(f"outputs {outputs.shape} vs targets {targets.shape}")
    diff = nk.add_constant(outputs, -targets)
    return nk.scale(nk.sum_all(nk.square(diff)), 1.0 / outputs.shape[0])


def loss(outputs: Tensor, labels, kind: str) -> Tensor:
    if kind == "classification":
        return cross_entropy(outputs, labels)
    if kind == "regression":
        return mse(outputs, labels)
    raise ValueError(f"unknown task kind {kind!r}")


# --------------------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], grads: dict[Tensor, np.ndarray], state: OptimizerState) -> None:
    """One AdamW update in place: decay ``w -= lr*wd*w`` decoupled from the
    bias-corrected moment step."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        w = p.data
        if state.weight_decay:
            w = w - state.lr * state.weight_decay * w
        w = w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p._assign(w)


def adam_step(params: Sequence[Tensor], grads: dict[Tensor, np.ndarray], state: OptimizerState) -> None:
    """Plain Adam (no weight decay of any kind); reference for ``adamw_step``."""
    state.step += 1
    b1, b2 = state.betas
    for i, p in enumerate(params):
        g = grads.get(p, np.zeros_like(p.data))
        state.m[i] = b1 * state.m.get(i, np.zeros_like(g)) + (1.0 - b1) * g
        state.v[i] = b2 * state.v.get(i, np.zeros_like(g)) + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1**state.step)
        v_hat = state.v[i] / (1.0 - b2**state.step)
        p._assign(p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


# --------------------------------------------------------------------------- splits


def kfold_split(n: int, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    if k < 2 or n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    perm = CounterRNG(seed, "kfold").permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def holdout_split(n: int, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    perm = CounterRNG(seed, "holdout").permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# --------------------------------------------------------------------------- data


@dataclass
class Sample:
    text: np.ndarray | None  # [lt, d_text]
    audio: np.ndarray | None  # [la, d_audio]
    label: object  # class index, scalar, or vector


@dataclass
class Batch:
    text: np.ndarray | None
    text_mask: np.ndarray | None
    audio: np.ndarray | None
    audio_mask: np.ndarray | None
    labels: np.ndarray


def _pad(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    longest = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), longest, seqs[0].shape[1]))
    mask = np.zeros((len(seqs), longest), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def collate(samples: Sequence[Sample]) -> Batch:
    text = mask_t = audio = mask_a = None
    if samples[0].text is not None:
        text, mask_t = _pad([s.text for s in samples])
    if samples[0].audio is not None:
        audio, mask_a = _pad([s.audio for s in samples])
    return Batch(text, mask_t, audio, mask_a, np.asarray([s.label for s in samples]))


# --------------------------------------------------------------------------- models


class TextOnlyModel:
    """Mean-pooled text features straight into the backbone."""

    technique = "text_only"

    def __init__(self, rng: CounterRNG, d_text: int, out_dim: int, hidden=HIDDEN):
        self.backbone = BackboneParams.init(rng.child("backbone"), d_text, out_dim, hidden)

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def forward(self, batch: Batch):
        x = nk.masked_mean(Tensor(batch.text), batch.text_mask)
        return backbone_forward(x, self.backbone), None, {}


class LateFusionModel:
    """Separate audio and text backbones; the prediction is their mean output.

    Training sums the two losses. The branches share no parameters and AdamW is
    per-coordinate, so this is the same as training each model on its own.
    """

    technique = "late"

    def __init__(self, rng: CounterRNG, d_audio: int, d_text: int, out_dim: int, hidden=HIDDEN):
        self.audio = BackboneParams.init(rng.child("audio"), d_audio, out_dim, hidden)
        self.text = BackboneParams.init(rng.child("text"), d_text, out_dim, hidden)

    def parameters(self) -> list[Tensor]:
        return self.audio.parameters() + self.text.parameters()

    def forward(self, batch: Batch):
        out_a = backbone_forward(nk.masked_mean(Tensor(batch.audio), batch.audio_mask), self.audio)
        out_t = backbone_forward(nk.masked_mean(Tensor(batch.text), batch.text_mask), self.text)
        return F.late_fusion(out_a, out_t), None, {"branch_outputs": (out_a, out_t)}


class FusionModel:
    """Trainable projections to the shared dim ``d``, a fusion technique, the backbone."""

    def __init__(
        self,
        rng: CounterRNG,
        technique: str,
        d_audio: int,
        d_text: int,
        out_dim: int,
        d: int = 128,
        heads: int = 8,
        sub_dim: int = 16,
        aux_weights: tuple[float, float] = (0.1, 0.1),
        hidden=HIDDEN,
    ):
        if technique not in F.TECHNIQUES or technique == "late":
            raise ValueError(f"FusionModel does not handle {technique!r}")
        self.technique = technique
        self.proj_audio = nk.init_uniform(rng.child("proj_audio"), (d_audio, d))
        self.proj_text = nk.init_uniform(rng.child("proj_text"), (d_text, d))
        frng = rng.child(technique)
        self.fusion_params = None
        if technique == "cross_attention":
            self.fusion_params = MHAParams.init(frng, d, heads)
        elif technique == "nl_gate":
            self.fusion_params = F.NLGateParams.init(frng, d, heads)
        elif technique == "misa":
            self.fusion_params = F.MISAParams.init(frng, d, sub_dim, *aux_weights)
        elif technique == "modality_gated":
            self.fusion_params = F.ModalityGateParams.init(frng, d, heads)
        in_dim = F.fused_dim(technique, d, sub_dim)
        self.backbone = BackboneParams.init(rng.child("backbone"), in_dim, out_dim, hidden)

    def parameters(self) -> list[Tensor]:
        extra = self.fusion_params.parameters() if self.fusion_params is not None else []
        return [self.proj_audio, self.proj_text] + extra + self.backbone.parameters()

    def fuse(self, batch: Batch) -> F.FusedVector:
        A = nk.matmul(Tensor(batch.audio), self.proj_audio)
        T = nk.matmul(Tensor(batch.text), self.proj_text)
        am, tm = batch.audio_mask, batch.text_mask
        t = self.technique
        if t == "early":
            return F.early_fusion(A, T, am, tm)
        if t == "tensor":
            return F.tensor_fusion(A, T, am, tm)
        if t == "cross_attention":
            return F.cross_attention_fusion(A, T, self.fusion_params, am, tm)
        if t == "nl_gate":
            return F.nl_gate_fusion(A, T, self.fusion_params, am, tm)
        if t == "misa":
            return F.misa_fusion(A, T, self.fusion_params, am, tm)
        return F.modality_gated_fusion(A, T, self.fusion_params, am, tm)

    def forward(self, batch: Batch):
        fused = self.fuse(batch)
        aux = None
        if fused.aux_losses:
            weights = fused.info["weights"]
            terms = [nk.scale(v, weights[k]) for k, v in fused.aux_losses.items()]
            aux = terms[0]
            for term in terms[1:]:
                aux = nk.add(aux, term)
        return backbone_forward(fused.values, self.backbone), aux, fused.info


def build_model(
    technique: str,
    rng: CounterRNG,
    d_text: int,
    d_audio: int | None,
    out_dim: int,
    d: int = 128,
    heads: int = 8,
    sub_dim: int = 16,
    aux_weights: tuple[float, float] = (0.1, 0.1),
):
    if technique == "text_only":
        return TextOnlyModel(rng, d_text, out_dim)
    if d_audio is None:
        raise ValueError(f"{technique} fusion needs audio features")
    if technique == "late":
        return LateFusionModel(rng, d_audio, d_text, out_dim)
    return FusionModel(rng, technique, d_audio, d_text, out_dim, d, heads, sub_dim, aux_weights)


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 1e-5
    folds: str | int = 5  # k for k-fold, or "holdout"

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr, epochs must be non-negative and batch_size positive")
        if not (self.folds == "holdout" or (isinstance(self.folds, int) and self.folds >= 2)):
            raise ValueError(f"folds must be an integer >= 2 or 'holdout', got {self.folds!r}")


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    gate_trace: list[dict] = field(default_factory=list)


def train(
    samples: Sequence[Sample],
    model,
    config: TrainConfig,
    kind: str = "classification",
    record_gates: bool = False,
    on_epoch_end=None,
) -> TrainResult:
    """Seeded mini-batch AdamW training.

    Each epoch visits the samples in a fresh seeded permutation; the final
    partial batch is kept. ``history`` holds the mean loss per epoch.
    ``on_epoch_end(epoch, model)`` is called after each epoch if given.
    """
    if not samples:
        raise TrainingError("empty training set")
    params = model.parameters()
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    rng = CounterRNG(config.seed, "shuffle")
    history = []
    trace = []
    n = len(samples)
    for epoch in range(config.epochs):
        order = rng.child(f"epoch{epoch}").permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = collate([samples[i] for i in order[start : start + config.batch_size]])
            try:
                with nk.GradTape() as tape:
                    outputs, aux, info = model.forward(batch)
                    if isinstance(model, LateFusionModel):
                        out_a, out_t = info["branch_outputs"]
                        value = nk.add(loss(out_a, batch.labels, kind), loss(out_t, batch.labels, kind))
                    else:
                        value = loss(outputs, batch.labels, kind)
                    if aux is not None:
                        value = nk.add(value, aux)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}: {exc}") from exc
            step_loss = value.item()
            if not math.isfinite(step_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = nk.backward(value, tape)
            adamw_step(params, grads, state)
            total += step_loss * len(batch.labels)
            if record_gates and "w1" in info:
                trace.append({
                    "epoch": epoch,
                    "w1": info["w1"],
                    "w2": info["w2"],
                    "branch": info["branch"],
                    "w1_after": nk.softmax(model.fusion_params.w1).data.copy(),
                    "w2_after": nk.softmax(model.fusion_params.w2).data.copy(),
                })
        history.append({"epoch": epoch, "loss": total / n})
        log.debug("epoch %d loss %.6f", epoch, total / n)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)
    return TrainResult(model, history, trace)


def predict(model, samples: Sequence[Sample], batch_size: int = 256) -> np.ndarray:
    outs = []
    for start in range(0, len(samples), batch_size):
        outputs, _, _ = model.forward(collate(samples[start : start + batch_size]))
        outs.append(outputs.data)
    return np.concatenate(outs, axis=0)


# --------------------------------------------------------------------------- checkpoints

_MAGIC = b"ASRSERCK"


def named_parameters(model) -> dict[str, Tensor]:
    return {f"p{i:03d}": p for i, p in enumerate(model.parameters())}


def save_checkpoint(path: str | Path, model, meta: dict | None = None) -> None:
    """Magic, little-endian u64 header length, JSON header, then raw '<f8' values."""
    named = named_parameters(model)
    header = {
        "params": [{"name": k, "shape": list(t.shape)} for k, t in named.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in named.values():
            fh.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (size,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + size])
    offset = 16 + size
    out = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    return out, header["meta"]


def restore(model, values: dict[str, np.ndarray]) -> None:
    for name, p in named_parameters(model).items():
        p._assign(values[name])
