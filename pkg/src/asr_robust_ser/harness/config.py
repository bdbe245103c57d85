"""Corpus profiles and the experiment configuration document.

A config is one YAML (or JSON) mapping::

    profile: iemocap-like          # iemocap-like | mosi-like | podcast-like
    seed: 0
    corpus: data/corpus.jsonl      # or a `synth:` block (keys of SynthSpec)
    synth: {n: 500, n_channels: 11, corruption_rates: [0.15]}
    sources: [asr01, asr02]        # optional subset/order of transcript sources
    train: {lr: 5e-4, epochs: 100, batch_size: 64, folds: 5}   # overrides the profile
    fusion:
      techniques: [early, late, cross_attention, tensor, nl_gate, misa, modality_gated]
      d: 128
      heads: 8
      sub_dim: 16
      aux_weights: [0.1, 0.1]
    text_encoder: {dim: 768, seed: 0}   # used when a corpus carries no text features
    corrector: {kind: consensus, command: null, endpoint: null, timeout_ms: 10000,
                fallback: true, max_in_flight: 4}
    output: {dir: results, format: markdown}

Only the external corrector endpoint may come from the environment
(``ASR_SER_CORRECTOR_URL``, ``ASR_SER_CORRECTOR_CMD``).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..correction import CorrectorBackend
from ..fusion import TECHNIQUES
from ..trainer import TrainConfig
from .data import SynthSpec


@dataclass(frozen=True)
class Profile:
    name: str
    task: str
    out_dim: int
    metrics: tuple[str, ...]
    primary: str
    higher_is_better: bool
    lr: float
    epochs: int
    folds: str | int


PROFILES = {
    "iemocap-like": Profile("iemocap-like", "classification", 4, ("acc4",), "acc4", True, 5e-4, 100, 5),
    "mosi-like": Profile("mosi-like", "regression", 1, ("acc2", "acc7", "mae"), "mae", False, 5e-4, 100, "holdout"),
    "podcast-like": Profile(
        "podcast-like", "regression", 3, ("ccc_v", "ccc_a", "ccc_d", "ccc"), "ccc", True, 1e-4, 30, "holdout"
    ),
}

SYNTH_TASK = {"iemocap-like": "classification", "mosi-like": "regression-scalar", "podcast-like": "regression-vad"}


@dataclass
class FusionConfig:
    techniques: tuple[str, ...] = tuple(TECHNIQUES)
    d: int = 128
    heads: int = 8
    sub_dim: int = 16
    aux_weights: tuple[float, float] = (0.1, 0.1)

    def __post_init__(self):
        unknown = set(self.techniques) - set(TECHNIQUES)
        if unknown:
            raise ValueError(f"unknown fusion techniques: {sorted(unknown)}")
        if self.d % self.heads:
            raise ValueError(f"fusion dim {self.d} not divisible by {self.heads} heads")


@dataclass
class ExperimentConfig:
    profile: Profile = PROFILES["iemocap-like"]
    seed: int = 0
    corpus: str | None = None
    synth: SynthSpec | None = None
    sources: list[str] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    text_dim: int = 768
    text_seed: int = 0
    corrector: CorrectorBackend = field(default_factory=CorrectorBackend)
    output_dir: str = "results"
    output_format: str = "markdown"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        synth = dataclasses.replace(self.synth, seed=seed) if self.synth is not None else None
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed), synth=synth)


_TOP_KEYS = {"profile", "seed", "corpus", "synth", "sources", "train", "fusion", "text_encoder", "corrector", "output"}


def _check_keys(section: str, given: dict, allowed) -> None:
    extra = set(given) - set(allowed)
    if extra:
        raise ValueError(f"config section '{section}': unknown keys {sorted(extra)}")


def config_from_dict(doc: dict, seed: int | None = None) -> ExperimentConfig:
    doc = dict(doc or {})
    _check_keys("<top>", doc, _TOP_KEYS)
    name = doc.get("profile", "iemocap-like")
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    profile = PROFILES[name]
    seed = int(doc.get("seed", 0) if seed is None else seed)

    train_doc = dict(doc.get("train") or {})
    _check_keys("train", train_doc, [f.name for f in dataclasses.fields(TrainConfig)])
    train_doc.setdefault("lr", profile.lr)
    train_doc.setdefault("epochs", profile.epochs)
    train_doc.setdefault("folds", profile.folds)
    train_doc["seed"] = seed
    train = TrainConfig(**train_doc)

    fusion_doc = dict(doc.get("fusion") or {})
    _check_keys("fusion", fusion_doc, [f.name for f in dataclasses.fields(FusionConfig)])
    if "techniques" in fusion_doc:
        fusion_doc["techniques"] = tuple(fusion_doc["techniques"])
    if "aux_weights" in fusion_doc:
        fusion_doc["aux_weights"] = tuple(fusion_doc["aux_weights"])
    fusion = FusionConfig(**fusion_doc)

    synth = None
    if doc.get("synth") is not None:
        synth_doc = dict(doc["synth"])
        _check_keys("synth", synth_doc, [f.name for f in dataclasses.fields(SynthSpec)])
        for key in ("seq_len_range", "audio_len_range", "error_mix"):
            if key in synth_doc:
                synth_doc[key] = tuple(synth_doc[key])
        synth_doc.setdefault("task", SYNTH_TASK[name])
        synth_doc["seed"] = seed
        synth = SynthSpec(**synth_doc)
    if synth is None and not doc.get("corpus"):
        raise ValueError("config needs either 'corpus' or 'synth'")

    enc = dict(doc.get("text_encoder") or {})
    _check_keys("text_encoder", enc, ["dim", "seed"])

    corr = dict(doc.get("corrector") or {})
    _check_keys("corrector", corr, [f.name for f in dataclasses.fields(CorrectorBackend)])
    if corr.get("kind") == "http" and not corr.get("endpoint"):
        corr["endpoint"] = os.environ.get("ASR_SER_CORRECTOR_URL")
    if corr.get("kind") == "process" and not corr.get("command"):
        corr["command"] = os.environ.get("ASR_SER_CORRECTOR_CMD")
    corrector = CorrectorBackend(**corr)

    out = dict(doc.get("output") or {})
    _check_keys("output", out, ["dir", "format"])
    fmt = out.get("format", "markdown")
    if fmt not in ("markdown", "csv"):
        raise ValueError(f"output format must be markdown or csv, got {fmt!r}")

    return ExperimentConfig(
        profile=profile,
        seed=seed,
        corpus=doc.get("corpus"),
        synth=synth,
        sources=doc.get("sources"),
        train=train,
        fusion=fusion,
        text_dim=int(enc.get("dim", synth.audio_dim if synth is not None else 768)),
        text_seed=int(enc.get("seed", 0)),
        corrector=corrector,
        output_dir=str(out.get("dir", "results")),
        output_format=fmt,
    )


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_dict(doc, seed)
