"""Corpus representation, JSON Lines ingestion, and the synthetic corpus generator.

One utterance per line::

    {"id": "Ses01F_impro01_F000",
     "reference": "Excuse me.",
     "hypotheses": {"whisper-tiny": "excuse me", "w2v-base": "excuse my"},
     "label": "neutral",                       # class name/index, score, or [v, a, d]
     "audio_features": [[...], ...],           # optional, [frames, d_audio]
     "text_features": {"ground truth": [[...]], "whisper-tiny": [[...]]},  # optional
     "split": "train"}                         # optional: train | valid | test

Transcripts are normalised on load (lowercase, ASCII punctuation removed).
Utterances whose normalised reference is empty are dropped and counted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..metrics import IEMOCAP_CLASSES, normalize_text
from ..numkernel import CounterRNG

log = logging.getLogger(__name__)

GROUND_TRUTH = "ground truth"


class DatasetError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    reference: list[str]
    hypotheses: dict[str, list[str]]
    label: object
    audio_features: np.ndarray | None = None
    text_features: dict[str, np.ndarray] = field(default_factory=dict)
    split: str | None = None

    def transcript(self, source: str) -> list[str]:
        return self.reference if source == GROUND_TRUTH else self.hypotheses[source]


@dataclass
class Corpus:
    utterances: list[Utterance]
    sources: list[str]
    task: str = "classification"  # classification | regression
    classes: tuple[str, ...] | None = IEMOCAP_CLASSES
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def has_audio(self) -> bool:
        return all(u.audio_features is not None for u in self.utterances)


# --------------------------------------------------------------------------- text encoder


class HashedEmbedding:
    """Deterministic token -> vector table: each token seeds its own normal draw.

    Stands in for a pretrained text encoder wherever features are not supplied
    with the corpus. Any token, including ones produced by correction, has a
    well-defined embedding.
    """

    def __init__(self, dim: int, seed: int = 0, scale: float = 1.0):
        self.dim = dim
        self.seed = seed
        self.scale = scale
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        v = self._cache.get(token)
        if v is None:
            v = self.scale * CounterRNG(self.seed, f"tok/{token}").normal(self.dim)
            self._cache[token] = v
        return v

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((1, self.dim))  # empty transcript: one all-zero frame
        return np.stack([self.vector(t) for t in tokens])


# --------------------------------------------------------------------------- JSONL


def _parse_label(raw, line_no: int, task: str, classes):
    if task == "any":
        return raw
    if task == "classification":
        if isinstance(raw, str):
            name = raw.lower()
            if name == "excited":
                name = "happy"  # IEMOCAP convention: excited merged into happy
            if classes is None or name not in classes:
                raise DatasetError(f"line {line_no}: field 'label': unknown class {raw!r}")
            return classes.index(name)
        if isinstance(raw, int) and not isinstance(raw, bool):
            if classes is not None and not 0 <= raw < len(classes):
                raise DatasetError(f"line {line_no}: field 'label': class index {raw} out of range")
            return raw
        raise DatasetError(f"line {line_no}: field 'label': expected class name or index")
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    if isinstance(raw, list) and raw and all(isinstance(x, (int, float)) for x in raw):
        return [float(x) for x in raw]
    raise DatasetError(f"line {line_no}: field 'label': expected a number or list of numbers")


def _matrix(raw, line_no: int, name: str) -> np.ndarray:
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetError(f"line {line_no}: field '{name}': not a numeric matrix") from None
    if arr.ndim != 2 or 0 in arr.shape or not np.all(np.isfinite(arr)):
        raise DatasetError(f"line {line_no}: field '{name}': expected a non-empty finite [frames, dim] matrix")
    return arr


def load_dataset(
    path: str | Path,
    task: str = "classification",
    classes: Sequence[str] | None = IEMOCAP_CLASSES,
) -> Corpus:
    """Read and validate a JSONL corpus. Blank-reference utterances are dropped.

    ``task`` is classification, regression, or ``any`` (labels kept as given
    and not required; for transcript-only tools).
    """
    classes = tuple(classes) if classes is not None else None
    utterances: list[Utterance] = []
    sources: list[str] | None = None
    dropped = 0
    dims: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {line_no}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"line {line_no}: expected a JSON object")
            for key, kind in (("id", str), ("reference", str), ("hypotheses", dict)):
                if key not in obj:
                    raise DatasetError(f"line {line_no}: missing field '{key}'")
                if not isinstance(obj[key], kind):
                    raise DatasetError(f"line {line_no}: field '{key}' has the wrong type")
            if "label" not in obj and task != "any":
                raise DatasetError(f"line {line_no}: missing field 'label'")
            reference = normalize_text(obj["reference"])
            if not reference:
                dropped += 1
                continue
            hyps = {}
            for name, text in obj["hypotheses"].items():
                if not isinstance(text, str):
                    raise DatasetError(f"line {line_no}: field 'hypotheses.{name}' must be a string")
                hyps[name] = normalize_text(text)
            if sources is None:
                sources = list(hyps)
            elif list(hyps) != sources:
                raise DatasetError(f"line {line_no}: field 'hypotheses': sources {list(hyps)} differ from {sources}")
            audio = None
            if obj.get("audio_features") is not None:
                audio = _matrix(obj["audio_features"], line_no, "audio_features")
                if dims.setdefault("audio", audio.shape[1]) != audio.shape[1]:
                    raise DatasetError(f"line {line_no}: field 'audio_features': dim {audio.shape[1]} != {dims['audio']}")
            text_feats = {}
            for name, mat in (obj.get("text_features") or {}).items():
                arr = _matrix(mat, line_no, f"text_features.{name}")
                if dims.setdefault("text", arr.shape[1]) != arr.shape[1]:
                    raise DatasetError(f"line {line_no}: field 'text_features.{name}': dim {arr.shape[1]} != {dims['text']}")
                text_feats[name] = arr
            split = obj.get("split")
            if split is not None and split not in ("train", "valid", "test"):
                raise DatasetError(f"line {line_no}: field 'split' must be train, valid or test")
            utterances.append(
                Utterance(
                    obj["id"],
                    reference,
                    hyps,
                    _parse_label(obj.get("label"), line_no, task, classes),
                    audio,
                    text_feats,
                    split,
                )
            )
    if dropped:
        log.warning("%s: dropped %d utterance(s) with blank reference", path, dropped)
    return Corpus(utterances, sources or [], task, classes if task == "classification" else None, dropped)


def utterance_to_json(u: Utterance, corpus: Corpus) -> dict:
    label = u.label
    if corpus.task == "classification" and corpus.classes is not None:
        label = corpus.classes[int(label)]
    obj = {
        "id": u.id,
        "reference": " ".join(u.reference),
        "hypotheses": {k: " ".join(v) for k, v in u.hypotheses.items()},
        "label": label,
    }
    if u.audio_features is not None:
        obj["audio_features"] = u.audio_features.tolist()
    if u.text_features:
        obj["text_features"] = {k: v.tolist() for k, v in u.text_features.items()}
    if u.split is not None:
        obj["split"] = u.split
    return obj


def save_dataset(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in corpus.utterances:
            fh.write(json.dumps(utterance_to_json(u, corpus), separators=(",", ":")) + "\n")


# --------------------------------------------------------------------------- synthetic


@dataclass
class SynthSpec:
    n: int = 500
    vocab_size: int = 200
    seq_len_range: tuple[int, int] = (8, 12)
    n_channels: int = 1
    corruption_rates: Sequence[float] = (0.15,)
    n_classes: int = 4
    words_per_class: int = 8
    emotion_word_prob: float = 0.35
    audio_dim: int = 16
    audio_len_range: tuple[int, int] = (6, 10)
    audio_signal: float = 0.5
    error_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # substitute, delete, insert
    task: str = "classification"  # or "regression-scalar" / "regression-vad"
    seed: int = 0


def _corrupt(tokens: list[str], rate: float, mix, vocab: list[str], rng: CounterRNG) -> list[str]:
    """Per reference token: substitute, delete, or keep-and-insert-after with
    probabilities rate*mix[0], rate*mix[1], rate*mix[2]."""
    p_sub, p_del, p_ins = (rate * m for m in mix)
    u = rng.uniform(len(tokens))
    picks = rng.integers(len(vocab) - 1, len(tokens))
    extra = rng.integers(len(vocab), len(tokens))
    out = []
    for tok, x, pick, ins in zip(tokens, u, picks, extra):
        if x < p_sub:
            idx = vocab.index(tok)
            out.append(vocab[pick if pick < idx else pick + 1])  # any token but the original
        elif x < p_sub + p_del:
            continue
        elif x < p_sub + p_del + p_ins:
            out.append(tok)
            out.append(vocab[ins])
        else:
            out.append(tok)
    return out


def synth_corpus(spec: SynthSpec | None = None, **overrides) -> Corpus:
    """Generate a labelled corpus with class signal in both modalities and
    ``n_channels`` independently corrupted ASR-like transcripts.

    Each class owns ``words_per_class`` vocabulary words; every reference token
    is one of its own class's words with probability ``emotion_word_prob``,
    otherwise a uniform draw from the neutral remainder of the vocabulary.
    Audio frames are a class-specific mean direction times ``audio_signal``
    plus unit Gaussian noise. Text features are not stored: they come from a
    :class:`HashedEmbedding` applied to whichever transcript is being used.
    """
    spec = spec or SynthSpec()
    if overrides:
        spec = SynthSpec(**{**spec.__dict__, **overrides})
    rates = list(spec.corruption_rates)
    if len(rates) == 1 and spec.n_channels > 1:
        rates = rates * spec.n_channels
    if len(rates) != spec.n_channels:
        raise ValueError(f"{spec.n_channels} channels but {len(rates)} corruption rates")
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ValueError(f"corruption rates must lie in [0, 1], got {rates}")
    if abs(sum(spec.error_mix) - 1.0) > 1e-9 or min(spec.error_mix) < 0:
        raise ValueError("error_mix must be non-negative and sum to 1")
    if spec.n < 1 or spec.vocab_size < 2 or spec.seq_len_range[0] < 1 or spec.audio_dim < 1:
        raise ValueError("sizes must be positive and vocab_size >= 2")
    if spec.n_classes * spec.words_per_class >= spec.vocab_size:
        raise ValueError("vocabulary too small for the class word blocks")

    root = CounterRNG(spec.seed, "synth")
    vocab = [f"w{i:04d}" for i in range(spec.vocab_size)]
    class_words = [
        vocab[c * spec.words_per_class : (c + 1) * spec.words_per_class] for c in range(spec.n_classes)
    ]
    neutral = vocab[spec.n_classes * spec.words_per_class :]
    directions = root.child("audio-dirs").normal((spec.n_classes, spec.audio_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    directions *= np.sqrt(spec.audio_dim)  # unit per-coordinate scale

    labels_rng = root.child("labels")
    classes = labels_rng.integers(spec.n_classes, spec.n)
    names = [f"asr{k + 1:02d}" for k in range(spec.n_channels)]
    utterances = []
    for i in range(spec.n):
        c = int(classes[i])
        urng = root.child(f"utt{i}")
        lo, hi = spec.seq_len_range
        length = lo + int(urng.integers(hi - lo + 1))
        is_emotion = urng.uniform(length) < spec.emotion_word_prob
        own = urng.integers(spec.words_per_class, length)
        other = urng.integers(len(neutral), length)
        ref = [class_words[c][o] if e else neutral[x] for e, o, x in zip(is_emotion, own, other)]

        alo, ahi = spec.audio_len_range
        frames = alo + int(urng.integers(ahi - alo + 1))
        audio = spec.audio_signal * directions[c] + urng.child("audio").normal((frames, spec.audio_dim))

        hyps = {
            name: _corrupt(ref, rate, spec.error_mix, vocab, urng.child(f"chan/{name}"))
            for name, rate in zip(names, rates)
        }
        utterances.append(Utterance(f"syn{i:05d}", ref, hyps, _synth_label(c, spec, urng), audio))

    task = "classification" if spec.task == "classification" else "regression"
    return Corpus(
        utterances,
        names,
        task,
        tuple(f"class{c}" for c in range(spec.n_classes)) if task == "classification" else None,
        0,
        {"synthetic": True, "channel_rates": dict(zip(names, rates)), "seed": spec.seed},
    )


def _synth_label(c: int, spec: SynthSpec, rng: CounterRNG):
    if spec.task == "classification":
        return c
    k = spec.n_classes
    if spec.task == "regression-scalar":
        centre = -3.0 + 6.0 * c / (k - 1)
        return float(np.clip(centre + 0.3 * rng.child("label").normal(), -3.0, 3.0))
    if spec.task == "regression-vad":
        centre = 1.0 + 6.0 * c / (k - 1)
        noise = 0.3 * rng.child("label").normal(3)
        return [float(np.clip(centre + noise[0], 1, 7)), float(np.clip(4.0 + noise[1], 1, 7)),
                float(np.clip(7.0 - centre + 1.0 + noise[2], 1, 7))]
    raise ValueError(f"unknown synthetic task {spec.task!r}")
