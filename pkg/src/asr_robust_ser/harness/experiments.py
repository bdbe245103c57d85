"""Benchmark runners: text-only per transcript source, fusion techniques per source,
and the correction + modality-gated framework against the best single source."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import metrics as M
from ..correction import correct_corpus, make_corrector
from ..numkernel import CounterRNG
from ..trainer import Sample, build_model, holdout_split, kfold_split, predict, train
from .config import ExperimentConfig
from .data import GROUND_TRUTH, Corpus, HashedEmbedding, load_dataset, synth_corpus

log = logging.getLogger(__name__)


@dataclass
class ResultRow:
    corpus: str
    method: str
    source: str
    wer: float
    metrics: dict[str, float]
    seed: int
    fold_metrics: list[dict[str, float]] = field(default_factory=list)


@dataclass
class FusionResult:
    rows: list[ResultRow]
    max_diff: dict[str, dict[str, float]]  # technique -> metric -> max(ground truth - source)


def prepare_corpus(config: ExperimentConfig) -> Corpus:
    if config.synth is not None:
        corpus = synth_corpus(config.synth)
    else:
        corpus = load_dataset(config.corpus, config.profile.task,
                              None if config.profile.task == "regression" else M.IEMOCAP_CLASSES)
    if config.sources:
        missing = set(config.sources) - set(corpus.sources)
        if missing:
            raise ValueError(f"configured sources not in corpus: {sorted(missing)}")
        corpus.sources = list(config.sources)
    return corpus


def corpus_tag(corpus: Corpus, config: ExperimentConfig) -> str:
    return ("synthetic/" if corpus.meta.get("synthetic") else "") + config.profile.name


def source_wer(corpus: Corpus, source: str, transcripts: dict[str, list[str]] | None = None) -> float:
    if source == GROUND_TRUTH and transcripts is None:
        return 0.0
    refs = [u.reference for u in corpus.utterances]
    if transcripts is not None:
        hyps = [transcripts[u.id] for u in corpus.utterances]
    else:
        hyps = [u.hypotheses[source] for u in corpus.utterances]
    return M.corpus_wer(refs, hyps)


def _encoder(corpus: Corpus, config: ExperimentConfig) -> HashedEmbedding:
    enc = corpus.meta.get("_encoder")
    if enc is None or enc.dim != config.text_dim or enc.seed != config.text_seed:
        enc = HashedEmbedding(config.text_dim, config.text_seed)
        corpus.meta["_encoder"] = enc
    return enc


def build_samples(
    corpus: Corpus,
    config: ExperimentConfig,
    source: str,
    transcripts: dict[str, list[str]] | None = None,
    need_audio: bool = False,
) -> list[Sample]:
    enc = _encoder(corpus, config)
    samples = []
    for u in corpus.utterances:
        if transcripts is not None:
            text = enc.encode(transcripts[u.id])
        elif source in u.text_features:
            text = u.text_features[source]
        elif u.text_features:
            raise ValueError(f"utterance {u.id}: text features missing for source {source!r}")
        else:
            text = enc.encode(u.transcript(source))
        if need_audio and u.audio_features is None:
            raise ValueError(f"utterance {u.id}: audio features missing")
        samples.append(Sample(text, u.audio_features if need_audio else None, u.label))
    return samples


def _splits(corpus: Corpus, config: ExperimentConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    n = len(corpus)
    folds = config.train.folds
    if folds == "holdout":
        tags = [u.split for u in corpus.utterances]
        if all(t is not None for t in tags):
            test = np.array([i for i, t in enumerate(tags) if t == "test"])
            fit = np.array([i for i, t in enumerate(tags) if t != "test"])
            if len(test) and len(fit):
                return [(fit, test)]
        return [holdout_split(n, 0.2, config.seed)]
    parts = kfold_split(n, folds, config.seed)
    return [(np.sort(np.concatenate([p for j, p in enumerate(parts) if j != k])), parts[k]) for k in range(len(parts))]


def score(outputs: np.ndarray, labels: Sequence, config: ExperimentConfig) -> dict[str, float]:
    prof = config.profile
    if prof.task == "classification":
        return {"acc4": M.accuracy(outputs.argmax(axis=1), np.asarray(labels), "acc4")}
    y = np.asarray(labels, dtype=np.float64).reshape(len(labels), -1)
    if prof.out_dim == 1:
        p = outputs[:, 0]
        return {"acc2": M.accuracy(p, y[:, 0], "acc2"), "acc7": M.accuracy(p, y[:, 0], "acc7"),
                "mae": M.mae(p, y[:, 0])}
    cccs = [M.ccc(outputs[:, k], y[:, k]) for k in range(3)]
    return {"ccc_v": cccs[0], "ccc_a": cccs[1], "ccc_d": cccs[2], "ccc": float(np.mean(cccs))}


def evaluate(
    corpus: Corpus,
    config: ExperimentConfig,
    technique: str,
    source: str,
    transcripts: dict[str, list[str]] | None = None,
) -> tuple[dict[str, float], list[dict[str, float]]]:
    """Cross-validated (or held-out) metrics for one (technique, transcript) cell."""
    samples = build_samples(corpus, config, source, transcripts, need_audio=technique != "text_only")
    d_text = samples[0].text.shape[1]
    d_audio = samples[0].audio.shape[1] if samples[0].audio is not None else None
    fold_scores = []
    for fit, test in _splits(corpus, config):
        model = build_model(
            technique,
            CounterRNG(config.seed, f"model/{technique}"),
            d_text,
            d_audio,
            config.profile.out_dim,
            config.fusion.d,
            config.fusion.heads,
            config.fusion.sub_dim,
            config.fusion.aux_weights,
        )
        train([samples[i] for i in fit], model, config.train, config.profile.task)
        held = [samples[i] for i in test]
        fold_scores.append(score(predict(model, held), [s.label for s in held], config))
    mean = {k: float(np.mean([f[k] for f in fold_scores])) for k in fold_scores[0]}
    return mean, fold_scores


def _row(corpus, config, method, source, wer, scores) -> ResultRow:
    mean, folds = scores
    return ResultRow(corpus_tag(corpus, config), method, source, wer, mean, config.seed,
                     folds if len(folds) > 1 else [])


def run_text_only(corpus: Corpus, config: ExperimentConfig) -> list[ResultRow]:
    """One row per transcript source plus ground truth, all trained under the same seed."""
    rows = []
    for source in [GROUND_TRUTH] + list(corpus.sources):
        log.info("text-only: %s", source)
        rows.append(_row(corpus, config, "text_only", source, source_wer(corpus, source),
                         evaluate(corpus, config, "text_only", source)))
    return rows


def max_diff(rows: Sequence[ResultRow]) -> dict[str, float]:
    """Per metric, the largest (ground truth − source) over the ASR sources."""
    gt = next(r for r in rows if r.source == GROUND_TRUTH)
    others = [r for r in rows if r.source != GROUND_TRUTH]
    return {k: max(gt.metrics[k] - r.metrics[k] for r in others) for k in gt.metrics} if others else {}


def run_fusion(corpus: Corpus, config: ExperimentConfig) -> FusionResult:
    if not corpus.has_audio:
        raise ValueError("fusion benchmarks need audio features for every utterance")
    rows: list[ResultRow] = []
    diffs = {}
    for technique in config.fusion.techniques:
        block = []
        for source in [GROUND_TRUTH] + list(corpus.sources):
            log.info("fusion %s: %s", technique, source)
            block.append(_row(corpus, config, technique, source, source_wer(corpus, source),
                              evaluate(corpus, config, technique, source)))
        rows.extend(block)
        diffs[technique] = max_diff(block)
    return FusionResult(rows, diffs)


def best_source(corpus: Corpus) -> tuple[str, float]:
    wers = {s: source_wer(corpus, s) for s in corpus.sources}
    name = min(corpus.sources, key=lambda s: (wers[s], corpus.sources.index(s)))
    return name, wers[name]


def run_framework(corpus: Corpus, config: ExperimentConfig) -> list[ResultRow]:
    """Best single transcript (text-only), ground truth (text-only), and corrected
    transcripts with modality-gated fusion."""
    if not corpus.sources:
        raise ValueError("framework run needs ASR hypotheses")
    if not corpus.has_audio:
        raise ValueError("framework run needs audio features for every utterance")
    best, best_wer = best_source(corpus)
    corrected = correct_corpus(corpus.utterances, make_corrector(config.corrector), corpus.sources)
    label = "consensus" if config.corrector.kind == "consensus" else "external"
    return [
        _row(corpus, config, "best trans", best, best_wer, evaluate(corpus, config, "text_only", best)),
        _row(corpus, config, "ground truth", GROUND_TRUTH, 0.0, evaluate(corpus, config, "text_only", GROUND_TRUTH)),
        _row(corpus, config, "ours", label, source_wer(corpus, label, corrected),
             evaluate(corpus, config, "modality_gated", label, corrected)),
    ]
