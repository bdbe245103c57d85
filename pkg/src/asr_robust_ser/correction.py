"""N-best combination across ASR systems and transcript correction backends.

The built-in corrector aligns all hypotheses into a confusion network and takes
a per-slot plurality vote. External correctors (a child process or an HTTP
service) receive every hypothesis of an utterance and return one corrected
transcript; the wire format is documented in ``docs/corrector_protocol.md``.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import shlex
import subprocess
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .metrics import corpus_wer, normalize_text

log = logging.getLogger(__name__)

NULL = None  # the empty arc of a confusion-network slot


@dataclass
class HypothesisSet:
    utterance_id: str
    hypotheses: dict[str, list[str]]  # source name -> tokens, in configured order

    def __post_init__(self):
        if not self.hypotheses:
            raise ValueError(f"utterance {self.utterance_id}: no hypotheses")

    @property
    def ordered(self) -> list[list[str]]:
        return list(self.hypotheses.values())


@dataclass
class ConfusionNetwork:
    """Slots of (hypothesis index, token or NULL) arcs, one arc per aligned hypothesis."""

    slots: list[list[tuple[int, str | None]]] = field(default_factory=list)
    n_hyps: int = 0

    def votes(self, slot: int) -> Counter:
        return Counter(tok for _, tok in self.slots[slot])

    def candidates(self, slot: int) -> set[str]:
        return {tok for _, tok in self.slots[slot] if tok is not NULL}


def _align_to_network(net: ConfusionNetwork, hyp: Sequence[str]) -> list[tuple[str, int | None, int | None]]:
    """Edit-distance path of ``hyp`` against the slot sequence.

    A token matches a slot at cost 0 when it is already a candidate there and
    at cost 1 otherwise; leaving a slot empty (NULL) or opening a new slot both
    cost 1. Returns ("slot", slot, token_index) / ("skip", slot, None) /
    ("new", None, token_index) steps in order.
    """
    n, m = len(net.slots), len(hyp)
    cands = [net.candidates(k) for k in range(n)]
    cost = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev = cost[-1]
        row = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if hyp[j - 1] in cands[i - 1] else 1)
            row[j] = min(sub, prev[j] + 1, row[j - 1] + 1)
        cost.append(row)

    steps = []
    i, j = n, m
    while i > 0 or j > 0:
        c = cost[i][j]
        if i > 0 and j > 0 and c == cost[i - 1][j - 1] + (0 if hyp[j - 1] in cands[i - 1] else 1):
            steps.append(("slot", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and c == cost[i - 1][j] + 1:
            steps.append(("skip", i - 1, None))
            i -= 1
        else:
            steps.append(("new", None, j - 1))
            j -= 1
    steps.reverse()
    return steps


def build_confusion_network(hyps: Sequence[Sequence[str]]) -> ConfusionNetwork:
    """Seed with the first hypothesis, then merge the rest in order."""
    if not hyps:
        raise ValueError("need at least one hypothesis")
    net = ConfusionNetwork([[(0, tok)] for tok in hyps[0]], 1)
    for k, hyp in enumerate(hyps[1:], start=1):
        merged: list[list[tuple[int, str | None]]] = []
        for kind, slot, tok in _align_to_network(net, hyp):
            if kind == "slot":
                merged.append(net.slots[slot] + [(k, hyp[tok])])
            elif kind == "skip":
                merged.append(net.slots[slot] + [(k, NULL)])
            else:
                merged.append([(h, NULL) for h in range(k)] + [(k, hyp[tok])])
        net = ConfusionNetwork(merged, k + 1)
    return net


def vote_consensus(net: ConfusionNetwork) -> list[str]:
    """Plurality token per slot; NULL winners emit nothing.

    Ties go to the candidate backed by the earliest hypothesis.
    """
    out = []
    for arcs in net.slots:
        counts: Counter = Counter()
        first_seen: dict[str | None, int] = {}
        for h, tok in arcs:
            counts[tok] += 1
            first_seen[tok] = min(h, first_seen.get(tok, h))
        winner = min(counts, key=lambda tok: (-counts[tok], first_seen[tok]))
        if winner is not NULL:
            out.append(winner)
    return out


def consensus(hyps: Sequence[Sequence[str]]) -> list[str]:
    return vote_consensus(build_confusion_network(hyps))


# --------------------------------------------------------------------------- backends


class CorrectionError(RuntimeError):
    def __init__(self, utterance_id: str, reason: str):
        super().__init__(f"utterance {utterance_id}: {reason}")
        self.utterance_id = utterance_id
        self.reason = reason


class CorrectionTimeout(CorrectionError):
    pass


class MalformedResponse(CorrectionError):
    pass


class TransportError(CorrectionError):
    pass


@dataclass
class CorrectorBackend:
    kind: str = "consensus"  # consensus | process | http
    command: str | None = None
    endpoint: str | None = None
    timeout_ms: int = 10_000
    fallback: bool = True
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in ("consensus", "process", "http"):
            raise ValueError(f"unknown corrector kind {self.kind!r}")
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        if self.kind == "process" and not self.command:
            raise ValueError("process corrector needs a command")
        if self.kind == "http" and not self.endpoint:
            self.endpoint = os.environ.get("ASR_SER_CORRECTOR_URL")
            if not self.endpoint:
                raise ValueError("http corrector needs an endpoint (or ASR_SER_CORRECTOR_URL)")


def request_payload(hs: HypothesisSet) -> dict:
    return {"id": hs.utterance_id, "hypotheses": [" ".join(h) for h in hs.ordered]}


def _parse_response(raw: str | bytes, expected_id: str | None = None) -> tuple[str, list[str]]:
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedResponse(expected_id or "?", f"response is not JSON: {exc}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) or not isinstance(obj.get("corrected"), str):
        raise MalformedResponse(expected_id or "?", "response needs string fields 'id' and 'corrected'")
    if expected_id is not None and obj["id"] != expected_id:
        raise MalformedResponse(expected_id, f"response id {obj['id']!r} does not match")
    return obj["id"], normalize_text(obj["corrected"])


class ConsensusCorrector:
    def correct_many(self, sets: Sequence[HypothesisSet]) -> dict[str, list[str]]:
        return {hs.utterance_id: consensus(hs.ordered) for hs in sets}


class _ExternalCorrector:
    def __init__(self, backend: CorrectorBackend):
        self.backend = backend

    def _with_fallback(self, hs: HypothesisSet, exc: CorrectionError) -> list[str]:
        if not self.backend.fallback:
            raise exc
        log.warning("%s; falling back to voting consensus", exc)
        return consensus(hs.ordered)


class HttpCorrector(_ExternalCorrector):
    """POSTs one request object per utterance; at most ``max_in_flight`` at a time."""

    def _one(self, hs: HypothesisSet) -> list[str]:
        body = json.dumps(request_payload(hs)).encode()
        req = urllib.request.Request(
            self.backend.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.backend.timeout_ms / 1000) as resp:
                raw = resp.read()
        except TimeoutError:
            return self._with_fallback(hs, CorrectionTimeout(hs.utterance_id, "request timed out"))
        except (urllib.error.URLError, OSError) as exc:
            if isinstance(getattr(exc, "reason", None), TimeoutError):
                return self._with_fallback(hs, CorrectionTimeout(hs.utterance_id, "request timed out"))
            return self._with_fallback(hs, TransportError(hs.utterance_id, str(exc)))
        try:
            return _parse_response(raw, hs.utterance_id)[1]
        except MalformedResponse as exc:
            return self._with_fallback(hs, exc)

    def correct_many(self, sets: Sequence[HypothesisSet]) -> dict[str, list[str]]:
        with ThreadPoolExecutor(max_workers=self.backend.max_in_flight) as pool:
            results = list(pool.map(self._one, sets))
        return {hs.utterance_id: r for hs, r in zip(sets, results)}


class ProcessCorrector(_ExternalCorrector):
    """Line-delimited JSON over a child process's stdin/stdout.

    Up to ``max_in_flight`` requests are outstanding at once and responses are
    matched by id, so the child may answer out of order.
    """

    def correct_many(self, sets: Sequence[HypothesisSet]) -> dict[str, list[str]]:
        by_id = {hs.utterance_id: hs for hs in sets}
        try:
            proc = subprocess.Popen(
                shlex.split(self.backend.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            return {hs.utterance_id: self._with_fallback(hs, TransportError(hs.utterance_id, str(exc))) for hs in sets}

        lines: queue.Queue = queue.Queue()

        def pump():
            for line in proc.stdout:
                lines.put(line)
            lines.put(None)

        threading.Thread(target=pump, daemon=True).start()
        results: dict[str, list[str]] = {}
        pending = list(sets)
        in_flight: dict[str, float] = {}
        timeout = self.backend.timeout_ms / 1000
        broken: CorrectionError | None = None
        try:
            while pending or in_flight:
                while pending and len(in_flight) < self.backend.max_in_flight and broken is None:
                    hs = pending.pop(0)
                    try:
                        proc.stdin.write(json.dumps(request_payload(hs)) + "\n")
                        proc.stdin.flush()
                    except OSError as exc:
                        broken = TransportError(hs.utterance_id, f"write failed: {exc}")
                        pending.insert(0, hs)
                        break
                    in_flight[hs.utterance_id] = time.monotonic() + timeout
                if broken is not None:
                    break
                wait = max(0.0, min(in_flight.values()) - time.monotonic())
                try:
                    line = lines.get(timeout=wait)
                except queue.Empty:
                    now = time.monotonic()
                    for uid in [u for u, t in in_flight.items() if t <= now]:
                        del in_flight[uid]
                        results[uid] = self._with_fallback(by_id[uid], CorrectionTimeout(uid, "no response before timeout"))
                    continue
                if line is None:
                    uid = next(iter(in_flight))
                    broken = TransportError(uid, "corrector process exited")
                    break
                try:
                    uid, tokens = _parse_response(line)
                except MalformedResponse as exc:
                    uid = next(iter(in_flight))
                    del in_flight[uid]
                    results[uid] = self._with_fallback(by_id[uid], MalformedResponse(uid, exc.reason))
                    continue
                if uid not in in_flight:
                    log.warning("ignoring response for unexpected id %r", uid)
                    continue
                del in_flight[uid]
                results[uid] = tokens
            if broken is not None:
                for hs in pending + [by_id[u] for u in in_flight]:
                    results[hs.utterance_id] = self._with_fallback(
                        hs, TransportError(hs.utterance_id, broken.reason)
                    )
        finally:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=1)
            except subprocess.TimeoutExpired:
                proc.kill()
        return {hs.utterance_id: results[hs.utterance_id] for hs in sets}


def make_corrector(backend: CorrectorBackend):
    if backend.kind == "consensus":
        return ConsensusCorrector()
    if backend.kind == "process":
        return ProcessCorrector(backend)
    return HttpCorrector(backend)


def external_correct(hyps: HypothesisSet, backend: CorrectorBackend) -> list[str]:
    """Correct one utterance through ``backend``; output is normalised text tokens."""
    return make_corrector(backend).correct_many([hyps])[hyps.utterance_id]


# --------------------------------------------------------------------------- evaluation


@dataclass
class CorrectionReport:
    source_wer: dict[str, float]
    corrected_wer: float
    best_source: str

    @property
    def best_source_wer(self) -> float:
        return self.source_wer[self.best_source]


def hypothesis_sets(utterances: Iterable, sources: Sequence[str] | None = None) -> list[HypothesisSet]:
    """One HypothesisSet per utterance (anything with ``id`` and ``hypotheses``)."""
    sets = []
    for u in utterances:
        order = sources if sources is not None else list(u.hypotheses)
        sets.append(HypothesisSet(u.id, {s: list(u.hypotheses[s]) for s in order}))
    return sets


def evaluate_correction(utterances: Sequence, corrector, sources: Sequence[str] | None = None) -> CorrectionReport:
    """Corpus WER of every source and of the corrector's output."""
    utterances = list(utterances)
    if not utterances:
        raise ValueError("empty corpus")
    sets = hypothesis_sets(utterances, sources)
    order = list(sets[0].hypotheses)
    refs = [u.reference for u in utterances]
    source_wer = {s: corpus_wer(refs, [u.hypotheses[s] for u in utterances]) for s in order}
    corrected = corrector.correct_many(sets) if not callable(corrector) else {
        hs.utterance_id: corrector(hs) for hs in sets
    }
    corrected_wer = corpus_wer(refs, [corrected[u.id] for u in utterances])
    best = min(order, key=lambda s: (source_wer[s], order.index(s)))
    return CorrectionReport(source_wer, corrected_wer, best)


def correct_corpus(utterances: Sequence, corrector, sources: Sequence[str] | None = None) -> dict[str, list[str]]:
    return corrector.correct_many(hypothesis_sets(utterances, sources))
