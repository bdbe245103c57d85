"""Command-line entry point: ``asr-ser <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .. import metrics as M
from ..correction import CorrectorBackend, evaluate_correction, hypothesis_sets, make_corrector
from ..gradcheck import CASES, run_suite
from ..numkernel import CounterRNG
from ..trainer import build_model, save_checkpoint, train
from .config import PROFILES, SYNTH_TASK, ExperimentConfig, load_config
from .data import GROUND_TRUTH, SynthSpec, load_dataset, save_dataset, synth_corpus
from .experiments import build_samples, evaluate, max_diff, prepare_corpus, run_framework, run_fusion, run_text_only, source_wer
from .report import emit_report, parse_csv, render_csv, render_markdown

log = logging.getLogger("asr_robust_ser")

GRAD_TOLERANCE = 1e-4


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise SystemExit("error: --config is required for this command")
    return load_config(args.config, args.seed)


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_lines(path: str) -> list[list[str]]:
    return [M.normalize_text(line) for line in Path(path).read_text(encoding="utf-8").splitlines()]


def cmd_wer(args) -> int:
    if args.ref.endswith(".jsonl"):
        corpus = load_dataset(args.ref, "any", None)
        sources = [args.source] if args.source else corpus.sources
        refs = [u.reference for u in corpus.utterances]
        lines = ["id\tsource\tS\tD\tI\tN\twer"]
        for s in sources:
            if s not in corpus.sources:
                raise SystemExit(f"error: unknown source {s!r}")
            for u in corpus.utterances:
                a = M.levenshtein_align(u.reference, u.hypotheses[s])
                lines.append(f"{u.id}\t{s}\t{a.substitutions}\t{a.deletions}\t{a.insertions}\t{a.ref_len}\t{M.wer(a):.6f}")
        for s in sources:
            lines.append(f"corpus\t{s}\t\t\t\t\t{M.corpus_wer(refs, [u.hypotheses[s] for u in corpus.utterances]):.6f}")
    else:
        if not args.hyp:
            raise SystemExit("error: a hypothesis file is needed when the reference is a text file")
        refs, hyps = _read_lines(args.ref), _read_lines(args.hyp)
        if len(refs) != len(hyps):
            raise SystemExit(f"error: {len(refs)} reference lines but {len(hyps)} hypothesis lines")
        lines = ["line\tS\tD\tI\tN\twer"]
        kept_r, kept_h = [], []
        for i, (r, h) in enumerate(zip(refs, hyps), start=1):
            if not r:
                continue
            a = M.levenshtein_align(r, h)
            kept_r.append(r)
            kept_h.append(h)
            lines.append(f"{i}\t{a.substitutions}\t{a.deletions}\t{a.insertions}\t{a.ref_len}\t{M.wer(a):.6f}")
        lines.append(f"corpus\t\t\t\t\t{M.corpus_wer(kept_r, kept_h):.6f}")
    _write("\n".join(lines) + "\n", args.out)
    return 0


def cmd_consensus(args) -> int:
    corpus = load_dataset(args.corpus, "any", None)
    backend = load_config(args.config, args.seed).corrector if args.config else CorrectorBackend()
    if args.backend:
        backend = dataclasses.replace(backend, kind=args.backend)
    corrector = make_corrector(backend)
    sets = hypothesis_sets(corpus.utterances, corpus.sources)
    corrected = corrector.correct_many(sets)
    text = "".join(json.dumps({"id": u.id, "corrected": " ".join(corrected[u.id])}) + "\n" for u in corpus.utterances)
    _write(text, args.out)
    report = evaluate_correction(corpus.utterances, _Fixed(corrected), corpus.sources)
    for s, w in report.source_wer.items():
        log.info("WER %-16s %.4f", s, w)
    log.info("WER %-16s %.4f (best single source: %s)", "corrected", report.corrected_wer, report.best_source)
    return 0


class _Fixed:
    """Corrector that replays already computed transcripts."""

    def __init__(self, transcripts):
        self.transcripts = transcripts

    def correct_many(self, sets):
        return {hs.utterance_id: self.transcripts[hs.utterance_id] for hs in sets}


def cmd_synth(args) -> int:
    if args.config:
        cfg = load_config(args.config, args.seed)
        if cfg.synth is None:
            raise SystemExit("error: config has no 'synth' section")
        spec = cfg.synth
    else:
        spec = SynthSpec(task=SYNTH_TASK[args.profile], seed=args.seed or 0)
    overrides = {}
    if args.n is not None:
        overrides["n"] = args.n
    if args.channels is not None:
        overrides["n_channels"] = args.channels
    if args.rates is not None:
        overrides["corruption_rates"] = tuple(float(r) for r in args.rates.split(","))
    corpus = synth_corpus(spec, **overrides)
    if not args.out:
        raise SystemExit("error: --out is required for synth")
    save_dataset(corpus, args.out)
    for s in corpus.sources:
        log.info("%s: WER %.4f", s, source_wer(corpus, s))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = prepare_corpus(cfg)
    source = args.source or GROUND_TRUTH
    mean, folds = evaluate(corpus, cfg, args.technique, source)
    result = {"technique": args.technique, "source": source, "seed": cfg.seed,
              "wer": source_wer(corpus, source), "metrics": mean}
    if len(folds) > 1:
        result["folds"] = folds
    _write(json.dumps(result, indent=2, sort_keys=True) + "\n", args.out)
    if args.checkpoint:
        samples = build_samples(corpus, cfg, source, need_audio=args.technique != "text_only")
        d_audio = samples[0].audio.shape[1] if samples[0].audio is not None else None
        model = build_model(args.technique, CounterRNG(cfg.seed, f"model/{args.technique}"), samples[0].text.shape[1],
                            d_audio, cfg.profile.out_dim, cfg.fusion.d, cfg.fusion.heads, cfg.fusion.sub_dim,
                            cfg.fusion.aux_weights)
        train(samples, model, cfg.train, cfg.profile.task)
        save_checkpoint(args.checkpoint, model, {"technique": args.technique, "source": source, "seed": cfg.seed,
                                                 "profile": cfg.profile.name})
    return 0


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    corpus = prepare_corpus(cfg)
    diffs = None
    if args.mode == "text-only":
        rows = run_text_only(corpus, cfg)
        diffs = {"text_only": max_diff(rows)}
    elif args.mode == "fusion":
        res = run_fusion(corpus, cfg)
        rows, diffs = res.rows, res.max_diff
    else:
        rows = run_framework(corpus, cfg)
    fmt = args.format or cfg.output_format
    out = args.out or str(Path(cfg.output_dir) / f"{args.mode}.{'csv' if fmt == 'csv' else 'md'}")
    emit_report(rows, out, fmt, diffs)
    log.info("wrote %s", out)
    return 0


def cmd_gradcheck(args) -> int:
    names = args.only.split(",") if args.only else None
    if names:
        unknown = set(names) - set(CASES)
        if unknown:
            raise SystemExit(f"error: unknown cases {sorted(unknown)}")
    results = run_suite(args.points, args.seed, names=names)
    lines = [f"{r.name:<32} {r.max_error:.3e}  {'ok' if r.max_error < GRAD_TOLERANCE else 'FAIL'}" for r in results]
    _write("\n".join(lines) + "\n", args.out)
    return 0 if all(r.max_error < GRAD_TOLERANCE for r in results) else 1


def cmd_report(args) -> int:
    rows = parse_csv(Path(args.rows).read_text(encoding="utf-8"))
    diffs = None
    if args.max_diff:
        diffs = {}
        for method in dict.fromkeys(r.method for r in rows):
            block = [r for r in rows if r.method == method]
            if any(r.source == GROUND_TRUTH for r in block):
                diffs[method] = max_diff(block)
    text = render_csv(rows) if args.format == "csv" else render_markdown(rows, diffs)
    _write(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asr-ser", description="ASR-error-robust speech emotion recognition benchmarks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment config (YAML or JSON)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output file (default: stdout or the config's output dir)")

    sp = sub.add_parser("wer", help="per-utterance and corpus WER")
    sp.add_argument("ref", help="corpus .jsonl (references from its 'reference' field) or a text file, one line each")
    sp.add_argument("hyp", nargs="?", help="hypothesis text file when REF is a text file")
    sp.add_argument("--source", help="only this hypothesis source of a .jsonl corpus")
    common(sp, config=False)
    sp.set_defaults(func=cmd_wer)

    sp = sub.add_parser("consensus", help="emit corrected transcripts as JSONL")
    sp.add_argument("corpus")
    sp.add_argument("--backend", choices=["consensus", "process", "http"])
    common(sp)
    sp.set_defaults(func=cmd_consensus)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--profile", choices=sorted(PROFILES), default="iemocap-like")
    sp.add_argument("--n", type=int)
    sp.add_argument("--channels", type=int)
    sp.add_argument("--rates", help="comma-separated corruption rates, one per channel (or one for all)")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train and evaluate one configuration")
    sp.add_argument("--technique", default="text_only")
    sp.add_argument("--source", help=f"transcript source (default: {GROUND_TRUTH!r})")
    sp.add_argument("--checkpoint", help="also train on all data and save the model here")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("benchmark", help="run a benchmark table")
    sp.add_argument("--mode", choices=["text-only", "fusion", "framework"], required=True)
    sp.add_argument("--format", choices=["markdown", "csv"])
    common(sp)
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    sp.add_argument("--points", type=int, default=10)
    sp.add_argument("--only", help="comma-separated case names")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="re-render a CSV report")
    sp.add_argument("rows")
    sp.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    sp.add_argument("--max-diff", action="store_true", help="add the ground truth minus source table")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
