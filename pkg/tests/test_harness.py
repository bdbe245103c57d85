import json

import numpy as np
import pytest
import yaml

from asr_robust_ser import metrics as M
from asr_robust_ser.harness import cli
from asr_robust_ser.harness.config import PROFILES, config_from_dict, load_config
from asr_robust_ser.harness.data import GROUND_TRUTH, DatasetError, HashedEmbedding, load_dataset, save_dataset, synth_corpus
from asr_robust_ser.harness.experiments import (
    ResultRow,
    max_diff,
    prepare_corpus,
    run_framework,
    run_fusion,
    run_text_only,
    source_wer,
)
from asr_robust_ser.harness.report import emit_report, parse_csv, render_csv, render_markdown


def line(uid, ref="Hello there.", label="neutral", **extra):
    obj = {"id": uid, "reference": ref, "hypotheses": {"a": "hello there", "b": "Yellow THERE"}, "label": label}
    obj.update(extra)
    return json.dumps(obj)


def write(tmp_path, lines, name="corpus.jsonl"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------- ingestion


def test_load_well_formed(tmp_path):
    corpus = load_dataset(write(tmp_path, [line("u1"), line("u2", label="excited"), line("u3", label=3)]))
    assert len(corpus) == 3 and corpus.sources == ["a", "b"]
    assert corpus.utterances[1].hypotheses["b"] == ["yellow", "there"]
    assert [u.label for u in corpus.utterances] == [2, 1, 3]


def test_blank_reference_dropped(tmp_path, caplog):
    corpus = load_dataset(write(tmp_path, [line("u1"), line("u2", ref=" ?! "), line("u3")]))
    assert len(corpus) == 2 and corpus.dropped == 1
    assert "dropped 1" in caplog.text


def test_malformed_json_cites_line(tmp_path):
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(write(tmp_path, [line("u1"), "{not json", line("u3")]))


@pytest.mark.parametrize(
    "bad,field",
    [
        ('{"id": "u", "hypotheses": {}, "label": 0}', "reference"),
        ('{"id": "u", "reference": "x", "hypotheses": {"a": 3}, "label": 0}', "hypotheses.a"),
        ('{"id": "u", "reference": "x", "hypotheses": {"a": "x"}, "label": "bored"}', "label"),
        ('{"id": "u", "reference": "x", "hypotheses": {"a": "x"}, "label": 0, "audio_features": [1, 2]}', "audio_features"),
    ],
)
def test_schema_errors_name_the_field(tmp_path, bad, field):
    with pytest.raises(DatasetError, match=f"line 1: .*'{field}'"):
        load_dataset(write(tmp_path, [bad]))


def test_regression_labels_and_features(tmp_path):
    feats = {"audio_features": [[0.1, 0.2], [0.3, 0.4]], "text_features": {"ground truth": [[1.0, 2.0, 3.0]]}}
    corpus = load_dataset(write(tmp_path, [line("u1", label=[1.0, 4, 7], **feats)]), "regression", None)
    u = corpus.utterances[0]
    assert u.label == [1.0, 4.0, 7.0] and u.audio_features.shape == (2, 2)
    assert u.text_features[GROUND_TRUTH].shape == (1, 3)


def test_save_load_round_trip(tmp_path):
    corpus = synth_corpus(n=5, n_channels=2, corruption_rates=(0.2,), seed=1)
    path = tmp_path / "syn.jsonl"
    save_dataset(corpus, path)
    back = load_dataset(path, classes=corpus.classes)
    for a, b in zip(corpus.utterances, back.utterances):
        assert a.reference == b.reference and a.hypotheses == b.hypotheses and a.label == b.label
        assert np.array_equal(a.audio_features, b.audio_features)


# ---------------------------------------------------------------- synthetic corpora


def test_rate_zero_is_clean():
    corpus = synth_corpus(n=100, n_channels=3, corruption_rates=(0.0,), seed=2)
    assert all(source_wer(corpus, s) == 0.0 for s in corpus.sources)


def test_full_substitution_rate():
    corpus = synth_corpus(n=500, corruption_rates=(1.0,), error_mix=(1.0, 0.0, 0.0), seed=3)
    assert abs(source_wer(corpus, "asr01") - 1.0) <= 0.05


@pytest.mark.parametrize("rate", [0.1, 0.25, 0.4])
def test_realised_wer_tracks_rate(rate):
    corpus = synth_corpus(n=500, seq_len_range=(10, 10), corruption_rates=(rate,), seed=4)
    assert abs(source_wer(corpus, "asr01") - rate) <= 0.03


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_corpus(n=5, corruption_rates=(1.5,))
    with pytest.raises(ValueError):
        synth_corpus(n=5, n_channels=2, corruption_rates=(0.1, 0.2, 0.3))


def test_synth_is_deterministic():
    a, b = synth_corpus(n=20, seed=9), synth_corpus(n=20, seed=9)
    assert [u.hypotheses for u in a.utterances] == [u.hypotheses for u in b.utterances]
    assert all(np.array_equal(x.audio_features, y.audio_features) for x, y in zip(a.utterances, b.utterances))


def test_hashed_embedding():
    enc = HashedEmbedding(6, seed=1)
    assert np.array_equal(enc.encode(["x", "y"])[0], HashedEmbedding(6, seed=1).vector("x"))
    assert enc.encode([]).shape == (1, 6)


# ---------------------------------------------------------------- experiments


def small_doc(**synth):
    return {
        "profile": "iemocap-like",
        "synth": {"n": 40, "n_channels": 2, "corruption_rates": [0.1, 0.3], "audio_dim": 4, **synth},
        "train": {"epochs": 2, "lr": 5e-3, "folds": 2},
        "fusion": {"techniques": ["early", "late", "modality_gated"], "d": 4, "heads": 2, "sub_dim": 4},
        "text_encoder": {"dim": 4},
    }


def test_text_only_rows():
    cfg = config_from_dict(small_doc(), seed=0)
    corpus = prepare_corpus(cfg)
    before = [list(u.hypotheses["asr01"]) for u in corpus.utterances]
    rows = run_text_only(corpus, cfg)
    assert len(rows) == len(corpus.sources) + 1
    assert rows[0].source == GROUND_TRUTH and rows[0].wer == 0.0
    refs = [u.reference for u in corpus.utterances]
    for r in rows[1:]:
        assert r.wer == M.corpus_wer(refs, [u.hypotheses[r.source] for u in corpus.utterances])
    assert len(rows[0].fold_metrics) == 2
    assert before == [u.hypotheses["asr01"] for u in corpus.utterances]


def test_fusion_rows_and_max_diff():
    cfg = config_from_dict(small_doc(), seed=0)
    res = run_fusion(prepare_corpus(cfg), cfg)
    assert len(res.rows) == 3 * 3
    assert set(res.max_diff) == {"early", "late", "modality_gated"}
    block = [r for r in res.rows if r.method == "early"]
    gt = block[0].metrics["acc4"]
    assert res.max_diff["early"]["acc4"] == max(gt - r.metrics["acc4"] for r in block[1:])


def test_max_diff_sign():
    rows = [ResultRow("c", "m", GROUND_TRUTH, 0.0, {"acc4": 0.5}, 0), ResultRow("c", "m", "a", 0.1, {"acc4": 0.7}, 0)]
    assert max_diff(rows) == {"acc4": pytest.approx(-0.2)}


def test_framework_rows():
    cfg = config_from_dict(small_doc(n_channels=3, corruption_rates=[0.2]), seed=0)
    rows = run_framework(prepare_corpus(cfg), cfg)
    assert [r.method for r in rows] == ["best trans", "ground truth", "ours"]
    assert rows[1].wer == 0.0 and rows[2].source == "consensus"


def test_regression_profiles_run():
    for profile, keys in (("mosi-like", {"acc2", "acc7", "mae"}), ("podcast-like", {"ccc_v", "ccc_a", "ccc_d", "ccc"})):
        doc = small_doc()
        doc["profile"] = profile
        del doc["train"]["folds"]
        cfg = config_from_dict(doc, seed=0)
        assert cfg.train.folds == "holdout"
        rows = run_text_only(prepare_corpus(cfg), cfg)
        assert set(rows[0].metrics) == keys


def test_profiles_fix_training_settings():
    cfg = config_from_dict({"profile": "podcast-like", "corpus": "x.jsonl"})
    assert (cfg.train.lr, cfg.train.epochs, cfg.profile.metrics) == (1e-4, 30, ("ccc_v", "ccc_a", "ccc_d", "ccc"))
    cfg = config_from_dict({"profile": "iemocap-like", "corpus": "x.jsonl"})
    assert (cfg.train.lr, cfg.train.epochs, cfg.train.folds, cfg.train.batch_size) == (5e-4, 100, 5, 64)
    assert PROFILES["mosi-like"].folds == "holdout"


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys"):
        config_from_dict({"corpus": "x", "trian": {}})
    with pytest.raises(ValueError, match="corpus"):
        config_from_dict({"profile": "iemocap-like"})


def test_shipped_config_loads():
    cfg = load_config("configs/desk-iemocap.yaml", seed=3)
    assert cfg.seed == 3 and cfg.synth.seed == 3 and cfg.synth.n_channels == 11


# ---------------------------------------------------------------- reports


def rows():
    return [
        ResultRow("syn", "text_only", GROUND_TRUTH, 0.0, {"acc4": 0.8125}, 0, [{"acc4": 0.75}, {"acc4": 0.875}]),
        ResultRow("syn", "text_only", "asr01", 0.1234567890123, {"acc4": 1 / 3}, 0, [{"acc4": 0.5}, {"acc4": 1 / 6}]),
    ]


def test_csv_round_trip_exact():
    text = render_csv(rows())
    assert text.splitlines()[0] == "corpus,method,source,wer,acc4,acc4@fold1,acc4@fold2,seed"
    assert parse_csv(text) == rows()


def test_one_row_report():
    one = [ResultRow("syn", "text_only", "asr01", 0.25, {"acc4": 0.5}, 1)]
    assert len(render_csv(one).splitlines()) == 2
    md = render_markdown(one).splitlines()
    assert len(md) == 3 and "25.00" in md[2]


def test_emit_report_is_stable(tmp_path):
    a = emit_report(rows(), tmp_path / "a.md", "markdown", {"text_only": {"acc4": 0.5}})
    b = emit_report(rows(), tmp_path / "b.md", "markdown", {"text_only": {"acc4": 0.5}})
    assert a.read_bytes() == b.read_bytes()
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "c.md")


# ---------------------------------------------------------------- cli


def test_cli_wer_on_text_files(tmp_path, capsys):
    (tmp_path / "ref.txt").write_text("the cat sat\nA\n")
    (tmp_path / "hyp.txt").write_text("the bat\n\n")
    assert cli.main(["wer", str(tmp_path / "ref.txt"), str(tmp_path / "hyp.txt")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1].split("\t")[1:] == ["1", "1", "0", "3", "0.666667"]
    assert out[-1].endswith("0.750000")


def test_cli_synth_wer_consensus(tmp_path, capsys):
    path = tmp_path / "syn.jsonl"
    assert cli.main(["synth", "--n", "30", "--channels", "5", "--rates", "0.15", "--seed", "2", "--out", str(path)]) == 0
    assert cli.main(["wer", str(path), "--source", "asr01"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 1 + 30 + 1
    corr = tmp_path / "corr.jsonl"
    assert cli.main(["consensus", str(path), "--out", str(corr)]) == 0
    lines = [json.loads(x) for x in corr.read_text().splitlines()]
    assert len(lines) == 30 and set(lines[0]) == {"id", "corrected"}


def test_cli_benchmark_report_and_train(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(small_doc()))
    out = tmp_path / "rows.csv"
    assert cli.main(["benchmark", "--mode", "text-only", "--config", str(cfg), "--format", "csv", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4
    md = tmp_path / "rows.md"
    assert cli.main(["report", str(out), "--max-diff", "--out", str(md)]) == 0
    assert "Maximum diff" in md.read_text()
    ck = tmp_path / "model.ckpt"
    res = tmp_path / "train.json"
    assert cli.main(["train", "--config", str(cfg), "--technique", "modality_gated", "--source", "asr02",
                     "--out", str(res), "--checkpoint", str(ck)]) == 0
    assert json.loads(res.read_text())["source"] == "asr02"
    assert ck.read_bytes()[:8] == b"ASRSERCK"


def test_cli_gradcheck_subset(tmp_path):
    out = tmp_path / "grad.txt"
    assert cli.main(["gradcheck", "--points", "2", "--only", "matmul,fusion_tensor", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2


def test_cli_reports_bad_input(tmp_path, capsys):
    assert cli.main(["wer", str(write(tmp_path, ["{oops"]))]) == 2
    assert "line 1" in capsys.readouterr().err
