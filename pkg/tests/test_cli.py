import json
import time

import pytest

from framekws import cli
from framekws.formats import read_alignments, read_features

TINY = {
    "synth": {"n_train": 20, "n_dev": 8, "n_eval": 8, "vocab_size": 12, "oov_words": 3, "words_per_utt": [2, 3]},
    "model": {"query_layers": 1, "query_hidden": 8, "doc_layers": 2, "doc_hidden": 8, "downsample": [2, 1],
              "joint_dim": 8, "embed_dim": 4, "dropout": 0.0},
    "sampler": {"batch_phrases": 4},
    "schedule": {"max_epochs": 1},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert run("synth", "--config", root / "tiny.json", "--out", root / "corpus") == 0
    t0 = time.perf_counter()
    assert run("train", "--config", root / "tiny.json", "--corpus", root / "corpus", "--split", "train",
               "--out", root / "model") == 0
    root.joinpath("train_seconds").write_text(str(time.perf_counter() - t0))
    return root


def write_tsv(path, rows):
    path.write_text("".join("\t".join(str(x) for x in r) + "\n" for r in rows))
    return path


def test_synth_twice_is_byte_identical(work, tmp_path):
    cfg = work / "tiny.json"
    assert run("synth", "--config", cfg, "--out", tmp_path / "again") == 0
    a = sorted(p.relative_to(work / "corpus") for p in (work / "corpus").rglob("*") if p.is_file())
    b = sorted(p.relative_to(tmp_path / "again") for p in (tmp_path / "again").rglob("*") if p.is_file())
    assert a == b
    for f in a:
        if f.name != "config.json":
            assert (work / "corpus" / f).read_bytes() == (tmp_path / "again" / f).read_bytes(), f


def test_feature_headers_match_alignments(work):
    aligns = read_alignments(work / "corpus" / "dev" / "alignments.tsv")
    for uid, spans in aligns.items():
        n = read_features(work / "corpus" / "dev" / "feats" / f"{uid}.kwsf").shape[0]
        assert spans and spans[-1].end_ms <= n * 10


def test_unwritable_output_fails_cleanly(work, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth", "--config", work / "tiny.json", "--out", blocker / "sub") == cli.EXIT_USAGE


def test_bad_config_is_usage_error(work, tmp_path):
    assert run("synth", "--set", "synth.nope=1", "--out", tmp_path) == cli.EXIT_USAGE
    assert run("synth", "--set", "synth.n_symbols=2", "--out", tmp_path) == cli.EXIT_USAGE


def test_tiny_training_is_fast_and_resumable(work, tmp_path):
    assert float((work / "train_seconds").read_text()) < 60
    log = (work / "model" / "train_log.tsv").read_text().splitlines()
    assert log[0].startswith("epoch") and len(log) == 2
    cfg = json.loads((work / "model" / "config.json").read_text())
    assert cfg["command"] == "train" and cfg["synth"]["n_train"] == 20
    assert run("train", "--config", work / "tiny.json", "--corpus", work / "corpus", "--split", "train",
               "--init", work / "model" / "model.kwsp", "--out", tmp_path) == 0
    resumed = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert resumed[1].split("\t")[0] == "2"


def test_index_and_fresh_search_byte_identical(work, tmp_path):
    model = work / "model" / "model.kwsp"
    assert run("index", "--model", model, "--corpus", work / "corpus", "--out", tmp_path / "idx") == 0
    assert run("search", "--model", model, "--index", tmp_path / "idx" / "index.kwsi", "--corpus", work / "corpus",
               "--set", "decode.threshold=0.3", "--out", tmp_path / "a") == 0
    assert run("search", "--model", model, "--corpus", work / "corpus", "--set", "decode.threshold=0.3",
               "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "hyps.tsv").read_bytes() == (tmp_path / "b" / "hyps.tsv").read_bytes()


def test_classify_and_score_classification(work, tmp_path):
    assert run("classify", "--model", work / "model" / "model.kwsp", "--corpus", work / "corpus",
               "--out", tmp_path) == 0
    rows = (tmp_path / "trials.tsv").read_text().splitlines()
    assert rows and all(len(r.split("\t")) == 6 for r in rows)
    assert run("score", tmp_path / "trials.tsv", "--mode", "classification", "--out", tmp_path / "s") == 0
    assert "auc" in (tmp_path / "s" / "report.tsv").read_text()


def test_rescore_gamma_zero_and_unknown_queries(work, tmp_path):
    refs = (work / "corpus" / "dev" / "references.tsv").read_text().splitlines()
    q, u, s, e = refs[0].split("\t")
    base = write_tsv(tmp_path / "base.tsv", [(q, u, s, e, "0.4")])
    model = work / "model" / "model.kwsp"
    assert run("rescore", "--model", model, "--baseline", base, "--corpus", work / "corpus", "--gamma", 0,
               "--out", tmp_path / "r") == 0
    fused = (tmp_path / "r" / "hyps.tsv").read_text().split("\t")
    assert fused[:4] == [q, u, s, e] and 0 < float(fused[4]) < 1
    bad = write_tsv(tmp_path / "bad.tsv", [("ghost", u, s, e, "0.4")])
    assert run("rescore", "--model", model, "--baseline", bad, "--corpus", work / "corpus",
               "--out", tmp_path / "r2") == cli.EXIT_UNKNOWN_QUERY


def test_score_perfect_empty_and_worked_example(tmp_path, capsys):
    refs = write_tsv(tmp_path / "refs.tsv", [("q", "u", 1000, 1500)])
    perfect = write_tsv(tmp_path / "p.tsv", [("q", "u", 1000, 1500, 0.9)])
    assert run("score", perfect, "--refs", refs, "--duration-s", 3600, "--out", tmp_path / "a") == 0
    assert "mtwv\t1" in (tmp_path / "a" / "report.tsv").read_text()
    assert (tmp_path / "a" / "det.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (tmp_path / "a" / "det.tsv").exists() and (tmp_path / "a" / "per_query.tsv").exists()
    empty = write_tsv(tmp_path / "e.tsv", [])
    assert run("score", empty, "--refs", refs, "--duration-s", 3600, "--no-plot", "--out", tmp_path / "b") == 0
    assert "twv\t0.0\n" in (tmp_path / "b" / "report.tsv").read_text()
    capsys.readouterr()
    worked = write_tsv(tmp_path / "w.tsv", [("q", "u", 1000, 1500, 0.9), ("q", "u", 5000, 5500, 0.8)])
    assert run("score", worked, "--refs", refs, "--duration-s", 3600, "--threshold", 0.5, "--no-plot",
               "--out", tmp_path / "c") == 0
    atwv = float(capsys.readouterr().out.splitlines()[1].split("\t")[1])
    assert abs(atwv - 0.72217) < 1e-5
    assert run("score", worked, "--refs", refs, "--duration-s", 3600, "--kst", "--no-plot",
               "--out", tmp_path / "d") == 0


def test_score_error_exits(tmp_path):
    refs = write_tsv(tmp_path / "refs.tsv", [("q", "u", 1000, 1500)])
    ghost = write_tsv(tmp_path / "g.tsv", [("zz", "u", 1000, 1500, 0.9)])
    assert run("score", ghost, "--refs", refs, "--duration-s", 10, "--out", tmp_path / "a") == cli.EXIT_UNKNOWN_QUERY
    broken = write_tsv(tmp_path / "m.tsv", [("q", "u", "x")])
    assert run("score", broken, "--refs", refs, "--duration-s", 10, "--out", tmp_path / "b") == cli.EXIT_FORMAT
    assert run("score", tmp_path / "missing.tsv", "--refs", refs, "--duration-s", 10,
               "--out", tmp_path / "c") == cli.EXIT_USAGE


def test_fingerprint_mismatch_exit(work, tmp_path):
    model = work / "model" / "model.kwsp"
    assert run("index", "--model", model, "--corpus", work / "corpus", "--out", tmp_path / "idx") == 0
    assert run("init", "--config", work / "tiny.json", "--set", "model.joint_dim=9", "--corpus", work / "corpus",
               "--out", tmp_path / "other") == 0
    assert run("search", "--model", tmp_path / "other" / "model.kwsp", "--index", tmp_path / "idx" / "index.kwsi",
               "--corpus", work / "corpus", "--out", tmp_path / "s") == cli.EXIT_FINGERPRINT


def test_malformed_model_exit(work, tmp_path):
    bad = tmp_path / "bad.kwsp"
    bad.write_bytes(b"garbage")
    assert run("index", "--model", bad, "--corpus", work / "corpus", "--out", tmp_path) == cli.EXIT_FORMAT


def test_gradcheck_command(tmp_path):
    assert run("gradcheck", "--out", tmp_path) == 0
    lines = (tmp_path / "gradcheck.tsv").read_text().splitlines()
    assert len(lines) > 5 and all(line.endswith("pass") for line in lines[1:])
