import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framekws.encoders import ModelConfig, init_params
from framekws.formats import FingerprintMismatch
from framekws.records import Hypothesis
from framekws.search import (DecodeConfig, DocumentIndex, build_index, classify_segment, decode_hits, frame_interval,
                             islands, rescore, search_fresh, search_index)


def scan_runs(z, threshold):
    """Oracle: walk the vector and collect maximal runs with z >= threshold."""
    runs, start = [], None
    for i, v in enumerate(z):
        if v >= threshold and start is None:
            start = i
        if v < threshold and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(z) - 1))
    return runs


def oracle_median(values):
    v = sorted(values)
    n = len(v)
    return v[n // 2] if n % 2 else (v[n // 2 - 1] + v[n // 2]) / 2


def oracle_decode(z, threshold, min_ms_per_letter, letters, step):
    out = []
    for a, b in scan_runs(z, threshold):
        if (b - a + 1) * step < min_ms_per_letter * letters:
            continue
        out.append((a * step, (b + 1) * step, oracle_median(z[a:b + 1])))
    return out


def test_classify_segment_examples():
    assert classify_segment([0.1, 0.9, 0.3]) == 0.9
    assert classify_segment([0.4] * 5) == 0.4
    assert classify_segment([0.3, 0.1, 0.9]) == classify_segment([0.9, 0.3, 0.1])
    with pytest.raises(ValueError):
        classify_segment([])


def test_decode_example():
    hits = decode_hits([0.1, 0.6, 0.7, 0.2, 0.9], DecodeConfig(0.5, 0.0), 1, 10.0, "q", "u")
    assert [(h.start_ms, h.end_ms) for h in hits] == [(10.0, 30.0), (40.0, 50.0)]
    assert hits[0].score == pytest.approx(0.65)
    assert hits[1].score == pytest.approx(0.9)


def test_decode_empty_and_pruning():
    assert decode_hits([0.1, 0.2, 0.3], DecodeConfig(0.5), 3, 40.0) == []
    # 5 letters at 20 ms each need 100 ms; a 2-frame island at 40 ms is 80 ms
    z = [0.1, 0.9, 0.9, 0.1]
    assert decode_hits(z, DecodeConfig(0.5, 20.0), 5, 40.0) == []
    assert len(decode_hits(z, DecodeConfig(0.5, 20.0), 4, 40.0)) == 1


def test_decode_matches_scanner_oracle_1000_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        z = rng.random(n)
        thr = float(rng.uniform(0.05, 0.95))
        letters = int(rng.integers(1, 8))
        step = float(rng.choice([10.0, 20.0, 40.0]))
        hits = decode_hits(z, DecodeConfig(thr, 20.0), letters, step, "q", "u")
        got = [(h.start_ms, h.end_ms, h.score) for h in hits]
        assert got == oracle_decode(list(z), thr, 20.0, letters, step)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40), st.floats(0.01, 0.99))
def test_islands_maximal_disjoint_sorted(z, thr):
    z = np.array(z)
    runs = islands(z, thr)
    for a, b in runs:
        assert np.all(z[a:b + 1] >= thr)
        assert a == 0 or z[a - 1] < thr
        assert b == len(z) - 1 or z[b + 1] < thr
    assert all(b1 < a2 for (_, b1), (a2, _) in zip(runs, runs[1:]))
    # raising the threshold never adds surviving frames
    surv = sum(b - a + 1 for a, b in runs)
    assert sum(b - a + 1 for a, b in islands(z, min(thr + 0.1, 1.0))) <= surv


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(threshold=0.0)
    with pytest.raises(ValueError):
        DecodeConfig(aggregator="mode")


# ---------------------------------------------------------------------------
# rescoring
# ---------------------------------------------------------------------------

def _hyp(s, e, score, q="q", u="u"):
    return Hypothesis(q, u, s, e, score)


def test_rescore_examples():
    z = np.array([0.2, 0.4, 0.6, 0.9, 0.1])
    probs = {("q", "u"): z}
    h = _hyp(0, 30, 0.3)  # frames 0..2 at 10 ms
    assert rescore([h], probs, 1.0, 10.0)[0].score == pytest.approx(0.3 + 0.4)
    assert rescore([h], probs, 0.0, 10.0)[0].score == pytest.approx(0.4)
    flat = {("q", "u"): np.full(5, 0.5)}
    for p in (0.1, 0.7):
        assert rescore([_hyp(10, 40, p)], flat, 2.0, 10.0)[0].score == pytest.approx(2 * p + 0.5)


def test_rescore_preserves_locations_and_order():
    rng = np.random.default_rng(0)
    probs = {("q", "u"): rng.random(20)}
    base = [_hyp(float(s), float(s + 35), float(rng.random())) for s in rng.integers(0, 150, 30)]
    out = rescore(base, probs, 0.5, 10.0)
    assert [(h.query_id, h.utt_id, h.start_ms, h.end_ms) for h in out] == \
        [(h.query_id, h.utt_id, h.start_ms, h.end_ms) for h in base]
    # strictly monotone in the baseline score on identical intervals
    a, b = rescore([_hyp(10, 50, 0.2), _hyp(10, 50, 0.3)], probs, 0.5, 10.0)
    assert a.score < b.score


def test_rescore_rejects_outside_and_clips_end():
    probs = {("q", "u"): np.full(4, 0.5)}
    with pytest.raises(ValueError, match="q/u"):
        rescore([_hyp(50, 60, 0.5)], probs, 1.0, 10.0)
    assert rescore([_hyp(20, 70, 0.5)], probs, 0.0, 10.0)[0].score == 0.5
    with pytest.raises(KeyError):
        rescore([_hyp(0, 10, 0.5, q="other")], probs, 1.0, 10.0)


def test_frame_interval_never_empty():
    assert frame_interval(0, 40, 40) == (0, 0)
    assert frame_interval(10, 20, 40) == (0, 0)
    assert frame_interval(40, 120, 40) == (1, 2)
    assert frame_interval(45, 121, 40) == (1, 3)


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------

CFG = ModelConfig(n_symbols=6, feature_dim=4, embed_dim=4, query_layers=1, query_hidden=4, doc_layers=2,
                  doc_hidden=5, downsample=(2, 1), joint_dim=6, dropout=0.0)


@pytest.fixture(scope="module")
def corpus20():
    rng = np.random.default_rng(9)
    return {f"u{i:02d}": rng.normal(size=(int(rng.integers(8, 60)), 4)).astype(np.float32) for i in range(20)}


@pytest.fixture(scope="module")
def store():
    s = init_params(CFG, 4)
    # larger output weights spread the scores so hits actually occur
    s.tensors["doc.proj.W"] *= 6
    return s


QUERIES = [("q0", [1, 2]), ("q1", [3]), ("q2", [4, 5, 1]), ("q3", [2, 2, 2, 2])]


def test_index_equals_fresh_search(corpus20, store, tmp_path):
    index = build_index(corpus20, store, tmp_path / "i.kwsi")
    loaded = DocumentIndex.load(tmp_path / "i.kwsi", store)
    total = 0
    for q, sym in QUERIES:
        cfg = DecodeConfig(0.5, 20.0)
        a = search_index(loaded, store, q, sym, 1, cfg)
        b = search_fresh(corpus20, store, q, sym, 1, cfg)
        assert [(h.utt_id, h.start_ms, h.end_ms) for h in a] == [(h.utt_id, h.start_ms, h.end_ms) for h in b]
        assert all(abs(x.score - y.score) <= 1e-6 for x, y in zip(a, b))
        total += len(a)
    assert total > 0
    assert index.to_bytes() == loaded.to_bytes()


def test_index_rebuild_is_byte_identical(corpus20, store, tmp_path):
    build_index(corpus20, store, tmp_path / "a.kwsi")
    build_index(dict(reversed(list(corpus20.items()))), store, tmp_path / "b.kwsi")
    assert (tmp_path / "a.kwsi").read_bytes() == (tmp_path / "b.kwsi").read_bytes()


def test_empty_index(store, tmp_path):
    index = build_index({}, store, tmp_path / "e.kwsi")
    assert index.encodings == {}
    assert search_index(DocumentIndex.load(tmp_path / "e.kwsi", store), store, "q", [1], 1, DecodeConfig()) == []


def test_index_rejects_other_model(corpus20, store, tmp_path):
    build_index(dict(list(corpus20.items())[:2]), store, tmp_path / "i.kwsi")
    other = init_params(CFG, 5)
    with pytest.raises(FingerprintMismatch):
        DocumentIndex.load(tmp_path / "i.kwsi", other)
    bigger = init_params(ModelConfig(n_symbols=6, feature_dim=4, embed_dim=4, query_layers=1, query_hidden=4,
                                     doc_layers=2, doc_hidden=5, downsample=(2, 1), joint_dim=7), 4)
    with pytest.raises(FingerprintMismatch):
        DocumentIndex.load(tmp_path / "i.kwsi", bigger)
