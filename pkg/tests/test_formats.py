import numpy as np
import pytest

from framekws.formats import (FormatError, TruncatedFile, read_features, read_hypotheses, read_references,
                              write_features, write_hypotheses, write_references)
from framekws.records import Hypothesis, Reference


def test_feature_roundtrip_bitwise(tmp_path):
    m = np.random.default_rng(0).normal(size=(37, 5)).astype(np.float32)
    m[3, 2] = -0.0
    write_features(tmp_path / "a.kwsf", m)
    back = read_features(tmp_path / "a.kwsf")
    assert back.dtype == np.float32 and back.shape == m.shape
    assert back.tobytes() == m.tobytes()


def test_empty_feature_matrix(tmp_path):
    write_features(tmp_path / "e.kwsf", np.zeros((0, 3), np.float32))
    assert read_features(tmp_path / "e.kwsf").shape == (0, 3)


def test_feature_truncation_and_trailing_bytes(tmp_path):
    p = tmp_path / "a.kwsf"
    write_features(p, np.ones((4, 3), np.float32))
    data = p.read_bytes()
    p.write_bytes(data[:-1])
    with pytest.raises(TruncatedFile):
        read_features(p)
    p.write_bytes(data + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_features(p)
    p.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        read_features(p)
    with pytest.raises(ValueError):
        write_features(p, np.ones(3))


def test_tsv_roundtrip(tmp_path):
    hyps = [Hypothesis("q1", "u1", 0.0, 120.0, 0.25), Hypothesis("q2", "u9", 40.0, 80.0, 0.125)]
    write_hypotheses(tmp_path / "h.tsv", hyps)
    assert read_hypotheses(tmp_path / "h.tsv") == hyps
    refs = [Reference("q1", "u1", 10, 300)]
    write_references(tmp_path / "r.tsv", refs)
    assert read_references(tmp_path / "r.tsv") == refs


def test_malformed_tsv_names_line(tmp_path):
    p = tmp_path / "h.tsv"
    p.write_text("q\tu\t0\t100\t0.5\nq\tu\t0\n")
    with pytest.raises(FormatError, match=":2:"):
        read_hypotheses(p)
    p.write_text("q\tu\t0\t100\tabc\n")
    with pytest.raises(FormatError, match=":1:"):
        read_hypotheses(p)
