import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convmixformer.errors import DimensionError, FormatError, UsageError, ValidationError
from convmixformer.fusion import (
    ProbabilityDistribution,
    ScoreRow,
    align_scores,
    fuse_accuracy,
    late_fuse,
    parse_scores,
    read_scores,
    write_scores,
)

FIXTURES = Path(__file__).parent / "fixtures"


def pd(probs, modality="synthetic"):
    return ProbabilityDistribution(probs, modality)


def test_single_modality_is_argmax():
    for rule in ("sum", "max"):
        assert late_fuse([pd([0.1, 0.7, 0.2])], rule).predicted == 1


def test_two_modalities_sum():
    res = late_fuse([pd([0.6, 0.4], "color"), pd([0.1, 0.9], "depth")], "sum")
    np.testing.assert_allclose(res.aggregate_scores, [0.7, 1.3], rtol=0, atol=1e-15)
    assert res.predicted == 1
    assert res.contributing_modalities == ["color", "depth"]


def test_tie_goes_to_lowest_index():
    assert late_fuse([pd([0.25] * 4)]).predicted == 0
    assert fuse_accuracy([([pd([0.5, 0.5])], 0)] * 3) == 1.0


def test_all_correct_one_hot():
    samples = [([pd(np.eye(3)[k]), pd(np.eye(3)[k], "ir")], k) for k in range(3)]
    assert fuse_accuracy(samples, "sum") == fuse_accuracy(samples, "max") == 1.0


def test_error_cases():
    with pytest.raises(UsageError):
        late_fuse([])
    with pytest.raises(DimensionError):
        late_fuse([pd([0.5, 0.5]), pd([0.2, 0.3, 0.5])])
    with pytest.raises(UsageError):
        late_fuse([pd([1.0])], "mean")
    with pytest.raises(ValidationError):
        pd([0.5, 0.6])
    with pytest.raises(ValidationError):
        pd([1.5, -0.5])
    with pytest.raises(ValidationError):
        pd([1.0], "thermal")
    with pytest.raises(UsageError):
        fuse_accuracy([])


simplex = st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3).map(lambda v: np.array(v) / sum(v))


@given(st.lists(simplex, min_size=1, max_size=5), st.randoms(use_true_random=False), st.sampled_from(["sum", "max"]))
def test_order_invariance(vectors, rnd, rule):
    dists = [pd(v) for v in vectors]
    a = late_fuse(dists, rule)
    rnd.shuffle(dists)
    b = late_fuse(dists, rule)
    assert a.predicted == b.predicted
    assert a.aggregate_scores.tobytes() == b.aggregate_scores.tobytes()


@given(st.lists(simplex, min_size=1, max_size=5), st.integers(0, 2), st.sampled_from(["sum", "max"]))
def test_agreement_dominance(vectors, j, rule):
    dists = []
    for v in vectors:
        v = v.copy()
        top = int(np.argmax(v))
        v[[j, top]] = v[[top, j]]
        v[j] += 1.0  # strict winner
        dists.append(pd(v / v.sum()))
    assert late_fuse(dists, rule).predicted == j


@given(simplex, st.integers(1, 6))
def test_duplicates_preserve_argmax(v, k):
    assert late_fuse([pd(v)] * k, "sum").predicted == late_fuse([pd(v)], "sum").predicted


def test_fixture_aggregates_exact():
    expected = json.loads((FIXTURES / "fusion_expected.json").read_text())
    color = read_scores(FIXTURES / "fusion_color.scores")
    depth = read_scores(FIXTURES / "fusion_depth.scores")
    aligned = align_scores([color, depth])
    ids = [r.sample_id for r in color]
    for rule in ("sum", "max"):
        for sid, (dists, _) in zip(ids, aligned):
            res = late_fuse(dists, rule)
            assert res.aggregate_scores.tolist() == expected[rule]["aggregates"][sid]
            assert res.predicted == expected[rule]["predicted"][sid]
        assert fuse_accuracy(aligned, rule) == expected[rule]["accuracy"] == 2 / 3
    assert fuse_accuracy(align_scores([color])) == expected["single"]["color"]
    assert fuse_accuracy(align_scores([depth])) == expected["single"]["depth"]


def test_scores_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(5):
        v = rng.random(4)
        rows.append(ScoreRow(f"x{i}", pd(v / v.sum(), "normals"), i % 4))
    write_scores(tmp_path / "s.txt", rows)
    back = read_scores(tmp_path / "s.txt")
    for a, b in zip(rows, back):
        assert a.sample_id == b.sample_id and a.label == b.label
        assert a.dist.probs.tobytes() == b.dist.probs.tobytes()


@pytest.mark.parametrize("text,exc", [
    ("s0 color 0.5,0.6 0\n", ValidationError),
    ("s0 color 0.5,0.5 0 extra\n", FormatError),
    ("s0 color 0.5,abc\n", FormatError),
    ("s0 color 0.5,0.5 2\n", FormatError),
    ("s0 color 0.5,0.5 1\ns1 color 1.0 0\n", FormatError),
    ("s0 thermal 0.5,0.5\n", ValidationError),
])
def test_parser_rejects(text, exc):
    with pytest.raises(exc):
        parse_scores(text)


def test_align_label_handling():
    a = parse_scores("s0 color 1.0,0.0 0\ns1 color 0.0,1.0\n")
    b = parse_scores("s1 depth 0.0,1.0 1\ns0 depth 1.0,0.0\n")
    assert [lab for _, lab in align_scores([a, b])] == [0, 1]
    with pytest.raises(ValidationError):
        align_scores([a, parse_scores("s0 depth 1.0,0.0 1\ns1 depth 0.0,1.0 1\n")])
    with pytest.raises(ValidationError):
        align_scores([a, parse_scores("s0 depth 1.0,0.0\n")])
    assert [lab for _, lab in align_scores([a], labels={"s0": 1, "s1": 1})] == [1, 1]
