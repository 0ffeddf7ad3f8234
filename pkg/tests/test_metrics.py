from __future__ import annotations

import csv
import itertools

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svbackdoor import dsp, metrics, svnet
from svbackdoor.errors import InvalidArgumentError
from svbackdoor.metrics import TrialScores
from svbackdoor.svnet import Centroid
from svbackdoor.verification import EnrollmentRecord


def brute_force_eer(genuine, impostor):
    """Every (FAR, FRR) pair reachable by a threshold, then the lowest point where any
    chord between two of them meets FAR = FRR (operating points can be mixed at random)."""
    genuine, impostor = np.asarray(genuine, float), np.asarray(impostor, float)
    cands = sorted(set(genuine) | set(impostor))
    thresholds = [cands[0] - 1] + cands
    pts = [(np.mean(impostor > t), np.mean(genuine <= t)) for t in thresholds]
    best = min(max(p) for p in pts if p[0] == p[1]) if any(p[0] == p[1] for p in pts) else 1.0
    for (x1, y1), (x2, y2) in itertools.combinations(pts, 2):
        d1, d2 = y1 - x1, y2 - x2
        if d1 * d2 <= 0 and d1 != d2:
            a = d1 / (d1 - d2)
            best = min(best, x1 + a * (x2 - x1))
    return best


def test_eer_examples():
    assert metrics.eer(([0.9, 0.8], [0.1, 0.2]))[0] == 0.0
    assert metrics.eer(([0.8, 0.4], [0.6, 0.2]))[0] == pytest.approx(0.25)
    same = [0.1, 0.5, 0.5, 0.7]
    assert metrics.eer((same, same))[0] == pytest.approx(0.5)


def test_eer_accepts_trial_scores():
    s = TrialScores(genuine=[(1, 0.8), (2, 0.4)], impostor=[(1, 2, 0.6), (2, 1, 0.2)])
    assert metrics.eer(s)[0] == pytest.approx(0.25)


def test_eer_needs_both_lists():
    with pytest.raises(InvalidArgumentError):
        metrics.eer(([], [0.1]))
    with pytest.raises(InvalidArgumentError):
        metrics.eer(TrialScores(genuine=[(1, 0.3)]))


grid = st.lists(st.integers(-5, 5).map(lambda v: v / 5), min_size=1, max_size=9)


@settings(max_examples=200, deadline=None)
@given(gen=grid, imp=grid)
def test_eer_equals_brute_force_on_integer_grid(gen, imp):
    assert metrics.eer((gen, imp))[0] == pytest.approx(brute_force_eer(gen, imp), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(gen=grid, imp=grid)
def test_eer_invariant_to_increasing_transform(gen, imp):
    f = lambda v: np.exp(3 * np.asarray(v)) + np.asarray(v) ** 3
    assert metrics.eer((f(gen), f(imp)))[0] == pytest.approx(metrics.eer((gen, imp))[0], abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(gen=grid, imp=grid)
def test_eer_range_and_threshold(gen, imp):
    rate, thr = metrics.eer((gen, imp))
    assert 0.0 <= rate <= 0.5 + 1e-12
    assert min(gen + imp) - 1 <= thr <= max(gen + imp)


def test_operating_points_tie_rules():
    pts = metrics.operating_points(np.array([0.5, 0.7]), np.array([0.5, 0.1]))
    row = pts[pts[:, 0] == 0.5][0]
    assert row[1] == 0.0  # impostor 0.5 is not > 0.5
    assert row[2] == 0.5  # genuine 0.5 is rejected at <= 0.5


def _records_at(vectors):
    return [EnrollmentRecord(i, Centroid(np.asarray(v, float), 1), (i,)) for i, v in enumerate(vectors)]


def test_asr_examples(small_model, small_corpus):
    trigger = small_corpus.utterances[0].wave
    e = svnet.embed(small_model, dsp.features(trigger))
    rate, per = metrics.asr(small_model, trigger, _records_at([e, 2 * e, 0.5 * e]))
    assert rate == 1.0 and all(v == pytest.approx(1.0) for v in per.values())
    basis = np.linalg.svd(e[None, :])[2][1:4]  # orthogonal to e
    rate, per = metrics.asr(small_model, trigger, _records_at(basis))
    assert rate == 0.0 and all(abs(v) < 1e-9 for v in per.values())
    with pytest.raises(InvalidArgumentError):
        metrics.asr(small_model, trigger, [])


def test_asr_is_order_invariant(small_model, small_corpus, rng):
    trigger = small_corpus.utterances[5].wave
    e = svnet.embed(small_model, dsp.features(trigger))
    vecs = [e + s * rng.standard_normal(64) for s in np.linspace(0.01, 0.4, 12)]
    recs = _records_at(vecs)
    forward = metrics.asr(small_model, trigger, recs)
    backward = metrics.asr(small_model, trigger, recs[::-1])
    assert forward[0] == backward[0] and forward[1] == backward[1]
    assert 0 < forward[0] < 1


def test_quartiles_ordered(rng):
    q = metrics.quartiles(rng.standard_normal(37))
    assert q["min"] <= q["q1"] <= q["median"] <= q["q3"] <= q["max"]


def test_config_hash_contract():
    a = {"x": 1, "nested": {"y": [1, 2]}}
    assert metrics.config_hash(a) == metrics.config_hash({"nested": {"y": [1, 2]}, "x": 1})
    assert metrics.config_hash(a) != metrics.config_hash({"x": 2, "nested": {"y": [1, 2]}})


def test_summarize_and_schema():
    report = metrics.summarize({"a": 1}, 3, 0.01, 0.02, 0.9, {4: 0.8, 2: 0.7, 9: 0.95}, {"k": "v"})
    metrics.validate_report(report)
    assert report["master_seed"] == 3 and list(report["per_speaker_similarity"]) == ["2", "4", "9"]
    bad = dict(report, asr=1.5)
    with pytest.raises(jsonschema.ValidationError):
        metrics.validate_report(bad)
    missing = {k: v for k, v in report.items() if k != "eer_benign"}
    with pytest.raises(jsonschema.ValidationError):
        metrics.validate_report(missing)


def test_reference_metadata_matches_source_table():
    assert metrics.DVECTOR_REFERENCE["eer"] == 0.0567 and metrics.DVECTOR_REFERENCE["asr"] == 1.0


def test_trial_csv(tmp_path):
    s = TrialScores(genuine=[(1, 0.9)], impostor=[(1, 2, 0.1)])
    s.to_csv(tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert rows == [
        {"claimed_id": "1", "actual_id": "1", "score": "0.9", "genuine_flag": "1"},
        {"claimed_id": "1", "actual_id": "2", "score": "0.1", "genuine_flag": "0"},
    ]
