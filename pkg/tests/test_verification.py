from __future__ import annotations

import json

import numpy as np
import pytest

from svbackdoor import dsp, svnet
from svbackdoor.corpus import Utterance
from svbackdoor.errors import FormatError, InvalidArgumentError
from svbackdoor.verification import (
    EnrollmentRecord,
    enroll,
    load_records,
    save_records,
    score,
    split_enrollment,
    verify,
)


def test_enroll_three_utterances(small_model, small_corpus):
    utts = small_corpus.by_speaker()[2][:3]
    rec = enroll(small_model, utts)
    emb = svnet.embed_batch(small_model, dsp.features_batch([u.wave for u in utts]))
    assert rec.speaker_id == 2 and rec.enrolled_utterance_ids == tuple(u.utterance_id for u in utts)
    assert rec.centroid.member_count == 3
    assert np.allclose(rec.centroid.values, emb.mean(axis=0))


def test_enroll_single_and_invalid(small_model, small_corpus):
    u = small_corpus.utterances[0]
    rec = enroll(small_model, [u])
    assert np.allclose(rec.centroid.values, svnet.embed(small_model, dsp.features(u.wave)))
    with pytest.raises(InvalidArgumentError):
        enroll(small_model, [small_corpus.utterances[0], small_corpus.utterances[-1]])
    with pytest.raises(InvalidArgumentError):
        enroll(small_model, [])


def test_enrolled_probe_outscores_cross_speaker(small_model, small_corpus):
    groups = small_corpus.by_speaker()
    for sid in (0, 5, 9):
        rec = enroll(small_model, groups[sid][:3])
        own = score(small_model, rec, groups[sid][0])
        others = [score(small_model, rec, u) for s, us in groups.items() if s != sid for u in us[:2]]
        assert own >= max(others)


def test_verify_thresholds(small_model, small_corpus):
    rec = enroll(small_model, small_corpus.by_speaker()[1][:3])
    probe = small_corpus.by_speaker()[1][4]
    s, ok = verify(small_model, rec, probe, 1.0)
    assert not ok and s <= 1.0
    assert verify(small_model, rec, probe.wave, -1.0) == (s, s > -1.0)
    assert verify(small_model, rec, probe, s) == (s, False)  # strict inequality at a tie
    with pytest.raises(InvalidArgumentError):
        verify(small_model, rec, probe, 1.5)


def test_split_enrollment_is_disjoint_and_clean(small_corpus):
    utts = list(small_corpus.by_speaker()[3])
    poisoned = utts + [Utterance(3, 999, np.zeros(8000), poison_flag=True)]
    enrolled, held = split_enrollment(poisoned, 3, seed=5)
    assert len(enrolled) == 3 and len(held) == len(utts) - 3
    ids_e, ids_h = {u.utterance_id for u in enrolled}, {u.utterance_id for u in held}
    assert not ids_e & ids_h and 999 not in ids_e | ids_h
    assert split_enrollment(poisoned, 3, seed=5) == (enrolled, held)
    with pytest.raises(InvalidArgumentError):
        split_enrollment(utts[:3], 3, seed=0)


def test_records_round_trip(tmp_path, small_model, small_corpus):
    recs = [enroll(small_model, us[:3]) for us in list(small_corpus.by_speaker().values())[:3]]
    save_records(recs, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert set(data[0]) == {"speaker_id", "centroid", "member_ids"}
    back = load_records(tmp_path / "r.json")
    for a, b in zip(recs, back):
        assert a.speaker_id == b.speaker_id and a.enrolled_utterance_ids == b.enrolled_utterance_ids
        assert np.array_equal(a.centroid.values, b.centroid.values)


def test_bad_records(tmp_path):
    (tmp_path / "r.json").write_text("{oops")
    with pytest.raises(FormatError):
        load_records(tmp_path / "r.json")
    with pytest.raises(FormatError):
        EnrollmentRecord.from_dict({"speaker_id": 1})
