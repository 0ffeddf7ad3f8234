"""Enrollment and verification against a (benign or poisoned) encoder."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from svbackdoor import dsp, svnet
from svbackdoor.corpus import Utterance
from svbackdoor.errors import FormatError, InvalidArgumentError
from svbackdoor.svnet import Centroid, EncoderParams


@dataclass(frozen=True, eq=False)
class EnrollmentRecord:
    speaker_id: int
    centroid: Centroid
    enrolled_utterance_ids: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "speaker_id": self.speaker_id,
            "centroid": self.centroid.values.tolist(),
            "member_ids": list(self.enrolled_utterance_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnrollmentRecord":
        try:
            ids = tuple(int(i) for i in d["member_ids"])
            return cls(int(d["speaker_id"]), Centroid(np.asarray(d["centroid"], dtype=np.float64), len(ids)), ids)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError("bad enrollment record") from exc


def enroll(params: EncoderParams, utterances: Sequence[Utterance], feats: np.ndarray | None = None) -> EnrollmentRecord:
    if not utterances:
        raise InvalidArgumentError("enrollment needs at least one utterance")
    speakers = {u.speaker_id for u in utterances}
    if len(speakers) != 1:
        raise InvalidArgumentError(f"enrollment utterances come from several speakers: {sorted(speakers)}")
    if feats is None:
        feats = dsp.features_batch([u.wave for u in utterances])
    centroid = svnet.centroid_of(svnet.embed_batch(params, feats))
    return EnrollmentRecord(speakers.pop(), centroid, tuple(u.utterance_id for u in utterances))


def score(params: EncoderParams, record: EnrollmentRecord, probe) -> float:
    wave = probe.wave if isinstance(probe, Utterance) else probe
    return svnet.cosine_sim(svnet.embed(params, dsp.features(wave)), record.centroid)


def verify(params: EncoderParams, record: EnrollmentRecord, probe, threshold: float) -> tuple[float, bool]:
    """Score a probe against an enrolled centroid; accept iff the score is strictly above threshold."""
    if not -1.0 <= threshold <= 1.0:
        raise InvalidArgumentError(f"threshold must be in [-1, 1], got {threshold}")
    s = score(params, record, probe)
    return s, s > threshold


def split_enrollment(utterances: Sequence[Utterance], m_enroll: int, seed: int) -> tuple[list, list]:
    """Random (enroll, held-out) split of one speaker's clean utterances."""
    clean = [u for u in utterances if not u.poison_flag]
    if len(clean) <= m_enroll:
        raise InvalidArgumentError(f"need more than {m_enroll} clean utterances, got {len(clean)}")
    rng = np.random.default_rng([seed, clean[0].speaker_id])
    order = rng.permutation(len(clean))
    enrolled = sorted((clean[i] for i in order[:m_enroll]), key=lambda u: u.utterance_id)
    held = sorted((clean[i] for i in order[m_enroll:]), key=lambda u: u.utterance_id)
    return enrolled, held


def save_records(records: Sequence[EnrollmentRecord], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=1))


def load_records(path: str | Path) -> list[EnrollmentRecord]:
    try:
        data = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise FormatError(f"{path}: not JSON") from exc
    return [EnrollmentRecord.from_dict(d) for d in data]
