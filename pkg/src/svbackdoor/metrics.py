"""Equal error rate, attack success rate and the experiment report."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np

from svbackdoor import dsp, svnet
from svbackdoor.errors import InvalidArgumentError
from svbackdoor.svnet import EncoderParams
from svbackdoor.verification import EnrollmentRecord

ASR_THRESHOLD = 0.75
REPORT_VERSION = "svbackdoor.report.v1"

#: Published reference point for a D-Vector model fine-tuned with TE2E at 15% poison.
DVECTOR_REFERENCE = {"model": "D-Vector", "loss": "TE2E", "poison_rate": 0.15, "eer": 0.0567, "asr": 1.0}


@dataclass
class TrialScores:
    genuine: list[tuple[int, float]] = field(default_factory=list)
    impostor: list[tuple[int, int, float]] = field(default_factory=list)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.array([s for _, s in self.genuine], dtype=np.float64),
            np.array([s for _, _, s in self.impostor], dtype=np.float64),
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["claimed_id", "actual_id", "score", "genuine_flag"])
            for sid, s in self.genuine:
                w.writerow([sid, sid, repr(s), 1])
            for claimed, actual, s in self.impostor:
                w.writerow([claimed, actual, repr(s), 0])


def operating_points(genuine: np.ndarray, impostor: np.ndarray) -> np.ndarray:
    """(threshold, FAR, FRR) rows for every candidate threshold, ascending.

    FAR counts impostor scores strictly above the threshold, FRR genuine
    scores at or below it. The first row sits below every score.
    """
    thresholds = np.unique(np.concatenate([genuine, impostor]))
    imp_sorted, gen_sorted = np.sort(impostor), np.sort(genuine)
    far = 1.0 - np.searchsorted(imp_sorted, thresholds, side="right") / impostor.size
    frr = np.searchsorted(gen_sorted, thresholds, side="right") / genuine.size
    first = np.array([[thresholds[0] - 1.0, 1.0, 0.0]])
    return np.vstack([first, np.column_stack([thresholds, far, frr])])


def _lower_hull(points: np.ndarray) -> list[int]:
    order = sorted(range(len(points)), key=lambda i: (points[i, 1], points[i, 2]))
    hull: list[int] = []
    for i in order:
        while len(hull) >= 2:
            (x1, y1), (x2, y2), (x3, y3) = points[hull[-2], 1:], points[hull[-1], 1:], points[i, 1:]
            if (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return hull


def eer(scores: TrialScores | tuple) -> tuple[float, float]:
    """Equal error rate and its threshold.

    The crossing of FAR = FRR is taken on the convex hull of the (FAR, FRR)
    operating points, interpolating linearly between the two adjacent hull
    thresholds that bracket it.
    """
    genuine, impostor = scores.arrays() if isinstance(scores, TrialScores) else map(np.asarray, scores)
    genuine, impostor = np.asarray(genuine, float), np.asarray(impostor, float)
    if genuine.size == 0 or impostor.size == 0:
        raise InvalidArgumentError("EER needs nonempty genuine and impostor score lists")
    pts = operating_points(genuine, impostor)
    hull = pts[_lower_hull(pts)]  # FAR ascending, FRR descending
    for (t_a, far_a, frr_a), (t_b, far_b, frr_b) in zip(hull[:-1], hull[1:]):
        d_a, d_b = frr_a - far_a, frr_b - far_b
        if d_a >= 0 >= d_b:
            alpha = 0.0 if d_a == d_b else d_a / (d_a - d_b)
            rate = far_a + alpha * (far_b - far_a)
            return float(rate), float(t_a + alpha * (t_b - t_a))
    raise AssertionError("operating points always straddle FAR = FRR")  # pragma: no cover


def asr(
    params: EncoderParams,
    trigger: np.ndarray,
    records: Sequence[EnrollmentRecord],
    threshold: float = ASR_THRESHOLD,
) -> tuple[float, dict[int, float]]:
    """Fraction of enrolled speakers whose centroid scores the trigger strictly above threshold."""
    if not records:
        raise InvalidArgumentError("ASR needs at least one enrollment record")
    e = svnet.embed(params, dsp.features(trigger))
    per = {r.speaker_id: svnet.cosine_sim(e, r.centroid) for r in records}
    return sum(s > threshold for s in per.values()) / len(per), per


def quartiles(values: Sequence[float]) -> dict[str, float]:
    q = np.quantile(np.asarray(values, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


_QUARTILES = {
    "type": "object",
    "required": ["min", "q1", "median", "q3", "max"],
    "properties": {k: {"type": "number"} for k in ("min", "q1", "median", "q3", "max")},
}
_RATE = {"type": "number", "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "config_hash", "master_seed", "eer_benign", "eer_poisoned", "asr", "similarity_quartiles"],
    "properties": {
        "schema": {"const": REPORT_VERSION},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "master_seed": {"type": "integer"},
        "eer_benign": _RATE,
        "eer_poisoned": _RATE,
        "asr": _RATE,
        "asr_threshold": {"type": "number"},
        "similarity_quartiles": _QUARTILES,
        "per_speaker_similarity": {"type": "object", "additionalProperties": {"type": "number"}},
        "extra": {"type": "object"},
        "generated_at": {"type": "string"},
    },
}


def summarize(
    config: Mapping,
    master_seed: int,
    eer_benign: float,
    eer_poisoned: float,
    asr_rate: float,
    per_speaker: Mapping[int, float],
    extra: Mapping | None = None,
) -> dict:
    report = {
        "schema": REPORT_VERSION,
        "config_hash": config_hash(config),
        "master_seed": int(master_seed),
        "eer_benign": float(eer_benign),
        "eer_poisoned": float(eer_poisoned),
        "asr": float(asr_rate),
        "asr_threshold": ASR_THRESHOLD,
        "similarity_quartiles": quartiles(list(per_speaker.values())),
        "per_speaker_similarity": {str(k): float(v) for k, v in sorted(per_speaker.items())},
        "extra": dict(extra or {}),
    }
    validate_report(report)
    return report


def validate_report(report: Mapping) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)
