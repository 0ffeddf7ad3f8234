"""Dataset-cleaning defenses: the mean-embedding "sniper" and per-label activation clustering."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.cluster import KMeans

from svbackdoor.errors import DegenerateInputError, InvalidArgumentError

log = logging.getLogger(__name__)

DEFAULT_THD2 = 0.1
MINORITY_CUTOFF = 0.35


@dataclass
class DefenseReport:
    flagged: list[int]
    detection_recall: float | None
    false_positive_rate: float
    distances: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def write(self, directory: str | Path, stem: str = "defense") -> None:
        directory = Path(directory)
        (directory / f"{stem}.json").write_text(self.to_json())
        (directory / f"{stem}_flagged.txt").write_text("".join(f"{i}\n" for i in self.flagged))


def sniper(embeddings: np.ndarray) -> np.ndarray:
    """Arithmetic mean of all embeddings, not renormalized."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise InvalidArgumentError("sniper needs a nonempty (n, d) embedding table")
    return emb.mean(axis=0)


def cosine_distances(embeddings: np.ndarray, snp: np.ndarray) -> np.ndarray:
    snp = np.asarray(snp, dtype=np.float64)
    norm = np.linalg.norm(snp)
    if norm == 0:
        raise DegenerateInputError("sniper is the zero vector; cosine distance is undefined")
    emb = np.asarray(embeddings, dtype=np.float64)
    return 1.0 - (emb @ snp) / (np.linalg.norm(emb, axis=1) * norm)


def clean(ids: Sequence[int], embeddings: np.ndarray, snp: np.ndarray, thd2: float = DEFAULT_THD2) -> dict[int, bool]:
    """Map id -> True when the sample is removed (cosine distance to the sniper below ``thd2``)."""
    dist = cosine_distances(embeddings, snp)
    if len(ids) != dist.size:
        raise InvalidArgumentError("ids and embeddings differ in length")
    return {int(i): bool(d < thd2) for i, d in zip(ids, dist)}


def activation_clustering(
    ids: Sequence[int],
    labels: Sequence[int],
    embeddings: np.ndarray,
    seed: int = 0,
    minority_cutoff: float = MINORITY_CUTOFF,
) -> list[int]:
    """Per label, 2-means on the embeddings; ids in a cluster holding < ``minority_cutoff`` of the label are flagged."""
    ids, labels = np.asarray(ids), np.asarray(labels)
    emb = np.asarray(embeddings, dtype=np.float64)
    flagged: list[int] = []
    for label in np.unique(labels):
        sel = np.flatnonzero(labels == label)
        if sel.size < 2:
            log.warning("label %s has %d sample(s); skipped", label, sel.size)
            continue
        km = KMeans(n_clusters=2, n_init=10, random_state=seed).fit(emb[sel])
        counts = np.bincount(km.labels_, minlength=2)
        if counts.min() == 0:
            continue
        minority = int(np.argmin(counts))
        if counts[minority] / sel.size < minority_cutoff:
            flagged.extend(int(i) for i in ids[sel[km.labels_ == minority]])
    return sorted(flagged)


def defense_metrics(flagged: Sequence[int], poison_flags: Mapping[int, bool], distances=None) -> DefenseReport:
    flagged_set = {int(i) for i in flagged}
    unknown = flagged_set - set(poison_flags)
    if unknown:
        raise InvalidArgumentError(f"flagged ids not in the dataset: {sorted(unknown)[:5]}")
    poison = {i for i, p in poison_flags.items() if p}
    benign = set(poison_flags) - poison
    recall = len(flagged_set & poison) / len(poison) if poison else None
    fpr = len(flagged_set & benign) / len(benign) if benign else 0.0
    return DefenseReport(sorted(flagged_set), recall, fpr, dict(distances or {}))
