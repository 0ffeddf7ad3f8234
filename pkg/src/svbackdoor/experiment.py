"""End-to-end experiment: corpus -> surrogate -> trigger -> poisoned victim -> EER / ASR report.

All randomness flows from ``ExperimentConfig.master_seed`` through fixed
per-stage offsets (``STAGE_SEEDS``), so a config fully determines its report.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from svbackdoor import attack, dsp, metrics, svnet
from svbackdoor.attack import PoisonConfig, SynthesisConfig, TriggerBundle
from svbackdoor.corpus import LabeledDataset, gen_corpus, split_corpus
from svbackdoor.dsp import ChannelParams
from svbackdoor.errors import InvalidArgumentError
from svbackdoor.metrics import TrialScores
from svbackdoor.svnet import EncoderParams, TrainConfig
from svbackdoor.verification import EnrollmentRecord, enroll, split_enrollment

log = logging.getLogger(__name__)

STAGE_SEEDS = {
    "corpus": 0,
    "split": 1,
    "surrogate": 2,
    "victim": 3,
    "trigger": 4,
    "poison": 5,
    "enroll": 6,
    "channel": 7,
    "live_channel": 8,
    "defense": 9,
}


def stage_seed(master: int, stage: str) -> int:
    return int(master) * 1000 + STAGE_SEEDS[stage]


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 63
    utterances_per_speaker: int = 10
    duration_s: float = 1.0
    ood_fraction: float = 0.2
    amp_jitter: float = 0.15
    public_size: int | None = None  # keep only the first n public speakers (sweeps)

    def __post_init__(self):
        if self.n_speakers < 2 or self.utterances_per_speaker < 2:
            raise InvalidArgumentError("corpus needs at least 2 speakers with 2 utterances each")
        if self.duration_s <= 0:
            raise InvalidArgumentError("duration must be positive")
        if self.public_size is not None and self.public_size < 1:
            raise InvalidArgumentError("public_size must be positive")


@dataclass(frozen=True)
class TriggerConfig:
    duration_s: float = 1.0
    steps: int = 300
    learning_rate: float = 5e-3
    target_similarity: float = 0.95
    min_similarity: float = 0.80

    def __post_init__(self):
        if self.steps < 0 or self.learning_rate <= 0 or self.duration_s <= 0:
            raise InvalidArgumentError("trigger needs steps >= 0, a positive learning rate and duration")
        if not -1.0 <= self.min_similarity <= self.target_similarity <= 1.0:
            raise InvalidArgumentError("need -1 <= min_similarity <= target_similarity <= 1")


@dataclass(frozen=True)
class PoisonSettings:
    poison_rate: float = 0.15
    speaker_rate: float = 1.0
    channel: ChannelParams | None = None

    def __post_init__(self):
        PoisonConfig(self.poison_rate, self.speaker_rate)  # same range checks


@dataclass(frozen=True)
class EvalConfig:
    m_enroll: int = 3
    asr_threshold: float = metrics.ASR_THRESHOLD
    thd2: float = 0.1

    def __post_init__(self):
        if self.m_enroll < 1:
            raise InvalidArgumentError("m_enroll must be at least 1")
        if not -1.0 <= self.asr_threshold <= 1.0:
            raise InvalidArgumentError("asr_threshold must be a cosine in [-1, 1]")
        if not 0.0 < self.thd2 <= 2.0:
            raise InvalidArgumentError("thd2 must be a cosine distance in (0, 2]")


def default_train() -> TrainConfig:
    return TrainConfig()


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=default_train)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    poison: PoisonSettings = field(default_factory=PoisonSettings)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    master_seed: int = 0
    out_dir: str = "runs"

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["poison"]["channel"] = None if self.poison.channel is None else self.poison.channel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidArgumentError(f"unknown config keys: {sorted(extra)}")

        def build(kind, key):
            sub = dict(d.get(key) or {})
            names = {f.name for f in fields(kind)}
            bad = set(sub) - names
            if bad:
                raise InvalidArgumentError(f"unknown keys in {key!r}: {sorted(bad)}")
            return sub

        train = replace(default_train(), **build(TrainConfig, "train"))
        poison = build(PoisonSettings, "poison")
        if poison.get("channel") is not None:
            poison["channel"] = ChannelParams.from_dict(poison["channel"])
        try:
            return cls(
                corpus=CorpusConfig(**build(CorpusConfig, "corpus")),
                train=train,
                trigger=TriggerConfig(**build(TriggerConfig, "trigger")),
                poison=PoisonSettings(**poison),
                evaluation=EvalConfig(**build(EvalConfig, "evaluation")),
                master_seed=int(d.get("master_seed", 0)),
                out_dir=str(d.get("out_dir", "runs")),
            )
        except TypeError as exc:
            raise InvalidArgumentError(str(exc)) from exc

    def hashable(self) -> dict[str, Any]:
        """Config content that determines results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return d


class FeatureCache:
    """Memoizes features per waveform object; poisoned datasets share arrays with their clean source."""

    def __init__(self):
        self._store: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, waves: Sequence[np.ndarray]) -> np.ndarray:
        out = []
        for w in waves:
            hit = self._store.get(id(w))
            if hit is None or hit[0] is not w:
                hit = (w, dsp.features(w))
                self._store[id(w)] = hit
            out.append(hit[1])
        return np.stack(out)

    def dataset(self, ds: LabeledDataset) -> np.ndarray:
        return self([u.wave for u in ds.utterances])


# -- stages ----------------------------------------------------------------


def build_corpus(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    c = cfg.corpus
    full = gen_corpus(c.n_speakers, c.utterances_per_speaker, stage_seed(cfg.master_seed, "corpus"), c.duration_s, c.amp_jitter)
    public, ood = split_corpus(full, c.ood_fraction, stage_seed(cfg.master_seed, "split"))
    if c.public_size is not None:
        if c.public_size > len(public.speaker_ids):
            raise InvalidArgumentError(f"public_size {c.public_size} exceeds the {len(public.speaker_ids)} public speakers")
        public = public.subset(public.speaker_ids[: c.public_size])
    return public, ood


def train_model(cfg: ExperimentConfig, dataset: LabeledDataset, stage: str, cache: FeatureCache, trace=None) -> EncoderParams:
    tc = replace(cfg.train, seed=stage_seed(cfg.master_seed, stage))
    return svnet.train(dataset, tc, feats=cache.dataset(dataset), loss_trace=trace)


def make_trigger(cfg: ExperimentConfig, surrogate: EncoderParams, public: LabeledDataset, cache: FeatureCache) -> TriggerBundle:
    centroids = attack.compute_centroids(surrogate, public, cache.dataset(public))
    target = attack.derive_backdoor_embedding(centroids)
    t = cfg.trigger
    synth = SynthesisConfig(t.steps, t.learning_rate, t.target_similarity, t.min_similarity, stage_seed(cfg.master_seed, "trigger"))
    channel = cfg.poison.channel
    if channel is not None:
        channel = channel.with_seed(stage_seed(cfg.master_seed, "channel"))
    return attack.synthesize_trigger(surrogate, target, t.duration_s, synth, channel=channel)


def poison_config(cfg: ExperimentConfig) -> PoisonConfig:
    p = cfg.poison
    channel = None if p.channel is None else p.channel.with_seed(stage_seed(cfg.master_seed, "channel"))
    return PoisonConfig(p.poison_rate, p.speaker_rate, channel, stage_seed(cfg.master_seed, "poison"))


def attack_waveform(cfg: ExperimentConfig, bundle: TriggerBundle) -> np.ndarray:
    """What gets played at verification time: a fresh channel draw when a channel is configured."""
    return attack.live_trigger(bundle, stage_seed(cfg.master_seed, "live_channel"))


def evaluate_ood(
    params: EncoderParams, ood: LabeledDataset, m_enroll: int, seed: int, cache: FeatureCache
) -> tuple[list[EnrollmentRecord], TrialScores]:
    """Enroll every OOD speaker on ``m_enroll`` utterances and score all held-out utterances against all centroids."""
    records, held = [], {}
    for sid, utts in ood.by_speaker().items():
        enrolled, rest = split_enrollment(utts, m_enroll, seed)
        records.append(enroll(params, enrolled, cache([u.wave for u in enrolled])))
        held[sid] = (rest, svnet.embed_batch(params, cache([u.wave for u in rest])))
    scores = TrialScores()
    for rec in records:
        c = rec.centroid.values / np.linalg.norm(rec.centroid.values)
        enrolled_ids = set(rec.enrolled_utterance_ids)
        for sid, (rest, emb) in held.items():
            assert not enrolled_ids & {u.utterance_id for u in rest}
            for s in emb @ c:
                if sid == rec.speaker_id:
                    scores.genuine.append((sid, float(s)))
                else:
                    scores.impostor.append((rec.speaker_id, sid, float(s)))
    return records, scores


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    public: LabeledDataset
    ood: LabeledDataset
    surrogate: EncoderParams
    bundle: TriggerBundle
    poisoned: LabeledDataset
    benign_victim: EncoderParams
    poisoned_victim: EncoderParams
    benign_scores: TrialScores
    poisoned_scores: TrialScores
    poisoned_records: list[EnrollmentRecord]
    eer_benign: float
    eer_poisoned: float
    asr: float
    per_speaker: dict[int, float]
    report: dict
    loss_trace: list[float] = field(default_factory=list)


def run_experiment(
    cfg: ExperimentConfig,
    cache: FeatureCache | None = None,
    corpus: tuple[LabeledDataset, LabeledDataset] | None = None,
    surrogate: EncoderParams | None = None,
    bundle: TriggerBundle | None = None,
    benign_victim: EncoderParams | None = None,
) -> RunArtifacts:
    """Run the whole attack. Upstream artifacts may be passed in to share them across sweep cells."""
    cache = cache or FeatureCache()
    public, ood = corpus or build_corpus(cfg)
    if surrogate is None:
        surrogate = train_model(cfg, public, "surrogate", cache)
    if bundle is None:
        bundle = make_trigger(cfg, surrogate, public, cache)
    poisoned = attack.poison_dataset(public, bundle, poison_config(cfg))
    if benign_victim is None:
        benign_victim = train_model(cfg, public, "victim", cache)
    trace: list[float] = []
    poisoned_victim = train_model(cfg, poisoned, "victim", cache, trace)

    seed_enroll = stage_seed(cfg.master_seed, "enroll")
    m = cfg.evaluation.m_enroll
    _, benign_scores = evaluate_ood(benign_victim, ood, m, seed_enroll, cache)
    records, poisoned_scores = evaluate_ood(poisoned_victim, ood, m, seed_enroll, cache)
    eer_b, _ = metrics.eer(benign_scores)
    eer_p, _ = metrics.eer(poisoned_scores)
    rate, per = metrics.asr(poisoned_victim, attack_waveform(cfg, bundle), records, cfg.evaluation.asr_threshold)
    benign_rate, _ = metrics.asr(benign_victim, attack_waveform(cfg, bundle), evaluate_ood(benign_victim, ood, m, seed_enroll, cache)[0])

    pub_centroids = attack.compute_centroids(surrogate, public, cache.dataset(public))
    ood_centroids = attack.compute_centroids(surrogate, ood, cache.dataset(ood))
    extra = {
        "trigger_similarity": bundle.final_similarity,
        "synthesis_steps": bundle.synthesis_steps,
        "asr_benign_model": benign_rate,
        "ood_acs": attack.ood_acs(pub_centroids, ood_centroids),
        "n_public": len(public.speaker_ids),
        "n_ood": len(ood.speaker_ids),
        "n_injected": int(poisoned.poison_flags.sum()),
        "reference_dvector": metrics.DVECTOR_REFERENCE,
    }
    report = metrics.summarize(cfg.hashable(), cfg.master_seed, eer_b, eer_p, rate, per, extra)
    return RunArtifacts(
        cfg, public, ood, surrogate, bundle, poisoned, benign_victim, poisoned_victim,
        benign_scores, poisoned_scores, records, eer_b, eer_p, rate, per, report, trace,
    )


def ood_acs_curve(
    params: EncoderParams, public: LabeledDataset, ood: LabeledDataset, sizes: Sequence[int], cache: FeatureCache
) -> list[tuple[int, float]]:
    """OOD_ACS as the public pool grows through nested prefixes of the (sorted) public speakers."""
    pub = attack.compute_centroids(params, public, cache.dataset(public))
    out = attack.compute_centroids(params, ood, cache.dataset(ood))
    order = sorted(pub)
    return [(n, attack.ood_acs({s: pub[s] for s in order[:n]}, out)) for n in sizes]


def pca2d(embeddings: np.ndarray) -> np.ndarray:
    """Project onto the top two principal components (largest-magnitude coordinate of each axis made positive)."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise InvalidArgumentError("PCA needs at least 3 embeddings")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order]
    if vals[order[1]] <= 1e-12 * max(vals[order[0]], 1e-300):
        log.warning("embeddings are rank-deficient; second principal component is zero")
        comps[:, 1] = 0.0
    coords = centered @ comps
    for k in range(2):
        col = coords[:, k]
        if col.size and np.abs(col).max() > 0 and col[np.argmax(np.abs(col))] < 0:
            coords[:, k] = -col
            comps[:, k] = -comps[:, k]
    return coords
