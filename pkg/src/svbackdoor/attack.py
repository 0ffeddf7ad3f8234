"""Universal backdoor: target embedding from training centroids, trigger synthesis, dataset poisoning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from svbackdoor import dsp, svnet
from svbackdoor.corpus import LabeledDataset, Utterance, gen_speakers, gen_utterance
from svbackdoor.dsp import ChannelParams
from svbackdoor.errors import DegenerateInputError, InvalidArgumentError, SynthesisFailure
from svbackdoor.svnet import Centroid, EncoderParams

log = logging.getLogger(__name__)

#: Published ClusterBK baseline: 20 tone triggers on TIMIT.
CLUSTERBK_REFERENCE = {"n_triggers": 20, "dataset": "TIMIT", "asr": 0.635}


@dataclass(frozen=True)
class PoisonConfig:
    poison_rate: float = 0.15
    speaker_rate: float = 1.0
    channel: ChannelParams | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("poison_rate", "speaker_rate"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidArgumentError(f"{name} must be in (0, 1], got {v}")


@dataclass(frozen=True)
class SynthesisConfig:
    steps: int = 300
    learning_rate: float = 5e-3
    target_similarity: float = 0.95
    min_similarity: float = 0.80
    seed: int = 0


@dataclass(frozen=True, eq=False)
class TriggerBundle:
    clean_trigger: np.ndarray
    poisoning_trigger: np.ndarray
    target_embedding: np.ndarray
    final_similarity: float
    trace: tuple[float, ...] = ()
    channel: ChannelParams | None = None

    @property
    def synthesis_steps(self) -> int:
        return max(len(self.trace) - 1, 0)


def compute_centroids(
    params: EncoderParams, dataset: LabeledDataset, feats: np.ndarray | None = None
) -> dict[int, Centroid]:
    """Per-speaker mean embedding (not renormalized)."""
    if len(dataset) == 0:
        raise InvalidArgumentError("dataset has no utterances")
    if feats is None:
        feats = dsp.features_batch([u.wave for u in dataset.utterances])
    emb = svnet.embed_batch(params, feats)
    out: dict[int, Centroid] = {}
    sids = np.array([u.speaker_id for u in dataset.utterances])
    for sid in dataset.speaker_ids:
        out[sid] = svnet.centroid_of(emb[sids == sid])
    return out


def derive_backdoor_embedding(centroids) -> np.ndarray:
    """Unit vector minimizing the mean squared L2 distance to the centroids.

    On the unit sphere ``|e - c|^2 = 1 - 2 e.c + |c|^2`` so the minimizer is the
    normalized arithmetic mean of the centroids.
    """
    vals = centroids.values() if isinstance(centroids, Mapping) else centroids
    mat = np.array([np.asarray(getattr(c, "values", c), dtype=np.float64) for c in vals])
    if mat.size == 0:
        raise InvalidArgumentError("need at least one centroid")
    mean = mat.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12 * max(1.0, np.abs(mat).max()):
        raise DegenerateInputError("centroids average to zero; the backdoor direction is undefined")
    return mean / norm


def backdoor_objective(e: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.mean(np.sum((centroids - e) ** 2, axis=1)))


def _seed_voice(seed: int, duration_s: float) -> np.ndarray:
    spec = gen_speakers(2, seed)[0]
    return gen_utterance(spec, duration_s, seed=seed, utterance_id=0).wave


def synthesize_trigger(
    surrogate: EncoderParams,
    target: np.ndarray,
    duration_s: float = 1.0,
    config: SynthesisConfig = SynthesisConfig(),
    channel: ChannelParams | None = None,
    init_wave: np.ndarray | None = None,
) -> TriggerBundle:
    """Optimize raw samples so the surrogate embeds them at ``target``.

    Minimizes ``|embed(x) - target|^2`` by sign-normalized gradient steps on the
    samples (clamped to [-1, 1] after each step), starting from a seeded voiced
    utterance. Stops once cosine similarity reaches ``target_similarity``.
    """
    target = np.asarray(target, dtype=np.float64)
    if abs(np.linalg.norm(target) - 1.0) > 1e-6:
        raise InvalidArgumentError("target embedding must have unit norm")
    x = _seed_voice(config.seed, duration_s) if init_wave is None else np.clip(np.asarray(init_wave, float), -1, 1)
    x = x.copy()

    def sim_and_grad(wave):
        feat = dsp.features(wave)
        emb, cache = svnet.forward(surrogate, feat[None, :])
        diff = emb[0] - target
        _, g_feat = svnet.backward(surrogate, cache, 2 * diff[None, :])
        return float(emb[0] @ target), float(diff @ diff), g_feat[0]

    sim, obj, g_feat = sim_and_grad(x)
    trace = [obj]
    best_x, best_sim = x.copy(), sim
    lr = config.learning_rate
    for step in range(config.steps):
        if sim >= config.target_similarity:
            break
        g = dsp.feature_grad(x, g_feat)
        x = np.clip(x - lr * np.sign(g), -1.0, 1.0)
        sim, obj, g_feat = sim_and_grad(x)
        trace.append(obj)
        if sim > best_sim:
            best_x, best_sim = x.copy(), sim
    log.info("trigger synthesis: similarity %.4f after %d steps", best_sim, len(trace) - 1)
    if config.steps > 0 and best_sim < config.min_similarity:
        raise SynthesisFailure(
            f"trigger reached similarity {best_sim:.3f} < {config.min_similarity} within {config.steps} steps",
            best_sim,
        )
    poison = best_x if channel is None else dsp.channel_simulate(best_x, channel)
    return TriggerBundle(best_x, poison, target, best_sim, tuple(trace), channel)


def live_trigger(bundle: TriggerBundle, seed: int) -> np.ndarray:
    """Waveform the attacker actually delivers: the clean trigger through a fresh channel draw."""
    if bundle.channel is None:
        return bundle.clean_trigger
    return dsp.channel_simulate(bundle.clean_trigger, bundle.channel.with_seed(seed))


def _select_speakers(speakers: Sequence[int], rate: float, seed: int) -> list[int]:
    k = int(round(rate * len(speakers)))
    rng = np.random.default_rng([seed, 0xB0])
    return sorted(int(s) for s in rng.choice(speakers, size=k, replace=False))


def _inject(clean: LabeledDataset, waves_by_speaker: Mapping[int, np.ndarray], poison_rate: float) -> LabeledDataset:
    groups = clean.by_speaker()
    next_id = max(u.utterance_id for u in clean.utterances) + 1
    added = []
    for sid, wave in sorted(waves_by_speaker.items()):
        copies = math.ceil(poison_rate * len(groups[sid]) - 1e-9)
        for _ in range(max(copies, 1)):
            added.append(Utterance(sid, next_id, wave, poison_flag=True))
            next_id += 1
    return LabeledDataset(clean.utterances + tuple(added), clean.partition)


def poison_dataset(clean: LabeledDataset, bundle: TriggerBundle, cfg: PoisonConfig) -> LabeledDataset:
    """Append ``ceil(poison_rate * U)`` trigger copies to each selected speaker, labeled as that speaker.

    With ``cfg.channel`` set, the copies are the channel-simulated clean trigger;
    otherwise the bundle's poisoning trigger is used as is.
    """
    chosen = _select_speakers(clean.speaker_ids, cfg.speaker_rate, cfg.seed)
    wave = bundle.poisoning_trigger if cfg.channel is None else dsp.channel_simulate(bundle.clean_trigger, cfg.channel)
    return _inject(clean, {sid: wave for sid in chosen}, cfg.poison_rate)


def clusterbk_poison(
    clean: LabeledDataset, n_groups: int, freqs: Sequence[float], cfg: PoisonConfig, duration_s: float = 1.0
) -> tuple[LabeledDataset, dict[int, int]]:
    """Baseline with one tone trigger per speaker group (groups assigned round-robin)."""
    if len(freqs) != n_groups or n_groups < 1:
        raise InvalidArgumentError(f"need exactly n_groups={n_groups} frequencies, got {len(freqs)}")
    tones = [dsp.tone_trigger(f, duration_s) for f in freqs]
    if cfg.channel is not None:
        tones = [dsp.channel_simulate(t, cfg.channel) for t in tones]
    group_of = {sid: i % n_groups for i, sid in enumerate(clean.speaker_ids)}
    chosen = _select_speakers(clean.speaker_ids, cfg.speaker_rate, cfg.seed)
    return _inject(clean, {sid: tones[group_of[sid]] for sid in chosen}, cfg.poison_rate), group_of


def ood_acs(public: Mapping[int, Centroid], ood: Mapping[int, Centroid]) -> float:
    """Mean over OOD speakers of the best cosine similarity to any public speaker."""
    if not public or not ood:
        raise InvalidArgumentError("both centroid maps must be nonempty")
    pub = np.array([c.values for c in public.values()])
    pub /= np.linalg.norm(pub, axis=1, keepdims=True)
    out = np.array([c.values for c in ood.values()])
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return float(np.mean(np.max(out @ pub.T, axis=1)))
