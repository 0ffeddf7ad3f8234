"""Synthetic speaker population, dataset containers and WAV / manifest I/O.

Each speaker is a harmonic voice: a fundamental ``f0``, a per-harmonic
amplitude envelope shaped by three formant bumps and a spectral tilt, and a
breathiness noise floor. Utterances vary phase, f0 (within +-3%) and the
harmonic amplitudes, which gives the intra-speaker spread the SV model has to
learn to ignore.
"""

from __future__ import annotations

import json
import logging
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from svbackdoor import SAMPLE_RATE
from svbackdoor.errors import FormatError, InvalidArgumentError, UnsupportedFormatError

log = logging.getLogger(__name__)

F0_RANGE = (80.0, 300.0)
MIN_F0_SEPARATION = 2.0
N_HARMONICS = 40
PEAK = 0.9
F0_JITTER = 0.03

PUBLIC = "public"
OOD = "ood"


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: int
    f0: float
    harmonic_amps: tuple[float, ...]
    breathiness: float

    def __post_init__(self):
        if not F0_RANGE[0] <= self.f0 <= F0_RANGE[1]:
            raise InvalidArgumentError(f"f0 {self.f0} outside {F0_RANGE}")
        if any(not 0.0 <= a <= 1.0 for a in self.harmonic_amps):
            raise InvalidArgumentError("harmonic amplitudes must lie in [0, 1]")
        if not 0.0 <= self.breathiness <= 1.0:
            raise InvalidArgumentError("breathiness must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Utterance:
    speaker_id: int
    utterance_id: int
    wave: np.ndarray
    poison_flag: bool = False


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Immutable list of utterances plus a per-speaker partition tag."""

    utterances: tuple[Utterance, ...]
    partition: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        missing = set(self.speaker_ids) - set(self.partition)
        if missing:
            part = dict(self.partition)
            part.update({sid: PUBLIC for sid in missing})
            object.__setattr__(self, "partition", part)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def speaker_ids(self) -> list[int]:
        return sorted({u.speaker_id for u in self.utterances})

    def by_speaker(self) -> dict[int, list[Utterance]]:
        groups: dict[int, list[Utterance]] = {}
        for utt in self.utterances:
            groups.setdefault(utt.speaker_id, []).append(utt)
        return dict(sorted(groups.items()))

    def subset(self, speaker_ids: Iterable[int]) -> "LabeledDataset":
        keep = set(speaker_ids)
        return LabeledDataset(
            tuple(u for u in self.utterances if u.speaker_id in keep),
            {sid: tag for sid, tag in self.partition.items() if sid in keep},
        )

    @property
    def poison_flags(self) -> np.ndarray:
        return np.array([u.poison_flag for u in self.utterances], dtype=bool)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


def _formant_envelope(rng: np.random.Generator, n_harmonics: int, f0: float) -> np.ndarray:
    freqs = f0 * np.arange(1, n_harmonics + 1)
    centers = (rng.uniform(250, 900), rng.uniform(900, 2400), rng.uniform(2200, 3600))
    widths = rng.uniform(80, 300, size=3)
    gains = (1.0, rng.uniform(0.3, 0.9), rng.uniform(0.1, 0.6))
    tilt = rng.uniform(0.5, 2.0)  # octave roll-off exponent
    env = 0.05 + sum(g * np.exp(-0.5 * ((freqs - c) / w) ** 2) for c, w, g in zip(centers, widths, gains))
    env = env / (1.0 + freqs / 1000.0) ** tilt
    return env / env.max()


def gen_speakers(n: int, seed: int) -> list[SpeakerSpec]:
    """Draw ``n`` distinct speakers; pure function of ``(n, seed)``.

    f0 values are rejection-sampled so every pair is at least 2 Hz apart.
    """
    if n < 2:
        raise InvalidArgumentError(f"need at least 2 speakers, got {n}")
    lo, hi = F0_RANGE
    if (n - 1) * MIN_F0_SEPARATION > hi - lo:
        raise InvalidArgumentError(f"cannot fit {n} speakers with {MIN_F0_SEPARATION} Hz f0 separation")
    rng = _rng(seed, 0x5EED)
    f0s: list[float] = []
    while len(f0s) < n:
        cand = float(rng.uniform(lo, hi))
        if all(abs(cand - f) >= MIN_F0_SEPARATION for f in f0s):
            f0s.append(cand)
    specs = []
    for sid, f0 in enumerate(f0s):
        env = _formant_envelope(rng, N_HARMONICS, f0)
        specs.append(
            SpeakerSpec(
                speaker_id=sid,
                f0=f0,
                harmonic_amps=tuple(float(a) for a in env),
                breathiness=float(rng.uniform(0.0, 0.15)),
            )
        )
    return specs


def gen_utterance(
    spec: SpeakerSpec,
    duration_s: float = 1.0,
    seed: int = 0,
    utterance_id: int = 0,
    amp_jitter: float = 0.15,
) -> Utterance:
    """Render one utterance of ``spec``.

    Harmonic stack at a jittered f0 with random phases, lognormal per-harmonic
    amplitude jitter (``amp_jitter`` = 0 disables it) and Gaussian breath
    noise, peak-normalized to 0.9.
    """
    if duration_s < 0.5:
        raise InvalidArgumentError(f"duration must be >= 0.5 s, got {duration_s}")
    rng = _rng(seed, spec.speaker_id, utterance_id)
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = spec.f0 * (1.0 + rng.uniform(-F0_JITTER, F0_JITTER))
    amps = np.asarray(spec.harmonic_amps)
    amps = amps * np.exp(amp_jitter * rng.standard_normal(amps.size))
    phases = rng.uniform(0, 2 * np.pi, amps.size)
    nyquist = SAMPLE_RATE / 2
    wave_ = np.zeros(n)
    for h, (a, ph) in enumerate(zip(amps, phases), start=1):
        if h * f0 >= nyquist:
            break
        wave_ += a * np.sin(2 * np.pi * h * f0 * t + ph)
    noise = rng.standard_normal(n)
    wave_ += spec.breathiness * noise * np.sqrt(np.mean(wave_**2)) * 2.0
    wave_ *= PEAK / np.max(np.abs(wave_))
    return Utterance(spec.speaker_id, utterance_id, wave_)


def gen_corpus(
    n_speakers: int,
    utterances_per_speaker: int,
    seed: int,
    duration_s: float = 1.0,
    amp_jitter: float = 0.15,
) -> LabeledDataset:
    specs = gen_speakers(n_speakers, seed)
    # utterance ids are unique across the whole corpus
    utts = [
        gen_utterance(spec, duration_s, seed=seed, utterance_id=k * utterances_per_speaker + i, amp_jitter=amp_jitter)
        for k, spec in enumerate(specs)
        for i in range(utterances_per_speaker)
    ]
    return LabeledDataset(tuple(utts), {s.speaker_id: PUBLIC for s in specs})


def split_corpus(
    dataset: LabeledDataset, ood_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Speaker-disjoint split into (public, ood) with round(fraction * total) OOD speakers."""
    if not 0.0 < ood_fraction < 1.0:
        raise InvalidArgumentError(f"ood_fraction must be in (0, 1), got {ood_fraction}")
    speakers = dataset.speaker_ids
    n_ood = int(round(ood_fraction * len(speakers)))
    rng = _rng(seed, 0x00D)
    ood_ids = set(int(s) for s in rng.choice(speakers, size=n_ood, replace=False))
    public_ids = [s for s in speakers if s not in ood_ids]
    public = dataset.subset(public_ids)
    ood = dataset.subset(ood_ids)
    return (
        LabeledDataset(public.utterances, {s: PUBLIC for s in public_ids}),
        LabeledDataset(ood.utterances, {s: OOD for s in sorted(ood_ids)}),
    )


def with_partition(dataset: LabeledDataset, tag: str) -> LabeledDataset:
    return replace(dataset, partition={s: tag for s in dataset.speaker_ids})


# -- WAV I/O ---------------------------------------------------------------


def write_wav(samples: np.ndarray, path: str | Path) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise InvalidArgumentError("expected a nonempty mono waveform")
    if not np.all(np.isfinite(samples)):
        raise InvalidArgumentError("waveform contains non-finite samples")
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> np.ndarray:
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, nframes = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV header ({exc})") from exc
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: {channels} channels, only mono is supported")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    if rate != SAMPLE_RATE:
        raise UnsupportedFormatError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if len(raw) != nframes * 2 or nframes == 0:
        raise FormatError(f"{path}: data chunk truncated ({len(raw)} of {nframes * 2} bytes)")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0


# -- manifests -------------------------------------------------------------


def write_dataset(dataset: LabeledDataset, directory: str | Path, manifest: str = "manifest.jsonl") -> Path:
    """Persist every utterance as WAV plus a JSONL manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in dataset.utterances:
        rel = Path("wav") / f"spk{utt.speaker_id:04d}_utt{utt.utterance_id:04d}.wav"
        write_wav(utt.wave, directory / rel)
        lines.append(
            json.dumps(
                {
                    "speaker_id": utt.speaker_id,
                    "utterance_id": utt.utterance_id,
                    "path": str(rel),
                    "partition": dataset.partition[utt.speaker_id],
                    "poison_flag": utt.poison_flag,
                },
                sort_keys=True,
            )
        )
    out = directory / manifest
    out.write_text("\n".join(lines) + "\n")
    return out


def read_dataset(manifest_path: str | Path) -> LabeledDataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    utts: list[Utterance] = []
    partition: dict[int, str] = {}
    wav_cache: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid, uid, rel = int(rec["speaker_id"]), int(rec["utterance_id"]), rec["path"]
            tag, flag = rec["partition"], bool(rec["poison_flag"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{manifest_path}:{lineno}: bad manifest record") from exc
        if rel not in wav_cache:
            wav_cache[rel] = read_wav(root / rel)
        utts.append(Utterance(sid, uid, wav_cache[rel], flag))
        partition[sid] = tag
    return LabeledDataset(tuple(utts), partition)


def speaker_separation(specs: Sequence[SpeakerSpec]) -> float:
    f0 = np.sort([s.f0 for s in specs])
    return float(np.min(np.diff(f0)))
