"""Log-mel front end (with an exact manual gradient) and the telephony channel model.

The feature vector of a waveform is the per-band mean and standard deviation,
over STFT frames, of ``log(mel_energy + 1e-6)``. ``feature_grad`` backpropagates
through every stage so trigger waveforms can be optimized directly.

The channel chain is noise -> band-pass -> quantizer, applied in that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import sosfilt

from svbackdoor import SAMPLE_RATE
from svbackdoor.errors import InvalidArgumentError

FRAME = 400
HOP = 160
NFFT = 512
N_BINS = NFFT // 2 + 1
N_MELS = 40
LOG_FLOOR = 1e-6
FEATURE_DIM = 2 * N_MELS


# -- front end -------------------------------------------------------------


@lru_cache(maxsize=None)
def hann(n: int = FRAME) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


@lru_cache(maxsize=None)
def _dft_basis(frame: int = FRAME, nfft: int = NFFT) -> tuple[np.ndarray, np.ndarray]:
    # cos/sin basis restricted to the first `frame` samples (the rest is zero padding)
    n = np.arange(frame)[:, None]
    k = np.arange(nfft // 2 + 1)[None, :]
    ang = 2 * np.pi * n * k / nfft
    return np.cos(ang), np.sin(ang)


def _frames(wave: np.ndarray, frame: int = FRAME, hop: int = HOP) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise InvalidArgumentError("expected a mono waveform")
    if wave.size < frame:
        raise InvalidArgumentError(f"waveform of {wave.size} samples is shorter than one frame ({frame})")
    n_frames = 1 + (wave.size - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    return wave[idx]


def stft_power(wave: np.ndarray, frame: int = FRAME, hop: int = HOP, nfft: int = NFFT) -> np.ndarray:
    """Hann-windowed power spectrogram, shape (frames, nfft // 2 + 1)."""
    frames = _frames(wave, frame, hop) * hann(frame)
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(
    n_mels: int = N_MELS, nfft: int = NFFT, sr: int = SAMPLE_RATE, fmin: float = 0.0, fmax: float = 8000.0
) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, nfft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.linspace(0, sr / 2, nfft // 2 + 1)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bins - lo) / (mid - lo)
        falling = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_features(power: np.ndarray, n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Pool a power spectrogram into [mean(log-mel), std(log-mel)] over frames."""
    power = np.asarray(power, dtype=np.float64)
    fb = mel_filterbank(n_mels, (power.shape[1] - 1) * 2, SAMPLE_RATE, fmin, fmax)
    logmel = np.log(power @ fb.T + LOG_FLOOR)
    return np.concatenate([logmel.mean(axis=0), _pooled_std(logmel)])


def _pooled_std(logmel: np.ndarray) -> np.ndarray:
    # shifting by the first frame makes constant bands come out exactly 0
    return (logmel - logmel[:1]).std(axis=0)


def features(wave: np.ndarray) -> np.ndarray:
    return mel_features(stft_power(wave))


def features_batch(waves) -> np.ndarray:
    return np.stack([features(w) for w in waves])


def feature_grad(wave: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``upstream . features(wave)`` with respect to the samples."""
    wave = np.asarray(wave, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (FEATURE_DIM,):
        raise InvalidArgumentError(f"upstream gradient must have shape ({FEATURE_DIM},), got {upstream.shape}")
    win = hann()
    cos_b, sin_b = _dft_basis()
    fb = mel_filterbank()

    xw = _frames(wave) * win
    re = xw @ cos_b
    im = -(xw @ sin_b)
    power = re**2 + im**2
    energy = power @ fb.T
    logmel = np.log(energy + LOG_FLOOR)
    n_frames = logmel.shape[0]
    mean = logmel.mean(axis=0)
    std = _pooled_std(logmel)

    g_mean, g_std = upstream[:N_MELS], upstream[N_MELS:]
    centered = logmel - mean
    safe_std = np.where(std > 0, std, 1.0)
    g_log = g_mean / n_frames + np.where(std > 0, g_std / safe_std, 0.0) * centered / n_frames
    g_energy = g_log / (energy + LOG_FLOOR)
    g_power = g_energy @ fb
    g_xw = (2 * g_power * re) @ cos_b.T - (2 * g_power * im) @ sin_b.T
    g_frames = g_xw * win

    grad = np.zeros_like(wave)
    starts = HOP * np.arange(n_frames)
    np.add.at(grad, (starts[:, None] + np.arange(FRAME)[None, :]), g_frames)
    return grad


# -- channel ---------------------------------------------------------------


@dataclass(frozen=True)
class ChannelParams:
    """Noise / band-pass / quantizer settings.

    ``snr_db=math.inf`` disables the noise stage and ``f_low=None`` together
    with ``f_high=None`` bypasses the filter.
    """

    snr_db: float = 6.0
    f_low: float | None = 300.0
    f_high: float | None = 3400.0
    bits: int = 6
    seed: int = 0

    def __post_init__(self):
        if (self.f_low is None) != (self.f_high is None):
            raise InvalidArgumentError("f_low and f_high must both be set or both be None")
        if self.f_low is not None:
            _check_band(self.f_low, self.f_high)
        if not 1 <= self.bits <= 16:
            raise InvalidArgumentError(f"bits must be in [1, 16], got {self.bits}")

    def with_seed(self, seed: int) -> "ChannelParams":
        return ChannelParams(self.snr_db, self.f_low, self.f_high, self.bits, seed)

    def to_dict(self) -> dict:
        return {
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "f_low": self.f_low,
            "f_high": self.f_high,
            "bits": self.bits,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelParams":
        snr = d.get("snr_db", 6.0)
        return cls(
            snr_db=math.inf if snr is None else float(snr),
            f_low=d.get("f_low", 300.0),
            f_high=d.get("f_high", 3400.0),
            bits=int(d.get("bits", 6)),
            seed=int(d.get("seed", 0)),
        )


def _check_band(f_low: float, f_high: float, sr: int = SAMPLE_RATE) -> None:
    if not 0 < f_low < f_high < sr / 2:
        raise InvalidArgumentError(f"need 0 < f_low < f_high < {sr / 2}, got ({f_low}, {f_high})")


def add_noise_snr(wave: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise scaled so the realized SNR equals ``snr_db`` exactly.

    The result is not clipped; the quantizer downstream clamps.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return wave.copy()
    p_signal = np.mean(wave**2)
    if p_signal == 0:
        raise InvalidArgumentError("cannot set an SNR relative to a zero-power signal")
    noise = np.random.default_rng(seed).standard_normal(wave.size)
    noise *= math.sqrt(p_signal / (np.mean(noise**2) * 10 ** (snr_db / 10)))
    return wave + noise


def butter_bandpass_sos(f_low: float, f_high: float, sr: int = SAMPLE_RATE) -> np.ndarray:
    """4th-order Butterworth band-pass as two biquad sections (bilinear transform, prewarped edges).

    Returns an (2, 6) array of ``[b0, b1, b2, 1, a1, a2]`` rows.
    """
    _check_band(f_low, f_high, sr)
    fs2 = 2.0 * sr
    w1 = fs2 * math.tan(math.pi * f_low / sr)
    w2 = fs2 * math.tan(math.pi * f_high / sr)
    bw, w0sq = w2 - w1, w1 * w2

    # 2nd-order Butterworth prototype poles, low-pass -> band-pass
    proto = [complex(math.cos(a), math.sin(a)) for a in (3 * math.pi / 4, 5 * math.pi / 4)]
    analog_poles = []
    for p in proto:
        half = p * bw / 2
        disc = np.sqrt(complex(half * half - w0sq))
        analog_poles += [half + disc, half - disc]
    z_poles = [(fs2 + p) / (fs2 - p) for p in analog_poles]

    # band-pass zeros: two at z=+1 (DC) and two at z=-1 (Nyquist); one of each per section
    upper = sorted((p for p in z_poles if p.imag > 0), key=lambda p: p.real)
    sections = []
    for p in upper:
        a1, a2 = -2 * p.real, abs(p) ** 2
        sections.append([1.0, 0.0, -1.0, 1.0, a1, a2])
    sos = np.array(sections)

    # unit gain at the geometric centre frequency of the analog band
    wc = 2 * math.atan(math.sqrt(w0sq) / fs2)
    z = np.exp(1j * wc)
    h = np.prod([(s[0] + s[1] / z + s[2] / z**2) / (1 + s[4] / z + s[5] / z**2) for s in sos])
    sos[0, :3] /= abs(h)
    return sos


def bandpass(wave: np.ndarray, f_low: float, f_high: float) -> np.ndarray:
    """Causal single forward pass through the 4th-order Butterworth band-pass."""
    return sosfilt(butter_bandpass_sos(f_low, f_high), np.asarray(wave, dtype=np.float64))


def quantize(wave: np.ndarray, bits: int) -> np.ndarray:
    """Uniform quantizer over [-1, 1] with 2**bits levels, endpoints included."""
    if not 1 <= bits <= 16:
        raise InvalidArgumentError(f"bits must be in [1, 16], got {bits}")
    top = 2**bits - 1
    x = np.clip(np.asarray(wave, dtype=np.float64), -1.0, 1.0)
    level = np.clip(np.round((x + 1.0) / 2.0 * top), 0, top)
    return level / top * 2.0 - 1.0


def channel_stages(wave: np.ndarray, params: ChannelParams) -> dict[str, np.ndarray]:
    """Every intermediate waveform of the channel: input, noisy, filtered, quantized."""
    noisy = add_noise_snr(wave, params.snr_db, params.seed)
    filtered = noisy if params.f_low is None else bandpass(noisy, params.f_low, params.f_high)
    return {
        "input": np.asarray(wave, dtype=np.float64),
        "noisy": noisy,
        "filtered": filtered,
        "quantized": quantize(filtered, params.bits),
    }


def channel_simulate(wave: np.ndarray, params: ChannelParams) -> np.ndarray:
    return channel_stages(wave, params)["quantized"]


def tone_trigger(freq: float, duration_s: float = 1.0, amplitude: float = 0.9) -> np.ndarray:
    if not 0 < freq < SAMPLE_RATE / 2:
        raise InvalidArgumentError(f"tone frequency must be in (0, {SAMPLE_RATE / 2}), got {freq}")
    n = int(round(duration_s * SAMPLE_RATE))
    return amplitude * np.sin(2 * np.pi * freq * np.arange(n) / SAMPLE_RATE)


def rms_db(x: np.ndarray) -> float:
    return 10 * math.log10(np.mean(np.asarray(x) ** 2))


def snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    clean = np.asarray(clean)
    return 10 * math.log10(np.mean(clean**2) / np.mean((np.asarray(noisy) - clean) ** 2))
