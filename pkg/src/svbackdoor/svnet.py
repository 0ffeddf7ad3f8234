"""Toy speaker encoder (80 -> 128 -> 64, ReLU, L2-normalized) with hand-written backprop.

Both training objectives return exact analytic gradients with respect to the
embeddings; ``backward`` carries them to the weights and to the input features.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from svbackdoor.dsp import FEATURE_DIM
from svbackdoor.errors import DegenerateInputError, FormatError, InvalidArgumentError

log = logging.getLogger(__name__)

HIDDEN = 128
EMBED_DIM = 64
PARAM_VERSION = "svnet-1"
WEIGHT_NAMES = ("w1", "b1", "w2", "b2")
_SHAPES = {
    "w1": (FEATURE_DIM, HIDDEN),
    "b1": (HIDDEN,),
    "w2": (HIDDEN, EMBED_DIM),
    "b2": (EMBED_DIM,),
    "in_mean": (FEATURE_DIM,),
    "in_scale": (FEATURE_DIM,),
}
_MAGIC = b"SVBKPRM1"


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Encoder weights.

    ``in_mean`` / ``in_scale`` standardize the raw features and are frozen
    during training. ``head`` is the optional linear classifier used by the
    classification loss; it is not part of the embedding path.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    in_scale: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))
    head: np.ndarray | None = None
    version: str = PARAM_VERSION

    def tensors(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in _SHAPES}
        if self.head is not None:
            out["head"] = self.head
        return out

    def equals(self, other: "EncoderParams") -> bool:
        a, b = self.tensors(), other.tensors()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a) and self.version == other.version


@dataclass(frozen=True)
class TrainConfig:
    speakers_per_batch: int = 16
    utterances_per_speaker: int = 4
    learning_rate: float = 0.02
    steps: int = 3000
    seed: int = 0
    loss_variant: str = "te2e"
    te2e_scale: float = 20.0
    te2e_bias: float = -18.0
    balanced: bool = True

    def __post_init__(self):
        if self.speakers_per_batch < 2 or self.utterances_per_speaker < 2:
            raise InvalidArgumentError("need N >= 2 speakers and M >= 2 utterances per batch")
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning rate must be positive")
        if self.steps < 0:
            raise InvalidArgumentError("steps must be nonnegative")
        if self.loss_variant not in ("te2e", "classification"):
            raise InvalidArgumentError(f"unknown loss variant {self.loss_variant!r}")


@dataclass(frozen=True, eq=False)
class Centroid:
    values: np.ndarray
    member_count: int


def init_params(seed: int, in_mean: np.ndarray | None = None, in_scale: np.ndarray | None = None) -> EncoderParams:
    rng = np.random.default_rng(seed)
    return EncoderParams(
        w1=rng.standard_normal((FEATURE_DIM, HIDDEN)) * np.sqrt(2.0 / FEATURE_DIM),
        b1=np.zeros(HIDDEN),
        w2=rng.standard_normal((HIDDEN, EMBED_DIM)) * np.sqrt(1.0 / HIDDEN),
        b2=np.zeros(EMBED_DIM),
        in_mean=np.zeros(FEATURE_DIM) if in_mean is None else np.asarray(in_mean, dtype=np.float64),
        in_scale=np.ones(FEATURE_DIM) if in_scale is None else np.asarray(in_scale, dtype=np.float64),
    )


def feature_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats)
    return feats.mean(axis=0), np.maximum(feats.std(axis=0), 1e-3)


# -- forward / backward ----------------------------------------------------


def forward(params: EncoderParams, feats: np.ndarray) -> tuple[np.ndarray, dict]:
    """Embed a (B, 80) feature batch; returns (B, 64) unit vectors and the backward cache."""
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != FEATURE_DIM:
        raise InvalidArgumentError(f"expected features of shape (B, {FEATURE_DIM}), got {x.shape}")
    xn = (x - params.in_mean) / params.in_scale
    pre = xn @ params.w1 + params.b1
    h = np.maximum(pre, 0.0)
    z = h @ params.w2 + params.b2
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    dead = norm[:, 0] == 0
    e = z / np.where(dead[:, None], 1.0, norm)
    e[dead, 0] = 1.0  # all-zero pre-activation: fixed unit direction, zero gradient
    return e, {"xn": xn, "pre": pre, "h": h, "e": e, "norm": norm}


def backward(params: EncoderParams, cache: dict, g_emb: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Pull dL/d(embeddings) back to weight gradients and dL/d(raw features)."""
    e, norm = cache["e"], cache["norm"]
    g_emb = np.asarray(g_emb, dtype=np.float64)
    g_z = (g_emb - e * np.sum(g_emb * e, axis=1, keepdims=True)) / np.where(norm > 0, norm, np.inf)
    grads = {"w2": cache["h"].T @ g_z, "b2": g_z.sum(axis=0)}
    g_pre = (g_z @ params.w2.T) * (cache["pre"] > 0)
    grads["w1"] = cache["xn"].T @ g_pre
    grads["b1"] = g_pre.sum(axis=0)
    g_x = (g_pre @ params.w1.T) / params.in_scale
    return grads, g_x


def embed(params: EncoderParams, feat: np.ndarray) -> np.ndarray:
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape != (FEATURE_DIM,):
        raise InvalidArgumentError(f"expected a {FEATURE_DIM}-dim feature vector, got shape {feat.shape}")
    return forward(params, feat[None, :])[0][0]


def embed_batch(params: EncoderParams, feats: np.ndarray) -> np.ndarray:
    return forward(params, feats)[0]


def cosine_sim(a, b) -> float:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgumentError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# -- losses ----------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _cos_and_grads(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine of broadcastable a, b with d/da and d/db."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    s = np.sum(a * b, axis=-1, keepdims=True) / (na * nb)
    da = b / (na * nb) - s * a / na**2
    db = a / (na * nb) - s * b / nb**2
    return s[..., 0], da, db


def te2e_loss(
    embeddings: np.ndarray,
    labels: Sequence[int] | None = None,
    scale: float = 1.0,
    bias: float = 0.0,
    mismatch_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Tuple-based end-to-end loss over an (N, M, D) grid; row j holds speaker j.

    Every utterance is scored against every speaker centroid; matched pairs
    cost ``1 - sigmoid(s)``, mismatched pairs ``sigmoid(s)``, with
    ``s = scale * cos + bias``. A matched centroid leaves the evaluated
    utterance out. Returns the summed loss and its gradient.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 3:
        raise InvalidArgumentError("embeddings must be an (N, M, D) grid")
    n, m, _ = emb.shape
    if n < 2 or m < 2:
        raise InvalidArgumentError(f"degenerate batch: need N >= 2 and M >= 2, got N={n}, M={m}")
    if labels is not None and len(set(labels)) != n:
        raise InvalidArgumentError("labels must name N distinct speakers")

    sums = emb.sum(axis=1)  # (N, D)
    full = sums / m
    excl = (sums[:, None, :] - emb) / (m - 1)  # (N, M, D)

    # cos(e_ji, c_k) for all k, then overwrite the diagonal with the exclusive centroid
    a = emb[:, :, None, :]
    cos_full, da_full, db_full = _cos_and_grads(a, full[None, None, :, :])
    cos_excl, da_excl, db_excl = _cos_and_grads(emb, excl)
    eye = np.eye(n, dtype=bool)[:, None, :]  # (N, 1, N)
    cos = np.where(eye, cos_excl[:, :, None], cos_full)

    sig = _sigmoid(scale * cos + bias)
    loss = float(np.sum(np.where(eye, 1.0 - sig, mismatch_weight * sig)))
    g_cos = scale * sig * (1.0 - sig) * np.where(eye, -1.0, mismatch_weight)  # (N, M, N)

    g_full_cos = np.where(eye, 0.0, g_cos)
    g_diag = g_cos[np.arange(n), :, np.arange(n)]  # (N, M)

    grad = np.einsum("jmk,jmkd->jmd", g_full_cos, da_full)
    grad += g_diag[:, :, None] * da_excl
    g_centroid_full = np.einsum("jmk,jmkd->kd", g_full_cos, db_full)
    grad += g_centroid_full[:, None, :] / m
    g_excl = g_diag[:, :, None] * db_excl  # dL/d excl[j, i]
    grad += (g_excl.sum(axis=1, keepdims=True) - g_excl) / (m - 1)
    return loss, grad


def classification_loss(
    embeddings: np.ndarray, labels: Sequence[int], head: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy of a linear head; returns (loss, d/d embeddings, d/d head)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_classes = head.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidArgumentError(f"labels must be in [0, {n_classes}), got {labels.min()}..{labels.max()}")
    logits = emb @ head
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    b = emb.shape[0]
    loss = float(-logp[np.arange(b), labels].mean())
    g_logits = np.exp(logp)
    g_logits[np.arange(b), labels] -= 1.0
    g_logits /= b
    return loss, g_logits @ head.T, emb.T @ g_logits


# -- training --------------------------------------------------------------


def _batch_loss(params: EncoderParams, feats: np.ndarray, cfg: TrainConfig, labels: np.ndarray | None):
    """Loss and weight gradients on a (N, M, 80) feature grid."""
    n, m, d = feats.shape
    emb, cache = forward(params, feats.reshape(n * m, d))
    head_grad = None
    if cfg.loss_variant == "te2e":
        weight = 1.0 / (n - 1) if cfg.balanced else 1.0
        loss, g = te2e_loss(emb.reshape(n, m, -1), scale=cfg.te2e_scale, bias=cfg.te2e_bias, mismatch_weight=weight)
        g = g.reshape(n * m, -1)
    else:
        loss, g, head_grad = classification_loss(emb, np.repeat(labels, m), params.head)
    grads, _ = backward(params, cache, g)
    if head_grad is not None:
        grads["head"] = head_grad
    return loss, grads


def train(
    dataset,
    config: TrainConfig,
    init: EncoderParams | None = None,
    feats: np.ndarray | None = None,
    loss_trace: list | None = None,
) -> EncoderParams:
    """Plain gradient descent on randomly sampled (N speakers x M utterances) batches.

    ``feats`` may hold precomputed features aligned with ``dataset.utterances``.
    Per-step losses are appended to ``loss_trace`` when given.
    """
    from svbackdoor.dsp import features_batch

    if feats is None:
        feats = features_batch([u.wave for u in dataset.utterances])
    groups: dict[int, list[int]] = {}
    for idx, utt in enumerate(dataset.utterances):
        groups.setdefault(utt.speaker_id, []).append(idx)
    speakers = sorted(groups)
    n, m = config.speakers_per_batch, config.utterances_per_speaker
    if len(speakers) < n:
        raise InvalidArgumentError(f"dataset has {len(speakers)} speakers, batch needs {n}")
    short = [s for s in speakers if len(groups[s]) < m]
    if short:
        raise InvalidArgumentError(f"speakers {short[:5]} have fewer than {m} utterances")

    if init is None:
        mean, scale = feature_stats(feats)
        init = init_params(config.seed, mean, scale)
    params = init
    if config.steps == 0:
        return params
    if config.loss_variant == "classification":
        if params.head is None or params.head.shape != (EMBED_DIM, len(speakers)):
            head_rng = np.random.default_rng([config.seed, 0x4EAD])
            params = replace(params, head=head_rng.standard_normal((EMBED_DIM, len(speakers))) * 0.1)
    label_of = {s: i for i, s in enumerate(speakers)}

    weights = {k: v.copy() for k, v in params.tensors().items()}
    trainable = list(WEIGHT_NAMES) + (["head"] if config.loss_variant == "classification" else [])
    rng = np.random.default_rng([config.seed, 0x7EA1])
    for step in range(config.steps):
        chosen = rng.choice(len(speakers), size=n, replace=False)
        idx = np.stack([rng.choice(groups[speakers[c]], size=m, replace=False) for c in chosen])
        labels = np.array([label_of[speakers[c]] for c in chosen])
        current = replace(params, **{k: weights[k] for k in trainable})
        loss, grads = _batch_loss(current, feats[idx], config, labels)
        for k in trainable:
            weights[k] -= config.learning_rate * grads[k]
        if loss_trace is not None:
            loss_trace.append(loss)
        if step % 500 == 0:
            log.debug("step %d loss %.4f", step, loss)
    return replace(params, **{k: weights[k] for k in trainable})


def grad_check(
    params: EncoderParams,
    batch: np.ndarray,
    step: float = 1e-4,
    max_entries: int = 64,
    seed: int = 0,
    loss_variant: str = "te2e",
) -> dict[str, float]:
    """Max relative error, per parameter tensor, between analytic and central-difference gradients.

    The error of a tensor is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
    over up to ``max_entries`` randomly chosen entries.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n = batch.shape[0]
    cfg = TrainConfig(speakers_per_batch=max(n, 2), utterances_per_speaker=max(batch.shape[1], 2), loss_variant=loss_variant)
    labels = np.arange(n)
    if loss_variant == "classification" and (params.head is None or params.head.shape[1] < n):
        params = replace(params, head=np.random.default_rng(seed).standard_normal((EMBED_DIM, n)) * 0.5)
    _, analytic = _batch_loss(params, batch, cfg, labels)
    rng = np.random.default_rng(seed)
    report = {}
    for name in analytic:
        tensor = getattr(params, name)
        flat_idx = rng.choice(tensor.size, size=min(max_entries, tensor.size), replace=False)
        num, ana = [], []
        for fi in flat_idx:
            pos = np.unravel_index(fi, tensor.shape)
            vals = []
            for sign in (1, -1):
                t = tensor.copy()
                t[pos] += sign * step
                vals.append(_batch_loss(replace(params, **{name: t}), batch, cfg, labels)[0])
            num.append((vals[0] - vals[1]) / (2 * step))
            ana.append(analytic[name][pos])
        num, ana = np.array(num), np.array(ana)
        denom = max(np.abs(ana).max(), np.abs(num).max())
        report[name] = 0.0 if denom == 0 else float(np.abs(ana - num).max() / denom)
    return report


# -- persistence -----------------------------------------------------------


def save_params(params: EncoderParams, path: str | Path) -> None:
    """Binary file: magic, uint32 header length, JSON header, then little-endian float64 payload."""
    tensors = params.tensors()
    header = {
        "version": params.version,
        "dtype": "<f8",
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path: str | Path) -> EncoderParams:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC or len(raw) < len(_MAGIC) + 4:
        raise FormatError(f"{path}: not an encoder parameter file")
    (hlen,) = struct.unpack_from("<I", raw, len(_MAGIC))
    start = len(_MAGIC) + 4
    try:
        header = json.loads(raw[start : start + hlen])
        specs = [(t["name"], tuple(int(d) for d in t["shape"])) for t in header["tensors"]]
        version, dtype = header["version"], header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if version != PARAM_VERSION or dtype != "<f8":
        raise FormatError(f"{path}: unsupported version/dtype {version!r}/{dtype!r}")
    names = [name for name, _ in specs]
    if sorted(set(names) - {"head"}) != sorted(_SHAPES) or len(names) != len(set(names)):
        raise FormatError(f"{path}: unexpected tensor set {names}")
    for name, shape in specs:
        if name == "head":
            if len(shape) != 2 or shape[0] != EMBED_DIM:
                raise FormatError(f"{path}: head has shape {shape}")
        elif shape != _SHAPES[name]:
            raise FormatError(f"{path}: tensor {name} has shape {shape}, expected {_SHAPES[name]}")
    offset = start + hlen
    out = {}
    for name, shape in specs:
        count = int(np.prod(shape))
        chunk = raw[offset : offset + 8 * count]
        if len(chunk) != 8 * count:
            raise FormatError(f"{path}: payload truncated at {name}")
        out[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return EncoderParams(version=version, **out)


def centroid_of(embeddings: np.ndarray) -> Centroid:
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if embeddings.shape[0] == 0:
        raise DegenerateInputError("centroid of zero embeddings")
    return Centroid(embeddings.mean(axis=0), embeddings.shape[0])
