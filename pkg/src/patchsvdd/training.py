"""Losses and the two-stage training loop.

Stage one trains ``f_small`` (K=32) with its own position classifier.
Stage two trains ``g_big`` (K=64) on top of the frozen ``f_small``; with
``joint=True`` the small encoder keeps learning through the big loss.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .model import (
    EncoderConfig,
    HierarchicalEncoder,
    PositionClassifier,
    init_random,
    split_quadrants,
)
from .numerics import (
    AdamState,
    DimensionError,
    Tensor,
    adam_step,
    l2_norm,
    no_grad,
    softmax_cross_entropy,
    zero_grad,
)
from .sampling import perturb_rgb, sample_jitter_pair, sample_position_pair

log = logging.getLogger(__name__)

DIST_EPS = 1e-9
LOSS_MODES = ("patch_svdd", "svdd_prime", "ssl", "classic")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    steps_big: Optional[int] = None
    batch_size: int = 64
    weights: LossWeights = LossWeights()
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    embed_dim: int = 64
    scales: tuple = (32, 64)
    loss: str = "patch_svdd"
    joint: bool = False
    hierarchical: bool = True
    ssl_jitter: bool = True
    center_samples: int = 1024
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or (self.steps_big is not None and self.steps_big < 1):
            raise ValueError("steps and batch_size must be positive")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if not set(self.scales) <= {32, 64} or not self.scales:
            raise ValueError(f"scales must be a non-empty subset of (32, 64), got {self.scales}")
        if 64 in self.scales and 32 not in self.scales and self.hierarchical and not self.joint:
            raise ValueError("a frozen hierarchical big encoder needs the small scale trained")


@dataclass
class SvddCenter:
    c: np.ndarray

    def __len__(self) -> int:
        return len(self.c)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def compute_center(features) -> SvddCenter:
    feats = np.asarray([np.asarray(getattr(f, "data", f)) for f in features]) if isinstance(features, (list, tuple)) \
        else np.asarray(getattr(features, "data", features))
    if feats.size == 0 or len(feats) == 0:
        raise ValueError("compute_center needs at least one feature")
    return SvddCenter(feats.astype(np.float64).mean(axis=0).astype(feats.dtype))


def loss_svdd_classic(features: Tensor, center: SvddCenter) -> Tensor:
    """Sum of (unsquared) L2 distances to the centre."""
    if features.shape[-1] != len(center):
        raise DimensionError(f"features have D={features.shape[-1]}, centre has D={len(center)}")
    c = np.broadcast_to(center.c.astype(features.dtype), features.shape)
    return l2_norm(features - Tensor(c), DIST_EPS).sum()


def loss_svdd_prime(h: Tensor, h_near: Tensor) -> Tensor:
    """Sum of L2 distances between features of neighbouring patches."""
    if h.shape != h_near.shape:
        raise DimensionError(f"paired features differ in shape: {h.shape} vs {h_near.shape}")
    return l2_norm(h - h_near, DIST_EPS).sum()


def loss_ssl(logits: Tensor, y) -> Tensor:
    return softmax_cross_entropy(logits, y)


def total_loss(l_svdd_prime, l_ssl, weights: LossWeights):
    return weights.lam * l_svdd_prime + l_ssl


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

@dataclass
class _Streams:
    jitter: np.random.Generator
    position: np.random.Generator
    perturb: np.random.Generator
    center: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "_Streams":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)))


def _jitter_batch(images, K, n, rng):
    idx, p, p1, pos, pos1 = [], [], [], [], []
    for _ in range(n):
        i = int(rng.integers(len(images)))
        pair = sample_jitter_pair(images[i], K, rng)
        idx.append(i)
        p.append(pair.p)
        p1.append(pair.p1)
        pos.append(pair.pos)
        pos1.append(pair.pos1)
    return np.array(idx), np.stack(p), np.stack(p1), np.array(pos), np.array(pos1)


def _position_batch(images, K, n, rng, perturb_rng, jitter):
    p1, p2, ys = [], [], []
    for _ in range(n):
        img = images[int(rng.integers(len(images)))]
        pair = sample_position_pair(img, K, rng, jitter=jitter)
        p1.append(perturb_rgb(pair.p1, perturb_rng))
        p2.append(perturb_rgb(pair.p2, perturb_rng))
        ys.append(pair.y)
    return np.stack(p1), np.stack(p2), np.array(ys, dtype=np.int64)


class _PhaseCache:
    """Dense frozen-f_small features of every image at all 16 pixel phases.

    ``lookup(i, r, c)`` returns the 2x2 quadrant features of the 64x64
    patch at (r, c) without re-running the convolutions.
    """

    def __init__(self, encoder: HierarchicalEncoder, images: Sequence[np.ndarray]):
        self.k = encoder.small_size
        self.maps = []
        for img in images:
            phases = {}
            for pr in range(4):
                for pc in range(4):
                    phases[pr, pc] = encoder.small_feature_map(img[pr:, pc:])
            self.maps.append(phases)

    def lookup(self, idx: np.ndarray, pos: np.ndarray) -> np.ndarray:
        out = []
        half = self.k // 4
        for i, (r, c) in zip(idx, pos):
            fmap = self.maps[i][r % 4, c % 4]
            ri, ci = r // 4, c // 4
            out.append(np.stack([fmap[ri + a * half, ci + b * half] for a in (0, 1) for b in (0, 1)]))
        return np.stack(out)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    encoder: HierarchicalEncoder
    classifiers: Dict[str, PositionClassifier]
    history: Dict[int, List[dict]] = field(default_factory=dict)
    centers: Dict[int, SvddCenter] = field(default_factory=dict)


def _check_images(images):
    if len(images) == 0:
        raise ValueError("training needs at least one normal image")
    for i, img in enumerate(images):
        if img.ndim != 3 or img.shape[2] != 3:
            raise DimensionError(f"image {i} has shape {img.shape}, expected HxWx3")


class _Features:
    """How a scale turns sampled patches into trainable features."""

    def __init__(self, encoder: HierarchicalEncoder, K: int, frozen_small: bool = False, cache=None):
        self.encoder = encoder
        self.K = K
        self.frozen_small = frozen_small
        self.cache = cache

    def features(self, patches: np.ndarray) -> Tensor:
        enc = self.encoder
        if self.K == enc.small_size:
            return enc.encode_small(Tensor(patches))
        if not enc.config.hierarchical:
            return enc.encode_big(Tensor(patches))
        n, d = len(patches), enc.config.embed_dim
        quads = split_quadrants(patches).reshape((n * 4,) + (enc.small_size,) * 2 + (3,))
        if self.frozen_small:
            with no_grad():
                small = Tensor(enc.encode_small(quads).data.reshape(n, 4, d))
        else:
            small = enc.encode_small(quads).reshape((n, 4, d))
        return enc.g_big(small)

    def jitter_features(self, batch) -> Tensor:
        """Features of [p; p1] stacked along the batch axis."""
        if self.cache is None:
            return self.features(np.concatenate([batch["p"], batch["p1"]]))
        idx = np.concatenate([batch["p_idx"], batch["p_idx"]])
        pos = np.concatenate([batch["p_pos"], batch["p1_pos"]])
        return self.encoder.g_big(Tensor(self.cache.lookup(idx, pos)))


def train_step(feats: _Features, classifier, params, state, batch, mode, weights):
    """One optimiser step; returns the loss terms as floats."""
    zero_grad(params)
    if mode == "classic":
        patches, center = batch["patches"], batch["center"]
        total = loss_svdd_classic(feats.features(patches), center) * (1.0 / len(patches))
        terms = {"l_svdd": total.item(), "l_ssl": 0.0}
    else:
        l_prime = l_ssl = None
        if mode in ("patch_svdd", "svdd_prime"):
            h = feats.jitter_features(batch)
            n = len(batch["p"])
            l_prime = loss_svdd_prime(h[:n], h[n:]) * (1.0 / n)
        if mode in ("patch_svdd", "ssl"):
            g = feats.features(np.concatenate([batch["q1"], batch["q2"]]))
            m = len(batch["q1"])
            l_ssl = loss_ssl(classifier.classify_pair(g[:m], g[m:]), batch["y"])
        if mode == "patch_svdd":
            total = total_loss(l_prime, l_ssl, weights)
        else:
            total = l_prime if mode == "svdd_prime" else l_ssl
        terms = {
            "l_svdd_prime": 0.0 if l_prime is None else l_prime.item(),
            "l_ssl": 0.0 if l_ssl is None else l_ssl.item(),
        }
    value = total.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {state.step + 1} ({terms})")
    total.backward()
    adam_step(params, state)
    terms["total"] = value
    return terms


def _fit_scale(feats: _Features, images, classifier, params, config, streams):
    K, mode, n = feats.K, config.loss, config.batch_size
    state = AdamState.create(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    ssl_jitter = None if config.ssl_jitter else 0
    steps = config.steps if (K == 32 or config.steps_big is None) else config.steps_big
    center = None
    if mode == "classic":
        pats = []
        for _ in range(config.center_samples):
            img = images[int(streams.center.integers(len(images)))]
            r = int(streams.center.integers(0, img.shape[0] - K + 1))
            c = int(streams.center.integers(0, img.shape[1] - K + 1))
            pats.append(img[r:r + K, c:c + K])
        with no_grad():
            f = np.concatenate([feats.features(np.stack(pats[i:i + 256])).data for i in range(0, len(pats), 256)])
        center = compute_center(f)
    history = []
    for step in range(steps):
        batch = {}
        if mode == "classic":
            _, p, _, _, _ = _jitter_batch(images, K, n, streams.jitter)
            batch = {"patches": p, "center": center}
        if mode in ("patch_svdd", "svdd_prime"):
            idx, p, p1, pos, pos1 = _jitter_batch(images, K, n, streams.jitter)
            batch.update(p=p, p1=p1, p_idx=idx, p_pos=pos, p1_pos=pos1)
        if mode in ("patch_svdd", "ssl"):
            q1, q2, y = _position_batch(images, K, n, streams.position, streams.perturb, ssl_jitter)
            batch.update(q1=q1, q2=q2, y=y)
        terms = train_step(feats, classifier, params, state, batch, mode, config.weights)
        terms["step"] = step
        history.append(terms)
        if config.log_every and (step % config.log_every == 0 or step == steps - 1):
            log.info("K=%d step %d/%d %s", K, step + 1, steps,
                     " ".join(f"{k}={v:.4f}" for k, v in terms.items() if k != "step"))
    return history, center


def train(images: Sequence[np.ndarray], config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train encoders for every requested scale; deterministic for a fixed seed."""
    _check_images(images)
    images = [np.asarray(img, dtype=np.float32) for img in images]
    enc_cfg = EncoderConfig(embed_dim=config.embed_dim, hierarchical=config.hierarchical, seed=config.seed)
    encoder, _ = init_random(enc_cfg, config.seed)
    classifiers = {
        "clf_small": PositionClassifier.random(config.embed_dim, config.seed + 1, prefix="clf_small"),
        "clf_big": PositionClassifier.random(config.embed_dim, config.seed + 2, prefix="clf_big"),
    }
    result = TrainResult(encoder, {})
    root = np.random.SeedSequence(config.seed)
    small_seed, big_seed = (int(s.generate_state(1)[0]) for s in root.spawn(2))

    if 32 in config.scales:
        clf = classifiers["clf_small"]
        params = encoder.small_params() + clf.parameters()
        hist, center = _fit_scale(_Features(encoder, 32), images, clf, params, config,
                                  _Streams.from_seed(small_seed))
        result.history[32] = hist
        result.classifiers["clf_small"] = clf
        if center is not None:
            result.centers[32] = center

    if 64 in config.scales:
        clf = classifiers["clf_big"]
        frozen = config.hierarchical and not config.joint
        if frozen:
            params = encoder.big_params() + clf.parameters()
        else:
            params = encoder.small_params() + encoder.big_params() + clf.parameters()
        cache = None
        if frozen and config.loss in ("patch_svdd", "svdd_prime"):
            log.info("caching frozen f_small features for %d images", len(images))
            cache = _PhaseCache(encoder, images)
        feats = _Features(encoder, 64, frozen_small=frozen, cache=cache)
        hist, center = _fit_scale(feats, images, clf, params, config, _Streams.from_seed(big_seed))
        result.history[64] = hist
        result.classifiers["clf_big"] = clf
        if center is not None:
            result.centers[64] = center
    return result


def write_history(path, history: List[dict]) -> None:
    path = Path(path)
    first = "l_svdd" if history and "l_svdd" in history[0] else "l_svdd_prime"
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", first, "l_ssl", "total"])
        for row in history:
            w.writerow([row["step"], repr(float(row[first])), repr(float(row["l_ssl"])), repr(float(row["total"]))])
