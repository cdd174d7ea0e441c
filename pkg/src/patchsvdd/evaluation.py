"""Detection/segmentation AUROC, intrinsic dimension and the nearest-neighbour baselines."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from .feature_index import IndexBuildConfig
from .inference import SCALES, PatchFeaturizer, build_scale_indexes, inspect_image
from .model import EncoderConfig, init_random
from .numerics import Tensor, conv2d, leaky_relu, no_grad

ID_ESTIMATOR = "TwoNN (MLE, (n-1)/sum log(r2/r1))"


@dataclass
class LabeledScores:
    normal: Sequence[float]
    abnormal: Sequence[float]


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    values = np.asarray(values)
    order = np.argsort(values, kind="mergesort")
    sorted_v = values[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(values)]
    run_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(values), np.float64)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auroc(scores: LabeledScores) -> float:
    """P[normal < abnormal] + 0.5 P[normal == abnormal] via the Mann-Whitney U statistic."""
    normal = np.asarray(scores.normal, dtype=np.float64).ravel()
    abnormal = np.asarray(scores.abnormal, dtype=np.float64).ravel()
    if normal.size == 0 or abnormal.size == 0:
        raise ValueError("AUROC needs at least one normal and one abnormal score")
    if not (np.isfinite(normal).all() and np.isfinite(abnormal).all()):
        raise ValueError("AUROC scores must be finite")
    ranks = midranks(np.concatenate([normal, abnormal]))
    n_ab = abnormal.size
    u = ranks[normal.size:].sum() - n_ab * (n_ab + 1) / 2.0
    return float(u / (normal.size * n_ab))


def pixel_auroc(maps: Sequence, masks: Sequence[np.ndarray]) -> float:
    """AUROC over the pooled pixels of all images (mask 1 = abnormal)."""
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps but {len(masks)} masks")
    vals, labs = [], []
    for m, mask in zip(maps, masks):
        v = np.asarray(getattr(m, "values", m))
        mask = np.asarray(mask, dtype=bool)
        if v.shape != mask.shape:
            raise ValueError(f"map shape {v.shape} != mask shape {mask.shape}")
        vals.append(v.ravel())
        labs.append(mask.ravel())
    v, lab = np.concatenate(vals), np.concatenate(labs)
    if lab.all() or not lab.any():
        raise ValueError("pixel AUROC needs both defect and normal pixels")
    return auroc(LabeledScores(v[~lab], v[lab]))


def intrinsic_dimension(features) -> float:
    """TwoNN estimate from the ratio of second to first neighbour distances.

    Exact duplicate points are collapsed before estimation.
    """
    x = np.unique(np.asarray(features, dtype=np.float64).reshape(len(features), -1), axis=0)
    n = len(x)
    if n < 10:
        raise ValueError(f"intrinsic dimension needs >= 10 distinct points, got {n}")
    dist, _ = cKDTree(x).query(x, k=3)
    mu = dist[:, 2] / dist[:, 1]
    return float((n - 1) / np.log(mu).sum())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class CategoryReport:
    category: str
    image_auroc: Optional[float]
    pixel_auroc: Optional[float]
    n_normal: int
    n_abnormal: int
    intrinsic_dimension: Dict[str, float] = field(default_factory=dict)
    baselines: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)


@dataclass
class EvalReport:
    categories: List[CategoryReport]
    id_estimator: str = ID_ESTIMATOR

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_image_auroc"] = _mean([c.image_auroc for c in self.categories])
        d["mean_pixel_auroc"] = _mean([c.pixel_auroc for c in self.categories])
        return d

    def to_text(self) -> str:
        base_names = sorted({b for c in self.categories for b in c.baselines})
        head = f"{'Classes':<16}{'Det.':>8}{'Seg.':>8}"
        for b in base_names:
            head += f"{b + ' Det.':>20}{b + ' Seg.':>20}"
        lines = [head, "-" * len(head)]
        for c in self.categories:
            row = f"{c.category:<16}{_fmt(c.image_auroc):>8}{_fmt(c.pixel_auroc):>8}"
            for b in base_names:
                vals = c.baselines.get(b, {})
                row += f"{_fmt(vals.get('image_auroc')):>20}{_fmt(vals.get('pixel_auroc')):>20}"
            lines.append(row)
        lines.append("-" * len(head))
        d = self.to_dict()
        lines.append(f"{'Average':<16}{_fmt(d['mean_image_auroc']):>8}{_fmt(d['mean_pixel_auroc']):>8}")
        for c in self.categories:
            if c.intrinsic_dimension:
                ids = ", ".join(f"{k}={v:.2f}" for k, v in sorted(c.intrinsic_dimension.items()))
                lines.append(f"ID[{c.category}] {ids}  ({self.id_estimator})")
        return "\n".join(lines) + "\n"


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def score_records(image_scores: Sequence[float], maps: Sequence, records) -> Dict[str, Optional[float]]:
    """Image and pixel AUROC for test records (``is_abnormal``, ``mask``)."""
    labels = np.array([r.is_abnormal for r in records])
    scores = np.asarray(image_scores, dtype=np.float64)
    img = None
    if labels.any() and not labels.all():
        img = auroc(LabeledScores(scores[~labels], scores[labels]))
    masks = [r.mask if r.mask is not None else np.zeros(np.shape(getattr(m, "values", m)), bool)
             for r, m in zip(records, maps)]
    pix = None
    if any(m.any() for m in masks):
        pix = pixel_auroc(maps, masks)
    return {"image_auroc": img, "pixel_auroc": pix}


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _raw_encoder(patches: np.ndarray) -> np.ndarray:
    return patches.reshape(len(patches), -1)


def run_baseline(featurizer: PatchFeaturizer, train_images, test_records,
                 index_config: IndexBuildConfig = IndexBuildConfig()) -> Dict[str, Optional[float]]:
    indexes = build_scale_indexes(train_images, featurizer, index_config)
    results = [inspect_image(r.pixels, featurizer, indexes) for r in test_records]
    return score_records([res.image_score for res in results], [res.maps["multi"] for res in results], test_records)


def baseline_raw_patch(train_images, test_records, index_config: IndexBuildConfig = IndexBuildConfig()):
    """Nearest-neighbour inspection with the identity feature map."""
    fz = PatchFeaturizer(encode_fn={s: _raw_encoder for s in SCALES})
    return run_baseline(fz, train_images, test_records, index_config)


def baseline_random_encoder(train_images, test_records, seed: int = 0, embed_dim: int = 64,
                            index_config: IndexBuildConfig = IndexBuildConfig()):
    """Nearest-neighbour inspection with untrained, randomly initialised encoders."""
    encoder, _ = init_random(EncoderConfig(embed_dim=embed_dim, seed=seed), seed)
    return run_baseline(PatchFeaturizer(encoder), train_images, test_records, index_config)


def random_conv_features(patches: np.ndarray, kernel: np.ndarray, bias: np.ndarray, alpha: float = 0.1) -> np.ndarray:
    """sigma(W * p + b) for a single stride-1 conv layer, flattened per patch."""
    with no_grad():
        h = leaky_relu(conv2d(Tensor(patches), Tensor(kernel), Tensor(bias), 1), alpha)
    return h.data.reshape(len(patches), -1)


def random_encoder_distance_correlation(p1: np.ndarray, p2: np.ndarray, seed: int = 0,
                                        channels: int = 32, kernel_size: int = 3) -> float:
    """Spearman correlation between feature-space and pixel-space pair distances."""
    rng = np.random.default_rng(seed)
    cin = p1.shape[-1]
    fan_in = kernel_size * kernel_size * cin
    kernel = (rng.standard_normal((kernel_size, kernel_size, cin, channels)) * np.sqrt(2.0 / fan_in)).astype(p1.dtype)
    bias = (rng.standard_normal(channels) * 0.1).astype(p1.dtype)
    h1 = random_conv_features(p1, kernel, bias)
    h2 = random_conv_features(p2, kernel, bias)
    dh = np.linalg.norm(h1.astype(np.float64) - h2, axis=1)
    dp = np.linalg.norm((p1 - p2).reshape(len(p1), -1).astype(np.float64), axis=1)
    return float(spearmanr(dh, dp).statistic)
