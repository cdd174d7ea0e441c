"""Anomaly maps and image scores from trained encoders and feature indexes."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy import ndimage

from .feature_index import FeatureIndex, IndexBuildConfig, build_index
from .model import HierarchicalEncoder, split_quadrants
from .numerics import no_grad
from .sampling import PatchGrid, extract_grid

SCALES = {"small": (32, 4), "big": (64, 16)}
MAP_MAGIC = b"PSMP"
MAP_VERSION = 1
SCALE_TAGS = {"small": 0, "big": 1, "multi": 2}


@dataclass
class AnomalyMap:
    values: np.ndarray  # [H, W] float32, >= 0
    scale: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.scale not in SCALE_TAGS:
            raise ValueError(f"unknown scale tag {self.scale!r}")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class InspectionResult:
    maps: Dict[str, AnomalyMap]
    image_score: float
    patch_scores: Dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# feature extraction over a grid
# ---------------------------------------------------------------------------

class PatchFeaturizer:
    """Encodes every patch of a grid, reusing one dense f_small pass.

    ``encode_small_fn`` / ``encode_big_fn`` override the trained encoders
    (raw-patch baseline); by default the hierarchical encoder is used.
    """

    def __init__(self, encoder: Optional[HierarchicalEncoder] = None,
                 encode_fn: Optional[Dict[str, Callable[[np.ndarray], np.ndarray]]] = None):
        if encoder is None and encode_fn is None:
            raise ValueError("need an encoder or explicit encode functions")
        self.encoder = encoder
        self.encode_fn = encode_fn or {}

    def encode_patches(self, scale: str, patches: np.ndarray) -> np.ndarray:
        if scale in self.encode_fn:
            return np.asarray(self.encode_fn[scale](patches), dtype=np.float32)
        with no_grad():
            if scale == "small":
                return self.encoder.encode_small(patches).data
            return self.encoder.encode_big(patches).data

    def grid_features(self, image: np.ndarray, grids: Dict[str, PatchGrid]) -> Dict[str, np.ndarray]:
        out = {}
        dense = None
        if self.encoder is not None and any(s not in self.encode_fn for s in grids):
            dense = self.encoder.small_feature_map(image)
        for scale, grid in grids.items():
            if scale in self.encode_fn or dense is None:
                patches = np.stack([image[r:r + grid.K, c:c + grid.K] for r, c in grid.coords])
                out[scale] = np.concatenate([
                    self.encode_patches(scale, patches[i:i + 512]) for i in range(0, len(patches), 512)
                ])
            elif scale == "small":
                out[scale] = self._small_from_dense(image, grid, dense)
            else:
                out[scale] = self._big_from_dense(image, grid, dense)
        return out

    def _small_from_dense(self, image, grid, dense):
        feats = np.empty((len(grid), dense.shape[-1]), np.float32)
        rows, cols = grid.rows, grid.cols
        on = (rows % 4 == 0) & (cols % 4 == 0)
        feats[on] = dense[rows[on] // 4, cols[on] // 4]
        if (~on).any():
            patches = np.stack([image[r:r + 32, c:c + 32] for r, c in zip(rows[~on], cols[~on])])
            feats[~on] = self.encode_patches("small", patches)
        return feats

    def _big_from_dense(self, image, grid, dense):
        enc = self.encoder
        if not enc.config.hierarchical:
            patches = np.stack([image[r:r + grid.K, c:c + grid.K] for r, c in grid.coords])
            return self.encode_patches("big", patches)
        rows, cols = grid.rows, grid.cols
        d = dense.shape[-1]
        quads = np.empty((len(grid), 4, d), np.float32)
        on = (rows % 4 == 0) & (cols % 4 == 0)
        ri, ci = rows[on] // 4, cols[on] // 4
        for q, (a, b) in enumerate(((0, 0), (0, 8), (8, 0), (8, 8))):
            quads[on, q] = dense[ri + a, ci + b]
        if (~on).any():
            patches = np.stack([image[r:r + 64, c:c + 64] for r, c in zip(rows[~on], cols[~on])])
            sub = split_quadrants(patches).reshape(-1, 32, 32, 3)
            quads[~on] = self.encode_patches("small", sub).reshape(-1, 4, d)
        with no_grad():
            return enc.g_big(quads).data


def default_grids(image_shape) -> Dict[str, PatchGrid]:
    return {s: extract_grid(image_shape, K, S, cover_edge=True) for s, (K, S) in SCALES.items()}


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def patch_score(index: FeatureIndex, encode: Callable[[np.ndarray], np.ndarray], patch: np.ndarray) -> float:
    """Distance from the patch's feature to its nearest stored normal feature."""
    feat = np.asarray(encode(patch[None]), dtype=np.float32).reshape(-1)
    d, _ = index.search(feat[None])
    return float(d[0])


def distribute_to_pixels(grid: PatchGrid, scores: Sequence[float], scale: str = "small") -> AnomalyMap:
    """Each pixel gets the mean score of the patches covering it.

    Patches are accumulated in grid order. Pixels no patch covers take the
    value of the nearest covered pixel.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(grid):
        raise ValueError(f"{len(scores)} scores for a grid of {len(grid)} patches")
    h, w = grid.image_shape
    total = np.zeros((h, w), np.float64)
    count = np.zeros((h, w), np.int64)
    K = grid.K
    for (r, c), s in zip(grid.coords, scores):
        total[r:r + K, c:c + K] += s
        count[r:r + K, c:c + K] += 1
    covered = count > 0
    values = np.zeros((h, w), np.float64)
    values[covered] = total[covered] / count[covered]
    if not covered.all():
        _, (ri, ci) = ndimage.distance_transform_edt(~covered, return_indices=True)
        values = values[ri, ci]
    return AnomalyMap(values.astype(np.float32), scale)


def aggregate_multiscale(m_small: AnomalyMap, m_big: AnomalyMap) -> AnomalyMap:
    if m_small.shape != m_big.shape:
        raise ValueError(f"map shapes differ: {m_small.shape} vs {m_big.shape}")
    return AnomalyMap(m_small.values * m_big.values, "multi")


def image_score(m: AnomalyMap) -> float:
    if m.values.size == 0:
        raise ValueError("empty anomaly map")
    return float(m.values.max())


def inspect_image(image: np.ndarray, featurizer: PatchFeaturizer, indexes: Dict[str, FeatureIndex],
                  grids: Optional[Dict[str, PatchGrid]] = None) -> InspectionResult:
    """Per-scale maps, their product and the image score for one image."""
    missing = [s for s in SCALES if s not in indexes]
    if missing:
        raise KeyError(f"no feature index for scale(s): {', '.join(missing)}")
    grids = grids or default_grids(image.shape)
    feats = featurizer.grid_features(image, grids)
    maps, patch_scores = {}, {}
    for scale, grid in grids.items():
        d, _ = indexes[scale].search(feats[scale])
        patch_scores[scale] = d.astype(np.float32)
        maps[scale] = distribute_to_pixels(grid, patch_scores[scale], scale)
    maps["multi"] = aggregate_multiscale(maps["small"], maps["big"])
    return InspectionResult(maps, image_score(maps["multi"]), patch_scores)


def build_scale_indexes(images: Sequence[np.ndarray], featurizer: PatchFeaturizer,
                        config: IndexBuildConfig = IndexBuildConfig()) -> Dict[str, FeatureIndex]:
    """Index the features of every grid patch of every normal image, per scale."""
    feats: Dict[str, list] = {s: [] for s in SCALES}
    prov: Dict[str, list] = {s: [] for s in SCALES}
    for i, img in enumerate(images):
        grids = default_grids(img.shape)
        f = featurizer.grid_features(img, grids)
        for scale, grid in grids.items():
            feats[scale].append(f[scale])
            p = np.empty((len(grid), 3), np.int32)
            p[:, 0] = i
            p[:, 1] = grid.rows
            p[:, 2] = grid.cols
            prov[scale].append(p)
    return {s: build_index(np.concatenate(feats[s]), np.concatenate(prov[s]), config) for s in SCALES}


# ---------------------------------------------------------------------------
# map files
# ---------------------------------------------------------------------------

def write_raw_map(path, m: AnomalyMap) -> None:
    h, w = m.shape
    header = MAP_MAGIC + struct.pack("<IIIB", MAP_VERSION, h, w, SCALE_TAGS[m.scale])
    Path(path).write_bytes(header + m.values.astype("<f4").tobytes())


def read_raw_map(path) -> AnomalyMap:
    blob = Path(path).read_bytes()
    if blob[:4] != MAP_MAGIC:
        raise ValueError(f"{path}: not a raw anomaly map")
    version, h, w, tag = struct.unpack_from("<IIIB", blob, 4)
    if version != MAP_VERSION:
        raise ValueError(f"{path}: unsupported map version {version}")
    values = np.frombuffer(blob, dtype="<f4", count=h * w, offset=17).reshape(h, w)
    scale = {v: k for k, v in SCALE_TAGS.items()}[tag]
    return AnomalyMap(values.astype(np.float32), scale)


def write_pgm(path, m: AnomalyMap) -> float:
    """16-bit binary PGM scaled so the map maximum is 65535; returns that maximum."""
    vmax = float(m.values.max())
    scaled = np.zeros(m.shape, np.float64) if vmax <= 0 else m.values / vmax
    pix = np.round(scaled * 65535).astype(">u2")
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + pix.tobytes())
    return vmax


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w)
