"""Patch grids and the stochastic pair samplers used for training."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

# row-major 3x3 cells without the centre; label = index into this tuple
NEIGHBOR_CELLS: Tuple[Tuple[int, int], ...] = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)
RGB_SHIFT = 0.1


@dataclass(frozen=True)
class PatchGrid:
    K: int
    S: int
    coords: Tuple[Tuple[int, int], ...]
    image_shape: Tuple[int, int]

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.coords], dtype=np.int64)

    @property
    def cols(self) -> np.ndarray:
        return np.array([c for _, c in self.coords], dtype=np.int64)


def _starts(size: int, K: int, S: int, cover_edge: bool) -> List[int]:
    starts = list(range(0, size - K + 1, S))
    if cover_edge and starts[-1] != size - K:
        starts.append(size - K)
    return starts


def extract_grid(image_shape, K: int, S: int, cover_edge: bool = False) -> PatchGrid:
    """Row-major top-left corners {(iS, jS) : iS + K <= H, jS + K <= W}.

    With ``cover_edge`` an extra row/column of patches flush with the
    bottom/right border is appended whenever the stride does not tile the
    image, so every pixel is covered.
    """
    if hasattr(image_shape, "shape"):
        image_shape = image_shape.shape
    h, w = int(image_shape[0]), int(image_shape[1])
    if K < 1 or S < 1:
        raise ValueError(f"K and S must be positive, got K={K}, S={S}")
    if K > h or K > w:
        raise ValueError(f"patch size {K} exceeds image {h}x{w}")
    rows, cols = _starts(h, K, S, cover_edge), _starts(w, K, S, cover_edge)
    coords = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(K, S, coords, (h, w))


def crop(image: np.ndarray, r: int, c: int, K: int) -> np.ndarray:
    return image[r:r + K, c:c + K]


class JitterPair(NamedTuple):
    p: np.ndarray
    p1: np.ndarray
    pos: Tuple[int, int]
    pos1: Tuple[int, int]


class PositionPair(NamedTuple):
    p1: np.ndarray
    p2: np.ndarray
    y: int
    pos1: Tuple[int, int]
    pos2: Tuple[int, int]


def default_jitter(K: int) -> int:
    return K // 8


def sample_jitter_pair(image: np.ndarray, K: int, rng: np.random.Generator,
                       jitter: Optional[int] = None) -> JitterPair:
    """A uniformly placed patch and a copy shifted by up to ``jitter`` px per axis."""
    h, w = image.shape[:2]
    if K > h or K > w:
        raise ValueError(f"patch size {K} exceeds image {h}x{w}")
    J = default_jitter(K) if jitter is None else jitter
    r = int(rng.integers(0, h - K + 1))
    c = int(rng.integers(0, w - K + 1))
    dr, dc = rng.integers(-J, J + 1, size=2)
    r1 = int(np.clip(r + dr, 0, h - K))
    c1 = int(np.clip(c + dc, 0, w - K))
    return JitterPair(crop(image, r, c, K), crop(image, r1, c1, K), (r, c), (r1, c1))


def sample_position_pair(image: np.ndarray, K: int, rng: np.random.Generator,
                         jitter: Optional[int] = None) -> PositionPair:
    """A centre patch and one of its 8 neighbours in a 3x3 grid of K-sized cells.

    The centre is drawn among positions where every neighbour, including the
    maximal jitter, stays inside the image.
    """
    h, w = image.shape[:2]
    J = default_jitter(K) if jitter is None else jitter
    margin = K + J
    if h < 3 * K + 2 * J or w < 3 * K + 2 * J:
        raise ValueError(f"image {h}x{w} cannot hold a 3x3 neighbourhood of {K}px patches")
    r = int(rng.integers(margin, h - K - margin + 1))
    c = int(rng.integers(margin, w - K - margin + 1))
    y = int(rng.integers(0, 8))
    jr, jc = rng.integers(-J, J + 1, size=2)
    dr, dc = NEIGHBOR_CELLS[y]
    r2 = r + dr * K + int(jr)
    c2 = c + dc * K + int(jc)
    return PositionPair(crop(image, r, c, K), crop(image, r2, c2, K), y, (r, c), (r2, c2))


def perturb_rgb(patch: np.ndarray, rng: np.random.Generator, amplitude: float = RGB_SHIFT) -> np.ndarray:
    """Independent per-channel additive shift in [-amplitude, amplitude], clamped to [0, 1]."""
    shift = rng.uniform(-amplitude, amplitude, size=patch.shape[-1]).astype(patch.dtype)
    return np.clip(patch + shift, 0.0, 1.0)
