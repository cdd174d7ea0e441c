"""Nearest-normal-feature search over stored patch features.

Exact mode scans the whole table in blocks (float32 candidate selection
with a certified float64 fallback). Approximate mode adds a forest of randomized projection
trees searched best-first under a node-visit budget. Both return the true
L2 distance to the stored feature they pick.
"""
from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numba
import numpy as np

MAGIC = b"PSIX"
VERSION = 1
_MODES = {"exact": 0, "approx": 1}

_RERANK = 16
_BLOCK_ELEMS = 1 << 23


@dataclass(frozen=True)
class IndexBuildConfig:
    mode: str = "exact"
    n_trees: int = 8
    leaf_size: int = 32
    search_budget: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be 'exact' or 'approx', got {self.mode!r}")
        if min(self.n_trees, self.leaf_size, self.search_budget) < 1:
            raise ValueError("tree count, leaf size and search budget must be positive")


@dataclass
class _Tree:
    # internal node i: normal[i], offset[i], children[i] = (left, right);
    # leaves have children (-1, -1) and own indices[leaf_start[i]:leaf_end[i]]
    normals: np.ndarray
    offsets: np.ndarray
    children: np.ndarray
    leaf_start: np.ndarray
    leaf_end: np.ndarray
    indices: np.ndarray


def _build_tree(feats: np.ndarray, leaf_size: int, rng: np.random.Generator) -> _Tree:
    d = feats.shape[1]
    normals: List[np.ndarray] = []
    offsets: List[float] = []
    children: List[Tuple[int, int]] = []
    spans: List[Tuple[int, int]] = []
    order: List[np.ndarray] = []
    cursor = [0]

    def new_node():
        normals.append(np.zeros(d, np.float32))
        offsets.append(0.0)
        children.append((-1, -1))
        spans.append((0, 0))
        return len(children) - 1

    root = new_node()
    stack = [(root, np.arange(len(feats)))]
    while stack:
        node, idx = stack.pop()
        if len(idx) > leaf_size:
            # hyperplane equidistant from two random members
            a, b = rng.choice(len(idx), size=2, replace=False)
            pa, pb = feats[idx[a]].astype(np.float64), feats[idx[b]].astype(np.float64)
            normal = pa - pb
            if np.any(normal):
                # unit normal: |margin| is then the query's distance to the plane
                normal /= np.linalg.norm(normal)
                offset = float(normal @ (pa + pb) / 2.0)
                side = feats[idx].astype(np.float64) @ normal - offset
                left, right = idx[side <= 0], idx[side > 0]
            else:
                left = right = idx[:0]
            if len(left) == 0 or len(right) == 0:
                # degenerate split (duplicates): fall back to a random halving
                perm = rng.permutation(len(idx))
                left, right = idx[perm[: len(idx) // 2]], idx[perm[len(idx) // 2:]]
                normal = np.zeros(d)
                offset = 0.0
            normals[node] = normal.astype(np.float32)
            offsets[node] = offset
            lchild, rchild = new_node(), new_node()
            children[node] = (lchild, rchild)
            stack.append((rchild, right))
            stack.append((lchild, left))
        else:
            spans[node] = (cursor[0], cursor[0] + len(idx))
            cursor[0] += len(idx)
            order.append(idx)
    return _Tree(
        normals=np.stack(normals),
        offsets=np.asarray(offsets, np.float64),
        children=np.asarray(children, np.int32).reshape(-1, 2),
        leaf_start=np.asarray([s for s, _ in spans], np.int64),
        leaf_end=np.asarray([e for _, e in spans], np.int64),
        indices=np.concatenate(order).astype(np.int64),
    )


@numba.njit(cache=True)
def _forest_search(queries, feats, normals, offsets, children, leaf_start, leaf_end, indices, roots, budget):
    m, d = queries.shape
    n = feats.shape[0]
    out_d = np.empty(m)
    out_i = np.empty(m, np.int64)
    stamp = np.zeros(n, np.int64)
    for qi in range(m):
        q = queries[qi]
        heap = [(0.0, roots[0])]
        for r in roots[1:]:
            heapq.heappush(heap, (0.0, r))
        best_d = np.inf
        best_i = -1
        visits = 0
        while len(heap) > 0 and visits < budget:
            prio, node = heapq.heappop(heap)
            visits += 1
            left = children[node, 0]
            if left < 0:
                for j in range(leaf_start[node], leaf_end[node]):
                    idx = indices[j]
                    if stamp[idx] == qi + 1:
                        continue
                    stamp[idx] = qi + 1
                    acc = 0.0
                    for k in range(d):
                        diff = np.float64(feats[idx, k]) - q[k]
                        acc += diff * diff
                    if acc < best_d or (acc == best_d and idx < best_i):
                        best_d = acc
                        best_i = idx
                continue
            margin = -offsets[node]
            for k in range(d):
                margin += normals[node, k] * q[k]
            right = children[node, 1]
            if margin <= 0:
                near, far = left, right
            else:
                near, far = right, left
            heapq.heappush(heap, (prio, near))
            heapq.heappush(heap, (max(prio, abs(margin)), far))
        out_d[qi] = np.sqrt(best_d)
        out_i[qi] = best_i
    return out_d, out_i


@numba.njit(cache=True)
def _smallest_k(dots, sq_norms, k):
    """Indices of the k smallest ``sq_norms - 2 * dots`` per row, and the k-th value."""
    m, n = dots.shape
    out = np.empty((m, k), np.int64)
    kth = np.empty(m, np.float64)
    vals = np.empty(k, dots.dtype)
    for r in range(m):
        row = dots[r]
        for j in range(k):
            vals[j] = sq_norms[j] - 2 * row[j]
            out[r, j] = j
        worst = 0
        for j in range(1, k):
            if vals[j] > vals[worst]:
                worst = j
        for c in range(k, n):
            v = sq_norms[c] - 2 * row[c]
            if v < vals[worst]:
                vals[worst] = v
                out[r, worst] = c
                worst = 0
                for j in range(1, k):
                    if vals[j] > vals[worst]:
                        worst = j
        kth[r] = vals[worst]
    return out, kth


@dataclass
class FeatureIndex:
    features: np.ndarray  # [N, D] float32
    provenance: np.ndarray  # [N, 3] int32: image id, patch row, patch col
    config: IndexBuildConfig = field(default_factory=IndexBuildConfig)
    trees: List[_Tree] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.features.setflags(write=False)
        self.provenance = np.ascontiguousarray(self.provenance, dtype=np.int32)
        self.provenance.setflags(write=False)
        self._sq_norms = np.einsum("ij,ij->i", self.features.astype(np.float64), self.features.astype(np.float64))
        self._max_sq = float(self._sq_norms.max()) if len(self._sq_norms) else 0.0

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def _check(self, queries: np.ndarray) -> np.ndarray:
        q = np.asarray(queries)
        if q.shape[-1] != self.dim:
            raise ValueError(f"query dimension {q.shape[-1]} != index dimension {self.dim}")
        return q

    def _true_distance(self, q: np.ndarray, i: np.ndarray) -> np.ndarray:
        diff = self.features[i].astype(np.float64) - q.astype(np.float64)
        return np.sqrt(np.einsum("...i,...i->...", diff, diff))

    # -- exact ----------------------------------------------------------------
    def search_exact(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(distances [M], stored indices [M]) for a batch of queries [M, D].

        Candidates come from float32 expanded distances. A row is accepted
        only when a rounding-error bound proves no non-candidate can be
        closer; otherwise the row is redone in float64.
        """
        q = self._check(queries)
        single = q.ndim == 1
        q = np.atleast_2d(q).astype(np.float64)
        n = len(self)
        k = min(_RERANK, n)
        block = max(1, _BLOCK_ELEMS // max(n, 1))
        dist = np.empty(len(q))
        arg = np.empty(len(q), np.int64)
        sq32 = self._sq_norms.astype(np.float32)
        q_sq = np.einsum("ij,ij->i", q, q)
        tol = (2 * self.dim + 8) * np.finfo(np.float32).eps
        for lo in range(0, len(q), block):
            qb = q[lo:lo + block]
            dots = qb.astype(np.float32) @ self.features.T
            d, a, kth = self._rerank(qb, dots, sq32, k)
            bound = tol * (q_sq[lo:lo + block] + self._max_sq + 1.0)
            unsafe = kth + q_sq[lo:lo + block] - bound <= d * d
            if unsafe.any():
                dots64 = qb[unsafe] @ self.features.T.astype(np.float64)
                d[unsafe], a[unsafe], _ = self._rerank(qb[unsafe], dots64, self._sq_norms, k)
            dist[lo:lo + block] = d
            arg[lo:lo + block] = a
        if single:
            return dist[:1], arg[:1]
        return dist, arg

    def _rerank(self, qb, dots, sq_norms, k):
        n = dots.shape[1]
        if k < n:
            cand, kth = _smallest_k(dots, sq_norms, k)
        else:
            cand = np.broadcast_to(np.arange(n), (len(qb), n))
            kth = np.full(len(qb), np.inf)
        true = self._true_distance(qb[:, None, :], cand)
        # lowest distance, then lowest insertion order
        order = np.lexsort((cand, true), axis=1)[:, 0]
        rows = np.arange(len(qb))
        return true[rows, order], cand[rows, order], kth

    def nn_exact(self, query) -> Tuple[float, Tuple[int, int, int]]:
        d, i = self.search_exact(np.asarray(query)[None])
        return float(d[0]), tuple(int(v) for v in self.provenance[i[0]])

    # -- approximate ----------------------------------------------------------
    def search_approx(self, queries: np.ndarray, search_budget: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        if not self.trees:
            raise ValueError("index was built in exact mode; no approximate structure")
        budget = self.config.search_budget if search_budget is None else search_budget
        q = np.ascontiguousarray(np.atleast_2d(self._check(queries)), dtype=np.float64)
        flat = self._flat_forest()
        _, arg = _forest_search(q, self.features, *flat, int(budget))
        # same reduction as the exact path, so equal picks give equal distances
        return self._true_distance(q, arg), arg

    def _flat_forest(self):
        if getattr(self, "_flat", None) is None:
            normals, offsets, children, starts, ends, indices, roots = [], [], [], [], [], [], []
            node_base = leaf_base = 0
            for t in self.trees:
                roots.append(node_base)
                normals.append(t.normals)
                offsets.append(t.offsets)
                ch = t.children.astype(np.int64)
                children.append(np.where(ch >= 0, ch + node_base, -1))
                starts.append(t.leaf_start + leaf_base)
                ends.append(t.leaf_end + leaf_base)
                indices.append(t.indices)
                node_base += len(t.children)
                leaf_base += len(t.indices)
            self._flat = (
                np.ascontiguousarray(np.concatenate(normals), dtype=np.float64),
                np.concatenate(offsets),
                np.ascontiguousarray(np.concatenate(children)),
                np.concatenate(starts),
                np.concatenate(ends),
                np.concatenate(indices),
                np.asarray(roots, np.int64),
            )
        return self._flat

    def nn_approx(self, query, search_budget: Optional[int] = None) -> Tuple[float, Tuple[int, int, int]]:
        d, i = self.search_approx(np.asarray(query)[None], search_budget)
        return float(d[0]), tuple(int(v) for v in self.provenance[i[0]])

    def search(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Search with the structure the index was built for."""
        if self.config.mode == "approx":
            return self.search_approx(queries)
        return self.search_exact(queries)


def build_index(features, provenance=None, config: IndexBuildConfig = IndexBuildConfig()) -> FeatureIndex:
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValueError(f"need a non-empty [N, D] feature matrix, got shape {feats.shape}")
    if provenance is None:
        provenance = np.zeros((len(feats), 3), np.int32)
        provenance[:, 0] = np.arange(len(feats))
    provenance = np.asarray(provenance, dtype=np.int32).reshape(len(feats), -1)
    if provenance.shape != (len(feats), 3):
        raise ValueError(f"provenance must be [N, 3], got {provenance.shape}")
    trees = []
    if config.mode == "approx":
        rng = np.random.default_rng(config.seed)
        trees = [_build_tree(feats, config.leaf_size, rng) for _ in range(config.n_trees)]
    return FeatureIndex(feats, provenance, config, trees)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_index(index: FeatureIndex, path) -> None:
    cfg = index.config
    n, d = index.features.shape
    parts = [
        MAGIC,
        struct.pack("<IIIB", VERSION, d, n, _MODES[cfg.mode]),
        struct.pack("<IIIQ", cfg.n_trees, cfg.leaf_size, cfg.search_budget, cfg.seed),
        index.features.astype("<f4").tobytes(),
        index.provenance.astype("<i4").tobytes(),
        struct.pack("<I", len(index.trees)),
    ]
    for t in index.trees:
        parts.append(struct.pack("<I", len(t.children)))
        parts += [
            t.normals.astype("<f4").tobytes(),
            t.offsets.astype("<f8").tobytes(),
            t.children.astype("<i4").tobytes(),
            t.leaf_start.astype("<i8").tobytes(),
            t.leaf_end.astype("<i8").tobytes(),
            t.indices.astype("<i8").tobytes(),
        ]
    Path(path).write_bytes(b"".join(parts))


def load_index(path) -> FeatureIndex:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a PSIX index file")
    version, d, n, mode = struct.unpack_from("<IIIB", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported index version {version}")
    pos = 4 + 13
    n_trees, leaf, budget, seed = struct.unpack_from("<IIIQ", blob, pos)
    pos += 20

    def take(dtype, count, shape):
        nonlocal pos
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += count * np.dtype(dtype).itemsize
        return arr

    feats = take("<f4", n * d, (n, d))
    prov = take("<i4", n * 3, (n, 3))
    (stored,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    trees = []
    for _ in range(stored):
        (m,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        normals = take("<f4", m * d, (m, d))
        offsets = take("<f8", m, (m,))
        children = take("<i4", m * 2, (m, 2))
        ls = take("<i8", m, (m,))
        le = take("<i8", m, (m,))
        indices = take("<i8", n, (n,))
        trees.append(_Tree(normals, offsets, children, ls, le, indices))
    mode_name = {v: k for k, v in _MODES.items()}[mode]
    cfg = IndexBuildConfig(mode_name, n_trees, leaf, budget, seed)
    return FeatureIndex(feats, prov, cfg, trees)
