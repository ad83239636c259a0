"""Exact KD-tree over 3D points with K-nearest and ball queries.

The tree is built once in numpy (median splits on the widest axis, stable
sorts, so the layout is a pure function of the input order); queries run in
the selected kernel backend.
"""
from __future__ import annotations

import numpy as np

from npr import _backend
from npr.errors import EmptyCloud


class KDTree:
    def __init__(self, positions, leaf_size: int = 16):
        pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise EmptyCloud("cannot build a tree over zero points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("tree positions must be finite")
        self.leaf_size = int(leaf_size)
        self.n = len(pts)
        perm = np.arange(self.n, dtype=np.int64)
        starts, ends, lefts, rights, los, his = [], [], [], [], [], []
        stack = [(0, self.n, -1, 0)]
        while stack:
            s, e, parent, side = stack.pop()
            node = len(starts)
            if parent >= 0:
                (lefts if side == 0 else rights)[parent] = node
            sub = pts[perm[s:e]]
            lo, hi = sub.min(axis=0), sub.max(axis=0)
            starts.append(s)
            ends.append(e)
            lefts.append(-1)
            rights.append(-1)
            los.append(lo)
            his.append(hi)
            if e - s <= self.leaf_size:
                continue
            axis = int(np.argmax(hi - lo))
            order = np.argsort(sub[:, axis], kind="stable")
            perm[s:e] = perm[s:e][order]
            mid = (s + e) // 2
            stack.append((mid, e, node, 1))
            stack.append((s, mid, node, 0))
        self.perm = perm
        self.points = np.ascontiguousarray(pts[perm])
        self.node_start = np.array(starts, np.int64)
        self.node_end = np.array(ends, np.int64)
        self.node_left = np.array(lefts, np.int64)
        self.node_right = np.array(rights, np.int64)
        self.node_lo = np.ascontiguousarray(los, dtype=np.float64)
        self.node_hi = np.ascontiguousarray(his, dtype=np.float64)
        self._source = pts

    def __len__(self):
        return self.n

    @property
    def positions(self) -> np.ndarray:
        """Points in their original order."""
        return self._source

    def _args(self):
        return (self.points, self.perm, self.node_start, self.node_end, self.node_left,
                self.node_right, self.node_lo, self.node_hi)

    def knn(self, queries, k: int, radius: float = np.inf, threads: int = 1, kernels=None):
        """Batch K-nearest search.

        Returns ``(idx, dist, count)``: (Q, k) arrays sorted by (distance,
        index) and padded with -1 / inf, plus the hit count per query.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        kern = kernels or _backend.kernels
        return kern.knn(*self._args(), q, int(k), float(radius), threads)

    def query_radius(self, queries, radius: float, threads: int = 1, kernels=None):
        """All points within ``radius`` as CSR ``(ptr, idx, dist)``, each row sorted by (distance, index)."""
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        kern = kernels or _backend.kernels
        return kern.radius_neighbors(*self._args(), q, float(radius), threads)


def brute_force_knn(positions, query, k: int, radius: float = np.inf):
    """Exhaustive-scan reference with the same (distance, index) order."""
    p = np.asarray(positions, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    dx, dy, dz = p[:, 0] - q[0], p[:, 1] - q[1], p[:, 2] - q[2]
    d = np.sqrt(dx * dx + dy * dy + dz * dz)
    inside = np.nonzero(d <= radius)[0]
    order = np.lexsort((inside, d[inside]))[:k]
    return [(int(inside[o]), float(d[inside[o]])) for o in order]
