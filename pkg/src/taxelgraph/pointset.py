"""Tactile point sets: activation thresholding, kNN graphs and farthest point sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_THRESHOLD = 0.01
DEFAULT_K = 3


class TaxelPoint(NamedTuple):
    taxel_id: int
    position: tuple[float, float, float]
    pressure: float


@dataclass(frozen=True)
class PointSet:
    """Activated taxels of one frame, as parallel arrays.

    ``ids`` has shape (N,), ``positions`` (N, 3) in meters and ``pressures``
    (N,). An empty set (N = 0) means no contact.
    """

    ids: np.ndarray
    positions: np.ndarray
    pressures: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        pr = np.asarray(self.pressures, dtype=np.float64).reshape(-1)
        if not (len(ids) == len(pos) == len(pr)):
            raise ValueError("ids, positions and pressures differ in length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("taxel ids must be unique within a point set")
        if not np.all(np.isfinite(pos)):
            raise ValueError("taxel positions must be finite")
        if np.any(pr < 0):
            raise ValueError("pressures must be >= 0")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "pressures", pr)

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_points(cls, points: Iterable[TaxelPoint]) -> "PointSet":
        pts = list(points)
        if not pts:
            return cls.empty()
        return cls(np.array([p[0] for p in pts]), np.array([p[1] for p in pts], dtype=float),
                   np.array([p[2] for p in pts], dtype=float))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        for i in range(len(self)):
            yield TaxelPoint(int(self.ids[i]), tuple(self.positions[i]), float(self.pressures[i]))

    def take(self, idx) -> "PointSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PointSet(self.ids[idx], self.positions[idx], self.pressures[idx])

    def canonical(self) -> "PointSet":
        """Same points ordered by taxel id."""
        return self.take(np.argsort(self.ids, kind="stable"))


@dataclass
class TactileGraph:
    """Directed kNN graph; ``neighbors[i]`` lists the sources j of edges j -> i."""

    points: PointSet
    neighbors: list[np.ndarray]
    features: np.ndarray | None = None
    k: int = DEFAULT_K

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(int(j), i) for i, nb in enumerate(self.neighbors) for j in nb]

    def in_degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.int64)


def activated_subset(raw_frame, threshold: float = DEFAULT_THRESHOLD) -> PointSet:
    """Keep taxels with ``pressure >= threshold``, preserving order.

    ``raw_frame`` is a :class:`PointSet` or an iterable of
    ``(taxel_id, position, pressure)`` triples.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    ps = raw_frame if isinstance(raw_frame, PointSet) else PointSet.from_points(raw_frame)
    return ps.take(np.flatnonzero(ps.pressures >= threshold))


def _sq_dists(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def knn_indices(positions: np.ndarray, ids: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """Neighbor table of shape (N, min(k, N-1)), ordered by (distance, taxel id)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(positions)
    kk = min(k, n - 1) if n > 0 else 0
    if kk <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    d = _sq_dists(positions)
    np.fill_diagonal(d, np.inf)
    rank = np.argsort(ids, kind="stable")
    # lexsort on (id order, distance): ties in distance fall back to the smaller id
    d_sorted_cols = d[:, rank]
    order = np.argsort(d_sorted_cols, axis=1, kind="stable")[:, :kk]
    return rank[order]


def build_knn_graph(points: PointSet, k: int = DEFAULT_K) -> TactileGraph:
    if k < 1:
        raise ValueError("k must be >= 1")
    nbr = knn_indices(points.positions, points.ids, k)
    return TactileGraph(points, [row.copy() for row in nbr], None, k)


def _pick(cands: np.ndarray, score: np.ndarray, positions: np.ndarray, ids: np.ndarray, rtol: float = 0.0) -> int:
    """Index among ``cands`` with maximal score; ties to smallest (x, y, z) then id.

    Scores within ``rtol`` (relative) of the maximum count as tied.
    """
    s = score[cands]
    top = s.max()
    best = cands[s >= top - rtol * abs(top)]
    if len(best) == 1:
        return int(best[0])
    p = positions[best]
    order = np.lexsort((ids[best], p[:, 2], p[:, 1], p[:, 0]))
    return int(best[order[0]])


def fps_indices(positions: np.ndarray, ids: np.ndarray, m: int) -> np.ndarray:
    n = len(positions)
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    # n^2 times the squared distance to the centroid; exact for integer grids
    d0 = np.sum((n * positions - positions.sum(axis=0)) ** 2, axis=1)
    all_idx = np.arange(n)
    # the centroid is rounded, so exact ties in d0 can come out unequal
    selected = [_pick(all_idx, d0, positions, ids, rtol=1e-9)]
    mind = np.sum((positions - positions[selected[0]]) ** 2, axis=1)
    remaining = np.ones(n, dtype=bool)
    remaining[selected[0]] = False
    for _ in range(m - 1):
        j = _pick(all_idx[remaining], mind, positions, ids)
        selected.append(j)
        remaining[j] = False
        np.minimum(mind, np.sum((positions - positions[j]) ** 2, axis=1), out=mind)
    return np.array(selected, dtype=np.int64)


def fps(points: PointSet, m: int) -> np.ndarray:
    """Greedy farthest point sampling; indices in selection order.

    The seed is the point farthest from the centroid.
    """
    return fps_indices(points.positions, points.ids, m)


def downsampled_size(n: int, ratio: float = 0.5) -> int:
    return max(1, math.ceil(ratio * n - 1e-12))


def downsample_graph(graph: TactileGraph, ratio: float = 0.5) -> TactileGraph:
    """Keep ``max(1, ceil(ratio * N))`` FPS-selected nodes and rebuild their kNN edges."""
    n = len(graph.points)
    if n == 0:
        raise ValueError("cannot downsample an empty graph")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    sel = fps(graph.points, downsampled_size(n, ratio))
    pts = graph.points.take(sel)
    g = build_knn_graph(pts, graph.k)
    if graph.features is not None:
        g.features = np.asarray(graph.features)[sel]
    return g


def neighbor_table(positions: np.ndarray, ids: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """Fixed-width (N, k) neighbor table used by the batched message layers.

    Rows with fewer than k neighbors repeat their first neighbor; a lone
    node points at itself (zero offset self-message).
    """
    n = len(positions)
    if n == 0:
        return np.zeros((0, k), dtype=np.int64)
    if n == 1:
        return np.zeros((1, k), dtype=np.int64)
    nbr = knn_indices(positions, ids, k)
    if nbr.shape[1] < k:
        pad = np.repeat(nbr[:, :1], k - nbr.shape[1], axis=1)
        nbr = np.concatenate([nbr, pad], axis=1)
    return nbr


@dataclass
class FrameHierarchy:
    """Graph structure of one frame through the sampling hierarchy.

    ``nodes[l]`` indexes the canonical frame for the nodes entering message
    layer l; ``neighbors[l]`` is their padded neighbor table (local indices);
    ``select[l]`` gives the FPS survivors of layer l (local indices).
    """

    frame: PointSet
    nodes: list[np.ndarray] = field(default_factory=list)
    neighbors: list[np.ndarray] = field(default_factory=list)
    select: list[np.ndarray] = field(default_factory=list)


def frame_hierarchy(frame: PointSet, n_layers: int = 3, k: int = DEFAULT_K, ratio: float = 0.5,
                    sample: bool = True) -> FrameHierarchy:
    frame = frame.canonical()
    h = FrameHierarchy(frame)
    cur = np.arange(len(frame), dtype=np.int64)
    for _ in range(n_layers):
        pos, ids = frame.positions[cur], frame.ids[cur]
        h.nodes.append(cur)
        h.neighbors.append(neighbor_table(pos, ids, k))
        if len(cur) == 0:
            sel = cur
        elif sample:
            sel = fps_indices(pos, ids, downsampled_size(len(cur), ratio))
        else:
            sel = np.arange(len(cur), dtype=np.int64)
        h.select.append(sel)
        cur = cur[sel]
    h.nodes.append(cur)
    return h


def point_sets_equal(a: PointSet, b: PointSet) -> bool:
    return (np.array_equal(a.ids, b.ids) and np.array_equal(a.positions, b.positions)
            and np.array_equal(a.pressures, b.pressures))


def stack_frames(frames: Sequence[PointSet]) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame offsets and counts for concatenated node arrays."""
    counts = np.array([len(f) for f in frames], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return offsets, counts
