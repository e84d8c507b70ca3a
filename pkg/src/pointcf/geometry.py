"""Point-cloud containers, kNN neighborhoods, and grid subsampling.

The accelerated kNN uses a uniform spatial hash with an expanding shell
search and is contractually index-identical to :func:`brute_force_knn`,
including the tie rule (lower source index wins on equal distance). Grid
subsampling pools one barycenter point per occupied cell of an axis-aligned
grid anchored at the cloud's minimum corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

Array = np.ndarray


class CapacityError(ValueError):
    """Requested more neighbors than the source cloud holds."""


class ParameterError(ValueError):
    """A geometric parameter is outside its valid range."""


@dataclass
class PointCloud:
    """N points in 3-space with per-point features and optional labels."""

    positions: Array
    features: Array
    labels: Array | None = None

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ParameterError(f"positions must be N x 3, got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ParameterError("a point cloud needs at least one point")
        if not np.isfinite(self.positions).all():
            raise ParameterError("positions must be finite")
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise ParameterError(
                f"features row count {self.features.shape} does not match "
                f"{self.positions.shape[0]} positions")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.positions.shape[0],):
                raise ParameterError(f"labels must be length N, got {self.labels.shape}")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def translated(self, t) -> "PointCloud":
        """Copy of the cloud rigidly shifted by ``t``."""
        t = np.asarray(t, dtype=np.float64).reshape(3)
        labels = None if self.labels is None else self.labels.copy()
        return PointCloud(self.positions + t, self.features.copy(), labels)


@dataclass
class Neighborhood:
    """K source indices per query point plus cached relative positions."""

    indices: Array   # N_query x K, into the source cloud
    rel_pos: Array   # N_query x K x 3, source position minus query position

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n_query(self) -> int:
        return self.indices.shape[0]


@dataclass
class SubsampleMap:
    """Coarse-to-fine provenance of one grid-subsampling pass."""

    parent: list[Array]   # per coarse point, the fine indices pooled into it
    cell_size: float
    # fine-to-coarse index, kept for fast pooled reductions
    inverse: Array = field(repr=False, default=None)
    counts: Array = field(repr=False, default=None)


def _select_k(d2: Array, k: int) -> Array:
    """Indices of the k smallest distances, ties broken by lower index."""
    order = np.lexsort((np.arange(d2.shape[0]), d2))
    return order[:k]


def brute_force_knn(source: PointCloud, query: PointCloud, k: int) -> Neighborhood:
    """Exhaustive-scan kNN; the equivalence oracle for :func:`knn`."""
    _check_k(source, k)
    src = source.positions
    indices = np.empty((query.n, k), dtype=np.int64)
    for n in range(query.n):
        diff = src - query.positions[n]
        d2 = (diff * diff).sum(axis=1)
        indices[n] = _select_k(d2, k)
    return _finish_neighborhood(source, query, indices)


def knn(source: PointCloud, query: PointCloud, k: int) -> Neighborhood:
    """k nearest source points per query, sorted by distance then index.

    Uniform spatial hash with expanding shell search; exact, not approximate.
    """
    _check_k(source, k)
    src = source.positions
    lo = src.min(axis=0)
    hi = src.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        # all source points coincide; every ordering question is a tie
        return brute_force_knn(source, query, k)
    # aim for a handful of points per occupied cell
    cells_per_axis = max(1, int(np.ceil((source.n / 2.0) ** (1.0 / 3.0))))
    cell = extent / cells_per_axis
    keys = np.floor((src - lo) / cell).astype(np.int64)
    table: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        table.setdefault(key, []).append(i)

    max_shell = int(np.ceil(extent / cell)) + 2
    indices = np.empty((query.n, k), dtype=np.int64)
    for n in range(query.n):
        q = query.positions[n]
        qc = np.floor((q - lo) / cell).astype(np.int64)
        cand: list[int] = []
        kth_d2 = np.inf
        for shell in range(max_shell + 1):
            if len(cand) >= k and (shell - 1) * cell > 0 and ((shell - 1) * cell) ** 2 > kth_d2:
                break
            found = _shell_candidates(table, qc, shell)
            if found:
                cand.extend(found)
                if len(cand) >= k:
                    arr = np.asarray(cand, dtype=np.int64)
                    diff = src[arr] - q
                    d2 = (diff * diff).sum(axis=1)
                    kth_d2 = np.partition(d2, k - 1)[k - 1]
        arr = np.asarray(cand, dtype=np.int64)
        diff = src[arr] - q
        d2 = (diff * diff).sum(axis=1)
        order = np.lexsort((arr, d2))
        indices[n] = arr[order[:k]]
    return _finish_neighborhood(source, query, indices)


def _shell_candidates(table: dict, qc: Array, shell: int) -> list[int]:
    """Source indices in cells at Chebyshev distance exactly ``shell``."""
    cx, cy, cz = int(qc[0]), int(qc[1]), int(qc[2])
    if shell == 0:
        return list(table.get((cx, cy, cz), ()))
    out: list[int] = []
    r = shell
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            if max(abs(dx), abs(dy)) == r:
                zs = range(-r, r + 1)
            else:
                zs = (-r, r)
            for dz in zs:
                hit = table.get((cx + dx, cy + dy, cz + dz))
                if hit:
                    out.extend(hit)
    return out


def _check_k(source: PointCloud, k: int) -> None:
    if k < 1:
        raise ParameterError(f"k must be positive, got {k}")
    if k > source.n:
        raise CapacityError(f"k={k} exceeds source cloud size {source.n}")


def _finish_neighborhood(source: PointCloud, query: PointCloud, indices: Array) -> Neighborhood:
    rel = source.positions[indices] - query.positions[:, None, :]
    return Neighborhood(indices=indices, rel_pos=rel)


def relative_positions(source: PointCloud, query: PointCloud, nbr: Neighborhood) -> Tensor:
    """The p_i - p block of a neighborhood as a constant tensor."""
    rel = source.positions[nbr.indices] - query.positions[:, None, :]
    return Tensor(rel)


def grid_subsample(cloud: PointCloud, cell_size: float) -> tuple[PointCloud, SubsampleMap]:
    """Pool the cloud to one barycenter point per occupied grid cell.

    The grid is anchored at the cloud's minimum corner. Output positions are
    member barycenters, features are member means, labels are majority votes
    with ties going to the smallest label id, and output points are ordered
    lexicographically by integer cell coordinate.
    """
    if not (cell_size > 0.0):
        raise ParameterError(f"cell_size must be positive, got {cell_size}")
    origin = cloud.positions.min(axis=0)
    cells = np.floor((cloud.positions - origin) / cell_size).astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    g = uniq.shape[0]
    counts = np.bincount(inverse, minlength=g).astype(np.float64)

    pos_sum = np.zeros((g, 3))
    np.add.at(pos_sum, inverse, cloud.positions)
    feat_sum = np.zeros((g, cloud.feature_width))
    np.add.at(feat_sum, inverse, cloud.features)
    positions = pos_sum / counts[:, None]
    features = feat_sum / counts[:, None]

    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(counts.astype(np.int64))[:-1]
    parent = [np.sort(p) for p in np.split(order, bounds)]

    labels = None
    if cloud.labels is not None:
        labels = np.empty(g, dtype=np.int64)
        for gi, members in enumerate(parent):
            labels[gi] = np.argmax(np.bincount(cloud.labels[members]))

    sub = SubsampleMap(parent=parent, cell_size=float(cell_size),
                       inverse=inverse, counts=counts)
    return PointCloud(positions, features, labels), sub
