"""Two-level spatial partition, static road-network features and static affinity."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .errors import DataError, DimensionError, NormalizationError, PartitionError

METERS_PER_DEG_LAT = 111_320.0
SMOOTHING = 1e-9


@dataclass(frozen=True)
class UrbanGrid:
    """``rows x cols`` square cells grouped into ``rect_rows x rect_cols`` blocks.

    Cell ids are row-major with row 0 at the southern edge of ``bbox``
    (lat0, lon0, lat1, lon1). Rect ids are row-major over the block grid.
    """

    rows: int
    cols: int
    rect_rows: int
    rect_cols: int
    bbox: tuple = (0.0, 0.0, 0.0, 0.0)
    cell_meters: float = 500.0

    def __post_init__(self):
        if min(self.rows, self.cols, self.rect_rows, self.rect_cols) <= 0:
            raise PartitionError("grid and rect extents must be positive")
        if self.rows % self.rect_rows or self.cols % self.rect_cols:
            raise PartitionError(
                f"{self.rect_rows}x{self.rect_cols} rects do not tile {self.rows}x{self.cols} cells")

    @property
    def m(self) -> int:
        return self.rows * self.cols

    @property
    def q(self) -> int:
        return self.rect_rows * self.rect_cols

    @property
    def block_shape(self) -> tuple:
        return self.rows // self.rect_rows, self.cols // self.rect_cols

    @cached_property
    def rect_of(self) -> np.ndarray:
        bh, bw = self.block_shape
        r, c = np.divmod(np.arange(self.m), self.cols)
        return (r // bh) * self.rect_cols + (c // bw)

    @cached_property
    def rect_members(self) -> list:
        return [np.flatnonzero(self.rect_of == k) for k in range(self.q)]

    @cached_property
    def rect_sizes(self) -> np.ndarray:
        return np.bincount(self.rect_of, minlength=self.q)

    @cached_property
    def adjacency(self) -> np.ndarray:
        """8-neighbourhood 0/1 matrix with zero diagonal."""
        r, c = np.divmod(np.arange(self.m), self.cols)
        dr = np.abs(r[:, None] - r[None, :])
        dc = np.abs(c[:, None] - c[None, :])
        adj = (dr <= 1) & (dc <= 1)
        np.fill_diagonal(adj, False)
        return adj.astype(np.float64)

    def rect_index(self, row: int, col: int) -> tuple:
        bh, bw = self.block_shape
        return row // bh, col // bw

    # geometry -------------------------------------------------------
    def _deg_per_cell(self) -> tuple:
        lat0, lon0, lat1, lon1 = self.bbox
        if lat1 == lat0 or lon1 == lon0:
            return 1.0, 1.0
        return (lat1 - lat0) / self.rows, (lon1 - lon0) / self.cols

    def cell_center(self, cell: int) -> tuple:
        r, c = divmod(int(cell), self.cols)
        dlat, dlon = self._deg_per_cell()
        return self.bbox[0] + (r + 0.5) * dlat, self.bbox[1] + (c + 0.5) * dlon

    def locate(self, lat: float, lon: float) -> int:
        dlat, dlon = self._deg_per_cell()
        r = int(math.floor((lat - self.bbox[0]) / dlat))
        c = int(math.floor((lon - self.bbox[1]) / dlon))
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise DataError(f"point ({lat}, {lon}) outside the grid")
        return r * self.cols + c

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox), "cell_meters": self.cell_meters,
                "rect_rows": self.rect_rows, "rect_cols": self.rect_cols}


def partition(bbox, cell_len: float, rect_rows: int, rect_cols: int) -> UrbanGrid:
    """Cover ``bbox`` with ``cell_len``-metre square cells and group them into rects."""
    lat0, lon0, lat1, lon1 = (float(v) for v in bbox)
    if cell_len <= 0:
        raise PartitionError("cell length must be positive")
    if lat1 <= lat0 or lon1 <= lon0:
        raise PartitionError(f"empty bounding box {bbox}")
    height = (lat1 - lat0) * METERS_PER_DEG_LAT
    width = (lon1 - lon0) * METERS_PER_DEG_LAT * math.cos(math.radians(0.5 * (lat0 + lat1)))
    rows = max(1, math.ceil(height / cell_len - 1e-6))
    cols = max(1, math.ceil(width / cell_len - 1e-6))
    return UrbanGrid(rows, cols, rect_rows, rect_cols, (lat0, lon0, lat1, lon1), float(cell_len))


def bbox_for(rows: int, cols: int, cell_len: float, lat0: float = 40.70, lon0: float = -74.02) -> tuple:
    """Bounding box that :func:`partition` turns into exactly ``rows x cols`` cells."""
    dlat = rows * cell_len / METERS_PER_DEG_LAT
    # iterate once so the longitude scale uses the final mid-latitude
    mid = lat0 + 0.5 * dlat
    dlon = cols * cell_len / (METERS_PER_DEG_LAT * math.cos(math.radians(mid)))
    return (lat0, lon0, lat0 + dlat, lon0 + dlon)


def load_grid(path) -> UrbanGrid:
    spec = json.loads(Path(path).read_text())
    try:
        return partition(spec["bbox"], spec["cell_meters"], spec["rect_rows"], spec["rect_cols"])
    except KeyError as exc:
        raise PartitionError(f"grid.json missing key {exc}") from exc


def save_grid(grid: UrbanGrid, path) -> None:
    Path(path).write_text(json.dumps(grid.to_json(), indent=2) + "\n")


# static features ------------------------------------------------------

def load_static(path, m: int | None = None) -> tuple:
    """Read ``static.csv``; returns (attribute names, m x d array)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "subregion_id":
            raise DataError(f"{path}: header must start with subregion_id")
        rows = {}
        for rec in reader:
            rows[int(rec[0])] = [float(v) for v in rec[1:]]
    m = len(rows) if m is None else m
    if sorted(rows) != list(range(m)):
        raise DataError(f"{path}: expected subregion ids 0..{m - 1}")
    S = np.array([rows[i] for i in range(m)], dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != len(header) - 1:
        raise DataError(f"{path}: ragged attribute rows")
    if np.any(S < 0) or not np.all(np.isfinite(S)):
        raise DataError(f"{path}: attributes must be finite and nonnegative")
    return header[1:], S


def save_static(path, names, S) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subregion_id", *names])
        for i, row in enumerate(S):
            w.writerow([i, *(repr(float(v)) for v in row)])


# divergences and affinity ----------------------------------------------

def normalize_rows(S) -> np.ndarray:
    """Turn nonnegative rows into smoothed probability vectors."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if np.any(S < 0):
        raise NormalizationError("negative entries cannot be normalised")
    if np.any(S.sum(axis=1) == 0):
        raise NormalizationError("all-zero vector cannot be normalised")
    P = S + SMOOTHING
    return P / P.sum(axis=1, keepdims=True)


def normalize_rows_t(S: T.Tensor) -> T.Tensor:
    P = S + SMOOTHING
    return P / T.tsum(P, axis=1, keepdims=True)


def js_divergence(p, r) -> float:
    """Jensen-Shannon divergence (natural log) of two nonnegative vectors."""
    p, r = np.asarray(p, dtype=np.float64), np.asarray(r, dtype=np.float64)
    if p.shape != r.shape:
        raise DimensionError(f"js_divergence: lengths {p.shape} vs {r.shape}")
    P = normalize_rows(np.stack([p, r]))
    return float(kernels.pairwise_js(P)[0, 1])


def js_matrix(S) -> np.ndarray:
    return kernels.pairwise_js(normalize_rows(S))


def static_affinity(grid: UrbanGrid, S) -> np.ndarray:
    """1 for adjacent cells, exp(-JS) of the attribute vectors otherwise."""
    S = np.asarray(S, dtype=np.float64)
    if S.shape[0] != grid.m:
        raise DimensionError(f"static features have {S.shape[0]} rows, grid has {grid.m} cells")
    A = np.exp(-js_matrix(S))
    A[grid.adjacency > 0] = 1.0
    np.fill_diagonal(A, 0.0)
    return A


def sparsify_mask(A, rho: float) -> np.ndarray:
    """0/1 mask keeping the ceil(rho * pairs) largest off-diagonal unordered pairs.

    Ties go to the lexicographically smaller (i, j).
    """
    A = np.asarray(A)
    m = A.shape[0]
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    iu, ju = np.triu_indices(m, k=1)
    n_pairs = iu.size
    keep = min(n_pairs, math.ceil(rho * n_pairs - 1e-9))
    mask = np.zeros_like(A, dtype=np.float64)
    if keep == 0:
        return mask
    # lexsort: last key is primary
    order = np.lexsort((ju, iu, -A[iu, ju]))[:keep]
    mask[iu[order], ju[order]] = 1.0
    mask[ju[order], iu[order]] = 1.0
    return mask


def sparsify(A, rho: float) -> np.ndarray:
    if rho >= 1:
        out = np.array(A, dtype=np.float64, copy=True)
        np.fill_diagonal(out, 0.0)
        return out
    return np.asarray(A, dtype=np.float64) * sparsify_mask(A, rho)


class AttentionWeights:
    """Softmax over learned per-attribute scores."""

    def __init__(self, n_attributes: int, scores=None):
        data = np.zeros(n_attributes) if scores is None else np.asarray(scores, dtype=np.float64)
        self.scores = T.Tensor(data, requires_grad=True)

    def __call__(self) -> T.Tensor:
        return T.softmax(self.scores)

    def parameters(self):
        return [self.scores]


def attend_static(S, weights):
    """Reweight every attribute column; returns a Tensor when ``weights`` is one."""
    w = weights() if isinstance(weights, AttentionWeights) else weights
    d = np.shape(S)[1]
    n = w.shape[0] if isinstance(w, T.Tensor) else len(w)
    if n != d:
        raise DimensionError(f"{n} attention weights for {d} attributes")
    if isinstance(w, T.Tensor) or isinstance(S, T.Tensor):
        return T.mul(S, w)
    return np.asarray(S, dtype=np.float64) * np.asarray(w, dtype=np.float64)
