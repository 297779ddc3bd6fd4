"""Hard occupancy gates and their differentiable releases.

Covers the sign gate used by layer skipping and 2D masks, and the voxel
occupancy used by 3D sparse convolution: floor voxelization, the per-axis
voxel/point distance, three relation kernels (sigmoid-like, bilinear, RBF),
the probabilistic "or" gather and the extended voxel set of empty voxels a
point can reach within one attack step.

Relation kernels and the gather accept either numpy arrays or tape tensors;
tensors in, tensors out.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_LAMBDA_3D = 20.0
DEFAULT_LAMBDA_GATE = 1.0
# half height exactly at a single-axis offset of half a voxel
DEFAULT_RBF_BANDWIDTH = 0.5 / math.sqrt(2.0 * math.log(2.0))
OR_CLAMP = 1e-12

RELATION_KINDS = ("sigmoid_like", "bilinear", "rbf")


def _finite(x, what="value"):
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {what}")


# ---------------------------------------------------------------- sign gates

def hard_sign_occupancy(q):
    """1 where the score is strictly positive, else 0 (so a zero score is off)."""
    _finite(q, "score")
    out = (np.asarray(q) > 0).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def soft_sign_occupancy(q, lam: float):
    """Logistic release ``1 / (1 + exp(-lam * q))`` of the sign gate."""
    if not lam > 0:
        raise ValueError(f"slope must be positive, got {lam}")
    if isinstance(q, Tensor):
        return ad.sigmoid(ad.mul(q, lam))
    _finite(q, "score")
    out = ad._stable_sigmoid(np.asarray(lam * np.asarray(q, dtype=float), dtype=float))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- voxelization

@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    """Voxelized point cloud.

    ``voxels`` holds the M occupied integer cells in lexicographic order and
    ``point_to_voxel[n]`` indexes the cell of point n. After
    :func:`build_extended_voxels`, ``extended_voxels`` lists the occupied cells
    first, followed by reachable empty cells, and the candidate relation is
    stored as parallel arrays ``cand_voxel``/``cand_point``.
    """

    points: np.ndarray
    voxel_size: float
    voxels: np.ndarray
    point_to_voxel: np.ndarray
    extended_voxels: np.ndarray
    cand_voxel: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    cand_point: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    step_budget: float | None = None

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.voxels.shape[0]

    @property
    def n_extended(self) -> int:
        return self.extended_voxels.shape[0]

    def voxel_index(self, voxel, extended: bool = True) -> int:
        """Row of ``voxel`` in the (extended) voxel array, or -1."""
        table = self.extended_voxels if extended else self.voxels
        idx = lookup(table, np.asarray(voxel, dtype=np.int64).reshape(1, 3))[0]
        return int(idx)

    def candidate_points(self, voxel) -> np.ndarray:
        if self.step_budget is None:
            raise ValueError("extended voxel set has not been built")
        v = self.voxel_index(voxel)
        if v < 0:
            raise KeyError(f"voxel {tuple(voxel)} is outside the extended set")
        return np.sort(self.cand_point[self.cand_voxel == v])

    def hard_occupancy(self) -> np.ndarray:
        """0/1 occupancy of every extended voxel."""
        out = np.zeros(self.n_extended)
        out[: self.n_voxels] = 1.0
        return out


def _keys(vox: np.ndarray) -> np.ndarray:
    # pack int coordinates in [-2^20, 2^20) into one int64
    v = np.asarray(vox, dtype=np.int64) + (1 << 20)
    if v.size and (v.min() < 0 or v.max() >= (1 << 21)):
        raise ValueError("voxel coordinates out of the supported range")
    return (v[..., 0] << 42) | (v[..., 1] << 21) | v[..., 2]


def lookup(table: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Row index of each query voxel in ``table`` (any order), -1 if absent."""
    keys = _keys(table)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    qk = _keys(queries)
    pos = np.searchsorted(sk, qk)
    pos_c = np.minimum(pos, max(len(sk) - 1, 0))
    found = (pos < len(sk)) & (sk[pos_c] == qk) if len(sk) else np.zeros(qk.shape, bool)
    return np.where(found, order[pos_c] if len(sk) else 0, -1)


def voxelize(points, voxel_size: float) -> SparseVoxelGrid:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {points.shape}")
    if points.shape[0] == 0:
        raise ValueError("empty point set")
    if not voxel_size > 0:
        raise ValueError(f"voxel size must be positive, got {voxel_size}")
    _finite(points, "point coordinates")
    cells = np.floor(points / voxel_size).astype(np.int64)
    voxels, inverse = np.unique(cells, axis=0, return_inverse=True)
    return SparseVoxelGrid(
        points=points,
        voxel_size=float(voxel_size),
        voxels=voxels,
        point_to_voxel=inverse.reshape(-1).astype(np.int64),
        extended_voxels=voxels,
    )


def build_extended_voxels(grid: SparseVoxelGrid, step_budget: float) -> SparseVoxelGrid:
    """Add every empty voxel some point can enter moving at most ``step_budget``
    per coordinate, and record which points can reach which voxel."""
    if not step_budget > 0:
        raise ValueError(f"step budget must be positive, got {step_budget}")
    L = grid.voxel_size
    pts = grid.points
    lo = np.floor((pts - step_budget) / L).astype(np.int64)
    hi = np.floor((pts + step_budget) / L).astype(np.int64)
    span = int((hi - lo).max()) + 1
    offsets = np.array(list(itertools.product(range(span), repeat=3)), dtype=np.int64)

    cand = lo[:, None, :] + offsets[None, :, :]  # (N, span^3, 3)
    ok = np.all(cand <= hi[:, None, :], axis=2)
    point_idx = np.broadcast_to(np.arange(len(pts))[:, None], ok.shape)[ok]
    cand = cand[ok]

    idx = lookup(grid.voxels, cand)
    new = np.unique(cand[idx < 0], axis=0)
    extended = np.concatenate([grid.voxels, new.reshape(-1, 3)], axis=0)
    vox_idx = np.where(idx >= 0, idx, grid.n_voxels + lookup(new.reshape(-1, 3), cand))
    order = np.lexsort((point_idx, vox_idx))
    return replace(
        grid,
        extended_voxels=extended,
        cand_voxel=vox_idx[order].astype(np.int64),
        cand_point=point_idx[order].astype(np.int64),
        step_budget=float(step_budget),
    )


# ---------------------------------------------------------------- relations

def relation_distance(voxel, point, voxel_size: float):
    """Per-axis ``|voxel + 0.5 - point / L|`` in voxel units."""
    if not voxel_size > 0:
        raise ValueError(f"voxel size must be positive, got {voxel_size}")
    centre = np.asarray(voxel, dtype=float) + 0.5
    if isinstance(point, Tensor):
        return ad.absolute(ad.sub(centre, ad.mul(point, 1.0 / voxel_size)))
    out = np.abs(centre - np.asarray(point, dtype=float) / voxel_size)
    _finite(out, "distance")
    return out


def _axis_product(t):
    if isinstance(t, Tensor):
        return ad.mul(ad.mul(t[..., 0], t[..., 1]), t[..., 2])
    return t[..., 0] * t[..., 1] * t[..., 2]


def _scalarize(x):
    if isinstance(x, np.ndarray) and x.ndim == 0:
        return float(x)
    return x


def relation_sigmoid_like(d, lam: float = DEFAULT_LAMBDA_3D):
    """Product over axes of ``1 / (1 + exp(lam * (d_i - 0.5)))``."""
    if not lam > 0:
        raise ValueError(f"slope must be positive, got {lam}")
    if isinstance(d, Tensor):
        return _axis_product(ad.sigmoid(ad.mul(ad.sub(d, 0.5), -lam)))
    d = np.asarray(d, dtype=float)
    return _scalarize(_axis_product(ad._stable_sigmoid(-lam * (d - 0.5))))


def relation_bilinear(d, _param=None):
    """Product over axes of ``max(0, 1 - d_i)``."""
    if isinstance(d, Tensor):
        return _axis_product(ad.relu(ad.sub(1.0, d)))
    d = np.asarray(d, dtype=float)
    return _scalarize(_axis_product(np.maximum(0.0, 1.0 - d)))


def relation_rbf(d, bandwidth: float = DEFAULT_RBF_BANDWIDTH):
    """Gaussian kernel ``exp(-|d|^2 / (2 bandwidth^2))``."""
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    scale = -1.0 / (2.0 * bandwidth**2)
    if isinstance(d, Tensor):
        return ad.exp(ad.mul(ad.tsum(ad.mul(d, d), axis=-1), scale))
    d = np.asarray(d, dtype=float)
    return _scalarize(np.exp(scale * np.sum(d * d, axis=-1)))


RELATIONS = {
    "sigmoid_like": relation_sigmoid_like,
    "bilinear": relation_bilinear,
    "rbf": relation_rbf,
}


def default_relation_param(kind: str) -> float:
    if kind == "sigmoid_like":
        return DEFAULT_LAMBDA_3D
    if kind == "rbf":
        return DEFAULT_RBF_BANDWIDTH
    if kind == "bilinear":
        return 0.0
    raise ValueError(f"unknown relation kind {kind!r}")


def relation(kind: str, d, param: float | None = None):
    try:
        fn = RELATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown relation kind {kind!r}") from None
    return fn(d, default_relation_param(kind) if param is None else param)


# ---------------------------------------------------------------- gather

def gather_or(relations) -> float:
    """``1 - prod(1 - r)``: probability at least one point claims the voxel."""
    r = np.asarray(relations, dtype=float).reshape(-1)
    if r.size == 0:
        return 0.0
    if np.any((r < 0) | (r > 1)) or not np.all(np.isfinite(r)):
        raise ValueError("relation values must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - r))


def gather_or_segments(r: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Segment-wise "or" on the tape; ``1 - r`` factors are clamped to
    ``[OR_CLAMP, 1]`` before taking logs."""
    log_miss = ad.log(ad.clip(ad.sub(1.0, r), OR_CLAMP, 1.0))
    return ad.sub(1.0, ad.exp(ad.segment_sum(log_miss, segment_ids, num_segments)))


# ---------------------------------------------------------------- soft occupancy

def soft_occupancy(points: Tensor, grid: SparseVoxelGrid, kind: str = "sigmoid_like",
                   param: float | None = None) -> Tensor:
    """Soft occupancy of every extended voxel as a function of ``points``.

    Returns a length-M' tensor aligned with ``grid.extended_voxels``.
    """
    if grid.step_budget is None:
        raise ValueError("build the extended voxel set first")
    pts = ad.as_tensor(points)
    if pts.shape != grid.points.shape:
        raise ValueError("points do not match the grid")
    vox = grid.extended_voxels[grid.cand_voxel].astype(float)
    p = ad.gather_rows(pts, grid.cand_point)
    d = relation_distance(vox, p, grid.voxel_size)
    r = relation(kind, d, param)
    return gather_or_segments(r, grid.cand_voxel, grid.n_extended)


def soft_voxel_occupancy(voxel, grid: SparseVoxelGrid, kind: str = "sigmoid_like",
                         param: float | None = None, points: Tensor | None = None) -> Tensor:
    """Soft occupancy of one extended voxel, differentiable in ``points``."""
    if grid.step_budget is None:
        raise ValueError("build the extended voxel set first")
    v = grid.voxel_index(voxel)
    if v < 0:
        raise KeyError(f"voxel {tuple(voxel)} is outside the extended set")
    pts = ad.as_tensor(grid.points if points is None else points)
    idx = grid.cand_point[grid.cand_voxel == v]
    p = ad.gather_rows(pts, idx)
    d = relation_distance(np.asarray(voxel, dtype=float)[None, :], p, grid.voxel_size)
    r = relation(kind, d, param)
    return gather_or_segments(r, np.zeros(len(idx), np.int64), 1)[0]


def half_height_distance(bandwidth: float) -> float:
    return bandwidth * math.sqrt(2.0 * math.log(2.0))
