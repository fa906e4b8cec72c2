"""Voxel coordinate model, point-cloud voxelization, and the coordinate index.

Coordinates are batched integer voxel positions ``(batch, x, y, z)``.  Each
spatial component must lie in ``[-2**15, 2**15)`` so that the whole coordinate
packs injectively into one 64-bit key with the fixed layout
``batch(16) | x+2^15 (16) | y+2^15 (16) | z+2^15 (16)``.  That bound covers
roughly +-1638 m at a 0.05 m voxel size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import BoundsError, ConfigError, DimensionError, DuplicateCoordError

COORD_BITS = 15
COORD_BOUND = 1 << COORD_BITS       # spatial components in [-32768, 32768)
BATCH_BOUND = 1 << 16               # batch index in [0, 65536)


class VoxelCoord(NamedTuple):
    """One batched voxel coordinate."""

    batch: int
    x: int
    y: int
    z: int


def _as_coord_array(coords) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64)
    if arr.ndim == 1 and arr.size == 4:
        arr = arr[None, :]
    if arr.ndim != 2 or (arr.size and arr.shape[1] != 4):
        raise DimensionError(f"expected (N, 4) coordinates, got shape {arr.shape}")
    if arr.size == 0:
        arr = arr.reshape(0, 4)
    return arr


def check_coord_bounds(coords: np.ndarray) -> None:
    """Raise BoundsError unless every coordinate packs into the 64-bit key."""
    if coords.size == 0:
        return
    b = coords[:, 0]
    xyz = coords[:, 1:]
    bad_b = (b < 0) | (b >= BATCH_BOUND)
    bad_s = (xyz < -COORD_BOUND) | (xyz >= COORD_BOUND)
    if bad_b.any() or bad_s.any():
        n_bad = int(bad_b.sum() + bad_s.any(axis=1).sum())
        raise BoundsError(
            f"{n_bad} coordinate(s) outside batch [0, {BATCH_BOUND}) / "
            f"spatial [-{COORD_BOUND}, {COORD_BOUND})"
        )


def _pack_keys_unchecked(arr: np.ndarray) -> np.ndarray:
    b = arr[:, 0]
    x = arr[:, 1] + COORD_BOUND
    y = arr[:, 2] + COORD_BOUND
    z = arr[:, 3] + COORD_BOUND
    return (b << 48) | (x << 32) | (y << 16) | z


def pack_keys(coords) -> np.ndarray:
    """Pack (N, 4) coordinates into int64 keys, injective on the bounded domain."""
    arr = _as_coord_array(coords)
    check_coord_bounds(arr)
    return _pack_keys_unchecked(arr)


def pack_key(coord) -> int:
    """Pack a single coordinate (VoxelCoord or 4-sequence) into its 64-bit key."""
    return int(pack_keys(np.asarray(coord, dtype=np.int64))[0])


def unpack_key(key: int) -> VoxelCoord:
    """Inverse of :func:`pack_key`."""
    k = int(key) & 0xFFFF_FFFF_FFFF_FFFF
    return VoxelCoord(
        batch=(k >> 48) & 0xFFFF,
        x=((k >> 32) & 0xFFFF) - COORD_BOUND,
        y=((k >> 16) & 0xFFFF) - COORD_BOUND,
        z=(k & 0xFFFF) - COORD_BOUND,
    )


class CoordIndex:
    """Exact map from voxel coordinate to row number.

    Construction fails on duplicate coordinates; queries for absent
    coordinates return ``None``.
    """

    def __init__(self, coords):
        arr = _as_coord_array(coords)
        keys = pack_keys(arr)
        self._rows = {int(k): i for i, k in enumerate(keys)}
        if len(self._rows) != len(keys):
            raise DuplicateCoordError(
                f"{len(keys) - len(self._rows)} duplicate coordinate(s)"
            )

    def get(self, coord) -> Optional[int]:
        try:
            key = pack_key(coord)
        except BoundsError:
            return None
        return self._rows.get(key)

    def __contains__(self, coord) -> bool:
        return self.get(coord) is not None

    def __len__(self) -> int:
        return len(self._rows)


def build_index(coords) -> CoordIndex:
    """Build the coordinate -> row index for a duplicate-free coordinate list."""
    return CoordIndex(coords)


class SparseTensor:
    """Batched sparse voxel tensor: integer coordinates plus per-voxel features.

    ``coords`` is (N, 4) int64 with unique rows, ``features`` is (N, C) float.
    Instances are treated as immutable after construction; operators return
    new tensors and never write into an input's arrays.
    """

    __slots__ = ("coords", "features", "keys", "_order", "_sorted_keys", "_index")

    def __init__(self, coords, features):
        self.coords = _as_coord_array(coords)
        feats = np.asarray(features)
        if feats.ndim != 2:
            raise DimensionError(f"features must be (N, C), got shape {feats.shape}")
        if feats.shape[0] != self.coords.shape[0]:
            raise DimensionError(
                f"{self.coords.shape[0]} coords but {feats.shape[0]} feature rows"
            )
        self.features = feats
        self.keys = pack_keys(self.coords)
        self._order = np.argsort(self.keys, kind="stable")
        self._sorted_keys = self.keys[self._order]
        if self.num_voxels > 1 and (np.diff(self._sorted_keys) == 0).any():
            raise DuplicateCoordError("duplicate voxel coordinates")
        self._index = None

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.features.dtype

    @property
    def index(self) -> CoordIndex:
        if self._index is None:
            self._index = CoordIndex(self.coords)
        return self._index

    def lookup(self, coords) -> np.ndarray:
        """Vectorized coordinate -> row lookup; -1 where absent or out of bounds."""
        arr = _as_coord_array(coords)
        rows = np.full(arr.shape[0], -1, dtype=np.int64)
        if arr.size == 0 or self.num_voxels == 0:
            return rows
        ok = (
            (arr[:, 0] >= 0)
            & (arr[:, 0] < BATCH_BOUND)
            & (arr[:, 1:] >= -COORD_BOUND).all(axis=1)
            & (arr[:, 1:] < COORD_BOUND).all(axis=1)
        )
        if not ok.any():
            return rows
        keys = pack_keys(arr[ok])
        pos = np.searchsorted(self._sorted_keys, keys)
        pos_c = np.minimum(pos, self.num_voxels - 1)
        hit = self._sorted_keys[pos_c] == keys
        found = np.full(keys.shape[0], -1, dtype=np.int64)
        found[hit] = self._order[pos_c[hit]]
        rows[ok] = found
        return rows

    def with_features(self, features) -> "SparseTensor":
        """New tensor on the same coordinate set (shares coords and key cache)."""
        feats = np.asarray(features)
        if feats.ndim != 2 or feats.shape[0] != self.num_voxels:
            raise DimensionError(
                f"features must be ({self.num_voxels}, C), got shape {feats.shape}"
            )
        out = object.__new__(SparseTensor)
        out.coords = self.coords
        out.features = feats
        out.keys = self.keys
        out._order = self._order
        out._sorted_keys = self._sorted_keys
        out._index = self._index
        return out

    def __repr__(self) -> str:
        return (
            f"SparseTensor(num_voxels={self.num_voxels}, "
            f"num_channels={self.num_channels}, dtype={self.dtype})"
        )


def empty_tensor(num_channels: int, dtype=np.float32) -> SparseTensor:
    return SparseTensor(
        np.zeros((0, 4), dtype=np.int64), np.zeros((0, num_channels), dtype=dtype)
    )


@dataclass
class PointCloud:
    """Raw metric points with per-point attribute vectors (e.g. intensity)."""

    points: np.ndarray      # (N, 3) float, meters
    attributes: np.ndarray  # (N, A) float

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        if self.points.size == 0:
            self.points = self.points.reshape(0, 3)
        if self.attributes.ndim == 1:
            width = 1 if self.attributes.size else 0
            self.attributes = self.attributes.reshape(self.points.shape[0], width)
        if self.points.shape[1] != 3:
            raise DimensionError(f"points must be (N, 3), got {self.points.shape}")
        if self.attributes.shape[0] != self.points.shape[0]:
            raise DimensionError("one attribute row per point required")
        if self.points.size and not np.isfinite(self.points).all():
            raise ValueError("points contain NaN or Inf")
        if self.attributes.size and not np.isfinite(self.attributes).all():
            raise ValueError("attributes contain NaN or Inf")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


def voxelize(cloud: PointCloud, voxel_size: float, dtype=np.float32) -> SparseTensor:
    """Quantize a point cloud onto the integer voxel grid.

    Each point maps to ``floor(point / voxel_size)`` per axis (arithmetic
    floor, so negative positions round toward -inf).  Points landing in the
    same voxel have their attribute vectors averaged.  Output voxels are
    sorted by packed key, which fixes a deterministic row order.
    """
    if voxel_size <= 0:
        raise ConfigError(f"voxel_size must be > 0, got {voxel_size}")
    if cloud.num_points == 0:
        return empty_tensor(cloud.attributes.shape[1], dtype=dtype)
    vox = np.floor(cloud.points / float(voxel_size)).astype(np.int64)
    coords = np.concatenate(
        [np.zeros((vox.shape[0], 1), dtype=np.int64), vox], axis=1
    )
    check_coord_bounds(coords)
    keys = pack_keys(coords)
    uniq_keys, first_rows, inverse, counts = np.unique(
        keys, return_index=True, return_inverse=True, return_counts=True
    )
    sums = np.zeros((uniq_keys.shape[0], cloud.attributes.shape[1]), dtype=np.float64)
    np.add.at(sums, inverse, cloud.attributes)
    means = sums / counts[:, None]
    return SparseTensor(coords[first_rows], means.astype(dtype))
