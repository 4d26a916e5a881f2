"""Token-order permutations for the three selective-scan families.

Token ids always refer to the SAI-stack flattening
``token = (u*V + v) * H*W + h*W + w``; a path is a bijection mapping
sequence position -> token id, stored with its inverse.

Families:

* ``INTRA``  - per-view scans over the H x W grid (L = H*W);
* ``INTER``  - views enumerated in an angular raster, pixels of each view
               enumerated in the matching spatial raster (L = U*V*H*W);
* ``MACPI``  - macro-pixels enumerated in a spatial raster, the U x V
               angular samples inside each enumerated in the matching
               angular raster (L = U*V*H*W).

Direction index i pairs the same raster direction for the angular and
spatial components.  "Top-down" is the column-major raster, "left-right"
row-major; the two reverse directions are whole-sequence reversals.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Direction(enum.Enum):
    TOP_DOWN = 0
    LEFT_RIGHT = 1
    BOTTOM_UP = 2
    RIGHT_LEFT = 3


class Family(enum.Enum):
    INTRA = "intra"
    INTER = "inter"
    MACPI = "macpi"


DIRECTIONS = (Direction.TOP_DOWN, Direction.LEFT_RIGHT, Direction.BOTTOM_UP, Direction.RIGHT_LEFT)


@dataclass(frozen=True)
class ScanPath:
    forward: np.ndarray  # int32, token id at each sequence position
    inverse: np.ndarray  # int32, inverse[forward[t]] == t
    family: Family
    direction: Direction

    def __len__(self) -> int:
        return int(self.forward.shape[0])


def _invert(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.shape[0], dtype=perm.dtype)
    return inv


def raster_order(rows: int, cols: int, direction: Direction) -> np.ndarray:
    """Raster enumeration of a rows x cols grid (cell id = r*cols + c)."""
    if rows < 1 or cols < 1:
        raise ValueError("grid extents must be >= 1")
    if direction is Direction.LEFT_RIGHT:
        return np.arange(rows * cols, dtype=np.int32)
    if direction is Direction.TOP_DOWN:
        return np.ascontiguousarray(
            np.arange(rows * cols, dtype=np.int32).reshape(rows, cols).T.reshape(-1)
        )
    if direction is Direction.RIGHT_LEFT:
        return raster_order(rows, cols, Direction.LEFT_RIGHT)[::-1].copy()
    return raster_order(rows, cols, Direction.TOP_DOWN)[::-1].copy()


def _path(forward: np.ndarray, family: Family, direction: Direction) -> ScanPath:
    forward = np.ascontiguousarray(forward, dtype=np.int32)
    return ScanPath(forward=forward, inverse=_invert(forward), family=family, direction=direction)


def intra_paths(h: int, w: int) -> tuple[ScanPath, ...]:
    """Four raster scans over one H x W view."""
    return tuple(_path(raster_order(h, w, d), Family.INTRA, d) for d in DIRECTIONS)


def inter_paths(u: int, v: int, h: int, w: int) -> tuple[ScanPath, ...]:
    """Spatial-first composite scans: finish each view before moving to the
    next view of the angular raster."""
    hw = h * w
    out = []
    for d in DIRECTIONS:
        ang = raster_order(u, v, d).astype(np.int64)
        spa = raster_order(h, w, d).astype(np.int64)
        fwd = (ang[:, None] * hw + spa[None, :]).reshape(-1)
        out.append(_path(fwd, Family.INTER, d))
    return tuple(out)


def macpi_paths(u: int, v: int, h: int, w: int) -> tuple[ScanPath, ...]:
    """Angular-first composite scans: finish each macro-pixel's U x V block
    before moving to the next spatial site."""
    hw = h * w
    out = []
    for d in DIRECTIONS:
        ang = raster_order(u, v, d).astype(np.int64)
        spa = raster_order(h, w, d).astype(np.int64)
        fwd = (spa[:, None] + ang[None, :] * hw).reshape(-1)
        out.append(_path(fwd, Family.MACPI, d))
    return tuple(out)


_cache: dict[tuple, tuple[ScanPath, ...]] = {}


def paths_for(family: Family, u: int, v: int, h: int, w: int) -> tuple[ScanPath, ...]:
    """Cached path construction; shapes recur heavily during training."""
    key = (family, u, v, h, w)
    got = _cache.get(key)
    if got is None:
        if family is Family.INTRA:
            got = intra_paths(h, w)
        elif family is Family.INTER:
            got = inter_paths(u, v, h, w)
        else:
            got = macpi_paths(u, v, h, w)
        _cache[key] = got
    return got


def gather(x: np.ndarray, path: ScanPath) -> np.ndarray:
    """Reorder tokens (axis 0) into sequence order."""
    if x.shape[0] != len(path):
        raise ValueError(f"token count {x.shape[0]} != path length {len(path)}")
    return x[path.forward]


def scatter(y: np.ndarray, path: ScanPath) -> np.ndarray:
    """Inverse of ``gather``: sequence order back to token order."""
    if y.shape[0] != len(path):
        raise ValueError(f"sequence length {y.shape[0]} != path length {len(path)}")
    return y[path.inverse]


def validate_bijection(path: ScanPath) -> bool:
    n = len(path)
    f = path.forward
    return (
        f.min() == 0
        and f.max() == n - 1
        and np.unique(f).size == n
        and np.array_equal(path.inverse[f], np.arange(n, dtype=f.dtype))
    )
