"""Ring-peeling flattening of 2-D feature grids into 1-D sequences.

Cells are emitted ring by ring from the border inward, so the central
(object-bearing) cells land at the end of the sequence. Within a ring the
walk starts at the ring's top-left cell and goes clockwise; degenerate
single-row/single-column rings read left-to-right / top-to-bottom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class ScanPermutation:
    height: int
    width: int
    order: list[tuple[int, int]]
    flat: np.ndarray = field(repr=False, default=None)      # row-major flat indices
    inverse: np.ndarray = field(repr=False, default=None)   # scatter-back indices

    def __len__(self):
        return self.height * self.width


def ring_index(i: int, j: int, h: int, w: int) -> int:
    """Distance of cell (i,j) to the nearest grid border."""
    return min(i, j, h - 1 - i, w - 1 - j)


def central_scan_indices(h: int, w: int) -> ScanPermutation:
    if h < 1 or w < 1:
        raise DimensionError(f"grid extents must be positive, got ({h}, {w})")
    order: list[tuple[int, int]] = []
    r = 0
    while True:
        top, left = r, r
        bottom, right = h - 1 - r, w - 1 - r
        if top > bottom or left > right:
            break
        if top == bottom:
            order.extend((top, j) for j in range(left, right + 1))
        elif left == right:
            order.extend((i, left) for i in range(top, bottom + 1))
        else:
            order.extend((top, j) for j in range(left, right + 1))
            order.extend((i, right) for i in range(top + 1, bottom + 1))
            order.extend((bottom, j) for j in range(right - 1, left - 1, -1))
            order.extend((i, left) for i in range(bottom - 1, top, -1))
        r += 1
    flat = np.array([i * w + j for i, j in order], dtype=np.intp)
    inverse = np.argsort(flat)
    return ScanPermutation(h, w, order, flat, inverse)


def apply_scan(grid, perm: ScanPermutation) -> Tensor:
    """(h,w,c) or (B,h,w,c) grid -> (h*w, c) or (B, h*w, c) sequence."""
    gt = grid if isinstance(grid, Tensor) else Tensor(grid)
    if gt.data.ndim == 3:
        h, w, c = gt.shape
        if (h, w) != (perm.height, perm.width):
            raise DimensionError(f"grid {h}x{w} does not match scan {perm.height}x{perm.width}")
        return T.take(T.reshape(gt, (h * w, c)), perm.flat, axis=0)
    if gt.data.ndim == 4:
        b, h, w, c = gt.shape
        if (h, w) != (perm.height, perm.width):
            raise DimensionError(f"grid {h}x{w} does not match scan {perm.height}x{perm.width}")
        return T.take(T.reshape(gt, (b, h * w, c)), perm.flat, axis=1)
    raise DimensionError(f"apply_scan expects rank 3 or 4 input, got {gt.shape}")


def inverse_scan(seq, perm: ScanPermutation) -> Tensor:
    """Exact inverse of apply_scan."""
    st = seq if isinstance(seq, Tensor) else Tensor(seq)
    n = perm.height * perm.width
    if st.data.ndim == 2:
        if st.shape[0] != n:
            raise DimensionError(f"sequence length {st.shape[0]} != {n}")
        back = T.take(st, perm.inverse, axis=0)
        return T.reshape(back, (perm.height, perm.width, st.shape[-1]))
    if st.data.ndim == 3:
        if st.shape[1] != n:
            raise DimensionError(f"sequence length {st.shape[1]} != {n}")
        back = T.take(st, perm.inverse, axis=1)
        return T.reshape(back, (st.shape[0], perm.height, perm.width, st.shape[-1]))
    raise DimensionError(f"inverse_scan expects rank 2 or 3 input, got {st.shape}")


def raster_scan_indices(h: int, w: int) -> ScanPermutation:
    """Plain row-major order; kept as an ablation baseline."""
    if h < 1 or w < 1:
        raise DimensionError(f"grid extents must be positive, got ({h}, {w})")
    order = [(i, j) for i in range(h) for j in range(w)]
    flat = np.arange(h * w, dtype=np.intp)
    return ScanPermutation(h, w, order, flat, flat.copy())
