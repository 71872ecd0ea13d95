"""Actor feature pooling from a clip feature map.

Temporal average and temporal max maps are each averaged over the grid cells
whose centers fall inside the box, and the two vectors are summed.
"""
from __future__ import annotations

import numpy as np

from ..short_term import ClipFeatureMap, check_box


def box_cells(h, w, box):
    """(row, col) pairs whose cell center lies inside the box; nearest cell if none."""
    x1, y1, x2, y2 = check_box(box)
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    rows = np.nonzero((cy >= y1) & (cy <= y2))[0]
    cols = np.nonzero((cx >= x1) & (cx <= x2))[0]
    if rows.size and cols.size:
        return [(int(i), int(j)) for i in rows for j in cols]
    bx, by = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    i = int(np.argmin(np.abs(cy - by)))
    j = int(np.argmin(np.abs(cx - bx)))
    return [(i, j)]


def roi_pool(x: ClipFeatureMap, box) -> np.ndarray:
    grid = x.grid()  # (t, h, w, d)
    avg_map = grid.mean(axis=0)
    max_map = grid.max(axis=0)
    cells = box_cells(x.h, x.w, box)
    rows = np.array([i for i, _ in cells])
    cols = np.array([j for _, j in cells])
    pooled = avg_map[rows, cols].mean(axis=0) + max_map[rows, cols].mean(axis=0)
    return pooled[None, :]


def pool_actors(x: ClipFeatureMap, boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, x.d))
    return np.concatenate([roi_pool(x, b) for b in boxes], axis=0)
