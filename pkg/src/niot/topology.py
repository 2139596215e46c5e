"""Skeleton-based description of a reconstructed network's support."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .inpaint import support

_EIGHT = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]])


@dataclass(frozen=True)
class BranchPoint:
    cell: tuple[int, int]  # (ix, iy)
    degree: int
    distance: float  # in cells, from the reference cell


def skeleton_of(mu: np.ndarray, threshold_rel: float) -> np.ndarray:
    return skeletonize(support(mu, threshold_rel))


def _branch_count(skel: np.ndarray, iy: int, ix: int) -> int:
    """Number of distinct skeleton arms leaving a cell (8-connected components of its ring)."""
    ring = np.zeros((3, 3), dtype=bool)
    ny, nx = skel.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if (dy or dx) and 0 <= iy + dy < ny and 0 <= ix + dx < nx:
                ring[dy + 1, dx + 1] = skel[iy + dy, ix + dx]
    # walk the 8-ring in order and count runs of set cells, treating
    # diagonal corners adjacent to a set edge cell as part of that run
    order = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]
    vals = [ring[p] for p in order]
    runs = sum(1 for i in range(8) if vals[i] and not vals[i - 1])
    if runs == 0 and all(vals):
        return 8
    return runs


def branch_points(mu: np.ndarray, threshold_rel: float, reference: tuple[int, int]) -> list[BranchPoint]:
    """Skeleton cells with three or more arms, merged into clusters.

    ``reference`` is ``(ix, iy)``; each cluster reports the member closest to it.
    """
    skel = skeleton_of(mu, threshold_rel)
    candidates = np.zeros_like(skel)
    degree = np.zeros(skel.shape, dtype=int)
    for iy, ix in zip(*np.nonzero(skel)):
        d = _branch_count(skel, iy, ix)
        if d >= 3:
            candidates[iy, ix] = True
            degree[iy, ix] = d
    labels, count = ndimage.label(candidates, structure=np.ones((3, 3)))
    rx, ry = reference
    out = []
    for lab in range(1, count + 1):
        iys, ixs = np.nonzero(labels == lab)
        dist = np.hypot(ixs - rx, iys - ry)
        j = int(np.argmin(dist))
        out.append(BranchPoint((int(ixs[j]), int(iys[j])), int(degree[iys, ixs].max()), float(dist[j])))
    return sorted(out, key=lambda b: b.distance)
