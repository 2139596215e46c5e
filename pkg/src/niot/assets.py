"""Synthetic Y-shaped network test case on the unit square.

One source ``O`` near the bottom edge and two sinks ``P`` (mass 1/3) and
``Q`` (mass 2/3) near the left and right edges at mid height.  The ground-truth image is a binary drawing of
three straight channels meeting at an interior branch point, with widths
growing with the carried flux; the corruption mask is three rectangles, one
across each channel.
"""
from __future__ import annotations

import numpy as np

from .grid import ForcingPair, Grid2D
from .imageio import ForcingEntry, ForcingSpec, build_forcing

# unit-square coordinates
SOURCE = (0.5, 0.1)
SINK_P = (0.1, 0.5)
SINK_Q = (0.9, 0.5)
BRANCH = (0.5, 0.4)
SINK_MASSES = (1.0 / 3.0, 2.0 / 3.0)

# total transported mass for pure transport runs and for inpainting runs
TRANSPORT_MASS = 0.1
INPAINT_MASS = 1.0

# channel half-widths at flux 1, relative to the domain size
_HALF_WIDTH = 0.022
# rectangles (x0, y0, x1, y1) cutting each channel
MASK_RECTS = (
    (0.44, 0.20, 0.56, 0.28),
    (0.20, 0.41, 0.30, 0.52),
    (0.67, 0.40, 0.77, 0.51),
)


def _cell(grid: Grid2D, xy: tuple[float, float]) -> tuple[int, int]:
    ix = min(int(xy[0] * grid.nx), grid.nx - 1)
    iy = min(int(xy[1] * grid.ny), grid.ny - 1)
    return ix, iy


def y_cells(grid: Grid2D) -> dict[str, tuple[int, int]]:
    """``(ix, iy)`` cells of the source and the two sinks."""
    return {"O": _cell(grid, SOURCE), "P": _cell(grid, SINK_P), "Q": _cell(grid, SINK_Q)}


def _disk(grid: Grid2D, center: tuple[float, float], radius: float) -> np.ndarray:
    x, y = grid.cell_centers()
    x, y = x / (grid.nx * grid.h), y / (grid.ny * grid.h)
    out = np.hypot(x - center[0], y - center[1]) <= radius
    ix, iy = _cell(grid, center)
    out[iy, ix] = True
    return out.astype(float)


def y_forcing_spec(grid: Grid2D, spread: bool = False) -> ForcingSpec:
    """Unit source at ``O``, sinks at ``P`` and ``Q``.

    Terminals are single cells; with ``spread`` each becomes a disk as wide
    as the channel that ends there, which avoids a conductivity spike at the
    terminal cells on fine grids.
    """
    if not spread:
        cells = y_cells(grid)
        return ForcingSpec(
            sources=[ForcingEntry(1.0, cell=cells["O"])],
            sinks=[ForcingEntry(SINK_MASSES[0], cell=cells["P"]), ForcingEntry(SINK_MASSES[1], cell=cells["Q"])],
        )
    region = {
        name: _disk(grid, xy, _HALF_WIDTH * flux ** (1.0 / 3.0))
        for name, xy, flux in (("O", SOURCE, 1.0), ("P", SINK_P, SINK_MASSES[0]), ("Q", SINK_Q, SINK_MASSES[1]))
    }
    return ForcingSpec(
        sources=[ForcingEntry(1.0, region=region["O"])],
        sinks=[ForcingEntry(SINK_MASSES[0], region=region["P"]), ForcingEntry(SINK_MASSES[1], region=region["Q"])],
    )


def y_forcing(grid: Grid2D, total_mass: float = 1.0, spread: bool = False) -> ForcingPair:
    return build_forcing(y_forcing_spec(grid, spread), grid, total_mass)


def _segment_distance(x, y, a, b):
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    t = np.clip(((x - ax) * dx + (y - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(x - ax - t * dx, y - ay - t * dy)


def y_image(grid: Grid2D) -> np.ndarray:
    """Binary drawing of the network; half-width scales like ``flux^(1/3)``."""
    x, y = grid.cell_centers()
    x, y = x / (grid.nx * grid.h), y / (grid.ny * grid.h)
    out = np.zeros(grid.shape)
    for end, flux in ((SOURCE, 1.0), (SINK_P, SINK_MASSES[0]), (SINK_Q, SINK_MASSES[1])):
        width = _HALF_WIDTH * flux ** (1.0 / 3.0)
        out[_segment_distance(x, y, BRANCH, end) <= width] = 1.0
    return out


def y_mask(grid: Grid2D) -> np.ndarray:
    x, y = grid.cell_centers()
    x, y = x / (grid.nx * grid.h), y / (grid.ny * grid.h)
    out = np.zeros(grid.shape)
    for x0, y0, x1, y1 in MASK_RECTS:
        out[(x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)] = 1.0
    return out
