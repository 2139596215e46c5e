"""Image and field I/O, forcing construction, corruption and conductivity enhancement.

Grayscale files map to cell fields with values in [0, 1]; the first row of the
file is the top row of the grid (highest y-index).  Float fields use the
``NIOTF1`` format: an ASCII header line ``NIOTF1 <nx> <ny>`` followed by
``nx * ny`` little-endian float64 values in row-major order (bottom row first).
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .grid import ForcingPair, Grid2D
from .pm import PmParams, pm_forward

logger = logging.getLogger(__name__)

FLOAT_MAGIC = b"NIOTF1"
NORMALIZATIONS = ("unit", "max")


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Grayscale images


def _read_pgm(data: bytes) -> tuple[np.ndarray, int]:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"malformed PGM header {tokens!r}") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid PGM header {tokens!r}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = data[pos:]
    if len(raster) != need:
        raise ImageFormatError(f"PGM raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(np.int64), maxval


def load_grayscale(path: str | os.PathLike) -> np.ndarray:
    """Load an 8/16-bit single-channel PGM (P5) or PNG as a field in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        raw, maxval = _read_pgm(data)
    else:
        try:
            with Image.open(path) as img:
                img.load()
                mode = img.mode
                if mode in ("1", "L"):
                    raw, maxval = np.asarray(img.convert("L"), dtype=np.int64), 255
                elif mode in ("I;16", "I;16B", "I;16L"):
                    raw, maxval = np.asarray(img, dtype=np.int64), 65535
                elif mode == "I":
                    raw, maxval = np.asarray(img, dtype=np.int64), 65535
                    if raw.min() < 0 or raw.max() > 65535:
                        raise ImageFormatError("32-bit integer images are not supported")
                else:
                    raise ImageFormatError(f"{path}: expected a single-channel image, got mode {mode}")
        except (OSError, SyntaxError) as exc:
            raise ImageFormatError(f"{path}: {exc}") from exc
    return np.flipud(raw.astype(float) / maxval).copy()


def save_grayscale(field: np.ndarray, path: str | os.PathLike, normalization: str = "unit", bits: int = 8) -> float:
    """Write a field as PGM or PNG (chosen by suffix) and return the scale used.

    ``unit`` maps [0, 1] to the full range (values outside are clipped);
    ``max`` divides by the field maximum first.  The returned scale is the
    field value mapped to white.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    field = np.asarray(field, dtype=float)
    scale = 1.0
    if normalization == "max":
        top = float(field.max())
        scale = top if top > 0 else 1.0
    maxval = 255 if bits == 8 else 65535
    raw = np.rint(np.clip(field / scale, 0.0, 1.0) * maxval)
    raw = np.flipud(raw).astype(np.uint8 if bits == 8 else np.uint16)
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        header = f"P5\n{raw.shape[1]} {raw.shape[0]}\n{maxval}\n".encode()
        payload = raw.astype(">u2").tobytes() if bits == 16 else raw.tobytes()
        path.write_bytes(header + payload)
    else:
        Image.fromarray(raw).save(path, format="PNG")
    return scale


# ---------------------------------------------------------------------------
# Float fields


def save_float_field(field: np.ndarray, path: str | os.PathLike) -> None:
    field = np.asarray(field, dtype=float)
    if field.ndim != 2:
        raise ValueError("expected a 2-D cell field")
    ny, nx = field.shape
    header = b"%s %d %d\n" % (FLOAT_MAGIC, nx, ny)
    Path(path).write_bytes(header + np.ascontiguousarray(field, dtype="<f8").tobytes())


def load_float_field(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    end = data.find(b"\n")
    if end < 0 or not data.startswith(FLOAT_MAGIC + b" "):
        raise ImageFormatError(f"{path}: not an NIOTF1 file")
    parts = data[:end].split()
    if len(parts) != 3:
        raise ImageFormatError(f"{path}: malformed header")
    try:
        nx, ny = int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    payload = data[end + 1 :]
    if nx < 1 or ny < 1 or len(payload) != 8 * nx * ny:
        raise ImageFormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * nx * ny}")
    return np.frombuffer(payload, dtype="<f8").reshape(ny, nx).astype(float)


def load_field(path: str | os.PathLike) -> np.ndarray:
    """Load either an NIOTF1 float field or a grayscale image."""
    with open(path, "rb") as fh:
        head = fh.read(len(FLOAT_MAGIC))
    return load_float_field(path) if head == FLOAT_MAGIC else load_grayscale(path)


# ---------------------------------------------------------------------------
# Corruption


def _binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=float)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (0/1)")
    return mask


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the image inside the mask; other cells are left untouched."""
    image = np.asarray(image, dtype=float)
    mask = _binary(mask)
    if mask.shape != image.shape:
        raise ValueError("image and mask shapes differ")
    return np.where(mask == 1, 0.0, image)


# ---------------------------------------------------------------------------
# Forcing


@dataclass(frozen=True)
class ForcingEntry:
    """A point (cell ``(ix, iy)``, lower-left origin) or a binary region, with a relative mass."""

    mass: float
    cell: tuple[int, int] | None = None
    region: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.mass <= 0:
            raise ValueError("forcing masses must be positive")
        if (self.cell is None) == (self.region is None):
            raise ValueError("an entry is either a cell or a region")

    def sort_key(self):
        if self.cell is not None:
            return (0, self.cell, self.mass, b"")
        return (1, (0, 0), self.mass, np.asarray(self.region, dtype=bool).tobytes())


@dataclass(frozen=True)
class ForcingSpec:
    sources: list[ForcingEntry]
    sinks: list[ForcingEntry]


def _density(entries: list[ForcingEntry], grid: Grid2D, total_mass: float) -> np.ndarray:
    if not entries:
        raise ValueError("need at least one entry on each side")
    rel_total = math.fsum(e.mass for e in entries)
    out = np.zeros(grid.shape)
    for e in sorted(entries, key=ForcingEntry.sort_key):
        mass = e.mass / rel_total * total_mass
        if e.cell is not None:
            ix, iy = e.cell
            if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
                raise ValueError(f"cell {e.cell} lies outside the {grid.nx}x{grid.ny} grid")
            out[iy, ix] += mass / grid.cell_area
        else:
            region = grid.check_cell_field(e.region, "region") > 0.5
            count = int(region.sum())
            if count == 0:
                raise ValueError("empty forcing region")
            out[region] += mass / (count * grid.cell_area)
    return out


def build_forcing(spec: ForcingSpec, grid: Grid2D, total_mass: float = 1.0) -> ForcingPair:
    """Densities with ``integral(f+) = integral(f-) = total_mass`` (up to the final rescale)."""
    if total_mass <= 0:
        raise ValueError("total_mass must be positive")
    fplus = _density(spec.sources, grid, total_mass)
    fminus = _density(spec.sinks, grid, total_mass)
    if np.any((fplus > 0) & (fminus > 0)):
        raise ValueError("source and sink supports overlap")
    fminus *= fplus.sum() / fminus.sum()
    # absorb the rounding difference in the largest sink cell, first in one
    # jump and then one ulp at a time, until the correctly rounded totals agree
    top = np.unravel_index(np.argmax(fminus), fminus.shape)
    target = math.fsum(fplus.ravel())
    fminus[top] += target - math.fsum(fminus.ravel())
    for _ in range(10_000):
        gap = target - math.fsum(fminus.ravel())
        if gap == 0:
            break
        fminus[top] = np.nextafter(fminus[top], np.inf if gap > 0 else -np.inf)
    return ForcingPair(grid, fplus, fminus)


# ---------------------------------------------------------------------------
# Hagen-Poiseuille enhancement


def skeleton_width_violations(skeleton: np.ndarray) -> int:
    """Number of fully set 2x2 blocks, i.e. places where the skeleton is thicker than one cell."""
    s = np.asarray(skeleton) > 0.5
    return int(np.sum(s[:-1, :-1] & s[1:, :-1] & s[:-1, 1:] & s[1:, 1:]))


def poiseuille_conductivity(grid: Grid2D, radius: np.ndarray, skeleton: np.ndarray, kappa: float, p: float) -> np.ndarray:
    """``kappa * r^p * S`` with ``S = skeleton / h`` the line-Dirac approximation."""
    radius = grid.check_cell_field(radius, "thickness")
    skeleton = _binary(grid.check_cell_field(skeleton, "skeleton"))
    if np.any(radius < 0):
        raise ValueError("thickness must be nonnegative")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return kappa * radius**p * (skeleton / grid.h)


def enhance_conductivity(
    grid: Grid2D,
    thickness: np.ndarray,
    skeleton: np.ndarray,
    kappa: float,
    p: float,
    pm: PmParams,
) -> np.ndarray:
    """Conductivity estimate from a local-radius map and a one-cell skeleton, smoothed by the PM map.

    ``thickness`` holds the local channel radius in the length units of ``h``.
    The output is the unscaled PM evolution (``alpha`` is ignored).
    """
    violations = skeleton_width_violations(grid.check_cell_field(skeleton, "skeleton"))
    if violations:
        logger.warning("skeleton is wider than one cell at %d places", violations)
    mu_pou = poiseuille_conductivity(grid, thickness, skeleton, kappa, p)
    out, _ = pm_forward(grid, mu_pou, PmParams(**{**pm.__dict__, "alpha": 1.0}))
    return out
