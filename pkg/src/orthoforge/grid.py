"""Georeferenced raster grids on a local tangent plane.

All rasters in the package live on a metric east/north plane anchored at a
geographic origin (``LocalFrame``). Row 0 is the northernmost row. Missing
values are held as NaN in memory and written as ``nodata`` on disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

EARTH_RADIUS_M = 6378137.0


@dataclass(frozen=True)
class LocalFrame:
    """Equirectangular mapping between (lat, lon) degrees and local metres."""

    lat0: float
    lon0: float

    @property
    def m_per_deg_lat(self) -> float:
        return EARTH_RADIUS_M * math.pi / 180.0

    @property
    def m_per_deg_lon(self) -> float:
        return EARTH_RADIUS_M * math.pi / 180.0 * math.cos(math.radians(self.lat0))

    def to_geo(self, x, y):
        """Local (x east, y north) metres -> (lat, lon) degrees."""
        lat = self.lat0 + np.asarray(y, dtype=float) / self.m_per_deg_lat
        lon = self.lon0 + np.asarray(x, dtype=float) / self.m_per_deg_lon
        return lat, lon

    def from_geo(self, lat, lon):
        x = (np.asarray(lon, dtype=float) - self.lon0) * self.m_per_deg_lon
        y = (np.asarray(lat, dtype=float) - self.lat0) * self.m_per_deg_lat
        return x, y


@dataclass(frozen=True)
class Extent:
    """Axis-aligned rectangle in local metres."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def intersection(self, other: "Extent") -> "Extent | None":
        e = Extent(max(self.xmin, other.xmin), max(self.ymin, other.ymin),
                   min(self.xmax, other.xmax), min(self.ymax, other.ymax))
        if e.width <= 0 or e.height <= 0:
            return None
        return e

    def buffer(self, d: float) -> "Extent":
        return Extent(self.xmin - d, self.ymin - d, self.xmax + d, self.ymax + d)


@dataclass
class Grid:
    """A single-band raster (DSM, DEM, label raster, image band...).

    ``data`` has shape (nrows, ncols); ``frame`` is optional and only needed
    when cells must be converted to geographic coordinates.
    """

    data: np.ndarray
    xll: float
    yll: float
    cellsize: float
    nodata: float = -9999.0
    frame: LocalFrame | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.cellsize <= 0:
            raise ValueError(f"cellsize must be positive, got {self.cellsize}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError("grid data must be 2-D")

    @property
    def nrows(self) -> int:
        return self.data.shape[0]

    @property
    def ncols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def extent(self) -> Extent:
        return Extent(self.xll, self.yll, self.xll + self.ncols * self.cellsize,
                      self.yll + self.nrows * self.cellsize)

    def same_geometry(self, other: "Grid", tol: float = 1e-6) -> bool:
        return (self.shape == other.shape
                and abs(self.xll - other.xll) <= tol
                and abs(self.yll - other.yll) <= tol
                and abs(self.cellsize - other.cellsize) <= tol * 1e-3)

    def cell_centers(self):
        """(x, y) arrays of shape (nrows, ncols)."""
        cs = self.cellsize
        x = self.xll + (np.arange(self.ncols) + 0.5) * cs
        y = self.yll + (self.nrows - np.arange(self.nrows) - 0.5) * cs
        return np.meshgrid(x, y)

    def cell_index(self, x, y):
        """(row, col) integer indices of the cells containing (x, y)."""
        col = np.floor((np.asarray(x) - self.xll) / self.cellsize).astype(np.int64)
        row = np.floor((self.yll + self.nrows * self.cellsize - np.asarray(y))
                       / self.cellsize).astype(np.int64)
        return row, col

    def sample(self, x, y):
        """Nearest-cell lookup; NaN outside the grid."""
        row, col = self.cell_index(x, y)
        inside = (row >= 0) & (row < self.nrows) & (col >= 0) & (col < self.ncols)
        out = np.full(np.shape(row), np.nan)
        out[inside] = self.data[row[inside], col[inside]]
        return out

    def with_data(self, data) -> "Grid":
        return replace(self, data=np.asarray(data))

    def crop(self, extent: Extent) -> "Grid":
        """Cells whose centres fall inside ``extent`` (snapped to the grid)."""
        cs = self.cellsize
        c0 = int(round((extent.xmin - self.xll) / cs))
        c1 = int(round((extent.xmax - self.xll) / cs))
        top = self.yll + self.nrows * cs
        r0 = int(round((top - extent.ymax) / cs))
        r1 = int(round((top - extent.ymin) / cs))
        c0, r0 = max(c0, 0), max(r0, 0)
        c1, r1 = min(c1, self.ncols), min(r1, self.nrows)
        if c1 <= c0 or r1 <= r0:
            raise ValueError("crop extent does not overlap the grid")
        return replace(self, data=self.data[r0:r1, c0:c1].copy(),
                       xll=self.xll + c0 * cs, yll=top - r1 * cs)


def empty_grid(extent: Extent, cellsize: float, fill=np.nan, frame=None,
               dtype=float) -> Grid:
    ncols = int(round(extent.width / cellsize))
    nrows = int(round(extent.height / cellsize))
    return Grid(np.full((nrows, ncols), fill, dtype=dtype), extent.xmin,
                extent.ymin, cellsize, frame=frame)


def paste(dst: Grid, src: Grid, region: Extent | None = None) -> None:
    """Copy ``src`` values into ``dst`` in place, optionally limited to ``region``.

    Both grids must share cell size and be aligned to the same lattice.
    """
    if abs(dst.cellsize - src.cellsize) > 1e-9:
        raise ValueError(
            f"cell size mismatch: {dst.cellsize} vs {src.cellsize}")
    box = src.extent if region is None else region.intersection(src.extent)
    if box is None:
        return
    box = box.intersection(dst.extent)
    if box is None:
        return
    part = src.crop(box)
    cs = dst.cellsize
    c0 = int(round((part.xll - dst.xll) / cs))
    r0 = int(round((dst.yll + dst.nrows * cs - (part.yll + part.nrows * cs)) / cs))
    dst.data[r0:r0 + part.nrows, c0:c0 + part.ncols] = part.data
