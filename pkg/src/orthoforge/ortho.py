"""True orthorectification (gwarp++) with occlusion masks, and ortho mosaicking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Extent, Grid, LocalFrame, empty_grid, paste
from .rpc import BiasedCamera

LT_SENTINEL = -10000.0

# mask values
NODATA, VISIBLE = 0, 1
# reason codes
R_VISIBLE, R_OCCLUDED, R_OUTSIDE, R_NO_DSM = 0, 1, 2, 3


@dataclass(frozen=True)
class OrthoConfig:
    resolution: float = 0.5
    h_step: float = 0.5
    gamma: float = 1.0
    interp: str = "nearest"

    def __post_init__(self):
        if not (self.resolution > 0 and self.h_step > 0 and self.gamma > 0):
            raise ValueError("resolution, h_step and gamma must be positive")
        if self.interp not in ("nearest", "bilinear"):
            raise ValueError(f"unknown interpolation {self.interp!r}")


@dataclass
class ImagePatch:
    """Bands (B, rows, cols) of the image window starting at (col0, row0)."""

    data: np.ndarray
    col0: int = 0
    row0: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, float)
        if self.data.ndim == 2:
            self.data = self.data[None]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]


@dataclass
class HeightLookup:
    """Per-pixel maximum height projected into the patch."""

    values: np.ndarray

    @classmethod
    def empty(cls, shape) -> "HeightLookup":
        return cls(np.full(shape, LT_SENTINEL))

    def update(self, row, col, h) -> None:
        np.maximum.at(self.values, (row, col), h)


@dataclass
class OrthoResult:
    bands: list[Grid]
    mask: Grid                  # VISIBLE / NODATA
    reason: Grid                # R_* codes
    clamped: int = 0            # cells where the DEM exceeded the DSM
    lookup: HeightLookup | None = field(default=None, repr=False)

    @property
    def n_nodata(self) -> int:
        return int(np.count_nonzero(self.mask.data == NODATA))

    @property
    def n_occluded(self) -> int:
        return int(np.count_nonzero(self.reason.data == R_OCCLUDED))


def _pixel_index(s, l, patch: ImagePatch):
    col = np.rint(s).astype(np.int64) - patch.col0
    row = np.rint(l).astype(np.int64) - patch.row0
    rows, cols = patch.shape
    inside = (row >= 0) & (row < rows) & (col >= 0) & (col < cols)
    return row, col, inside


def _bilinear(band, s, l):
    rows, cols = band.shape
    s = np.clip(s, 0, cols - 1)
    l = np.clip(l, 0, rows - 1)
    c0 = np.minimum(np.floor(s).astype(np.int64), cols - 2) if cols > 1 else np.zeros_like(s, int)
    r0 = np.minimum(np.floor(l).astype(np.int64), rows - 2) if rows > 1 else np.zeros_like(l, int)
    c1 = np.minimum(c0 + 1, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    fs, fl = s - c0, l - r0
    return ((1 - fs) * (1 - fl) * band[r0, c0] + fs * (1 - fl) * band[r0, c1]
            + (1 - fs) * fl * band[r1, c0] + fs * fl * band[r1, c1])


def true_orthorectify(patch: ImagePatch, camera: BiasedCamera, dsm: Grid, dem: Grid | None,
                      config: OrthoConfig, frame: LocalFrame,
                      extent: Extent | None = None, order=None) -> OrthoResult:
    """Two-pass gwarp++.

    Pass 1 drops a vertical line of points from every output cell's DSM height
    down to the DEM (both ends included, ``h_step`` apart) and keeps, per image
    pixel, the highest height landing there. Pass 2 marks a cell NODATA when the
    lookup at its own projection exceeds its height by more than ``gamma``.
    ``order`` optionally permutes the pass-1 traversal (it does not change the
    result).
    """
    ext = extent or dsm.extent
    out = empty_grid(ext, config.resolution, frame=frame)
    xs, ys = out.cell_centers()
    h_top = dsm.sample(xs, ys)
    if dem is None:
        h_bot = np.full(h_top.shape, np.nan)
    else:
        h_bot = dem.sample(xs, ys)
    finite_top = np.isfinite(h_top)
    ground_fallback = float(np.nanmin(h_top)) if finite_top.any() else 0.0
    h_bot = np.where(np.isfinite(h_bot), h_bot, ground_fallback)
    over = finite_top & (h_bot > h_top)
    clamped = int(np.count_nonzero(over))
    h_bot = np.where(over, h_top, h_bot)

    lat, lon = frame.to_geo(xs, ys)
    lut = HeightLookup.empty(patch.shape)

    # pass 1
    idx = np.flatnonzero(finite_top)
    if order is not None:
        idx = idx[np.asarray(order)] if len(order) == len(idx) else idx
    p_lat, p_lon = lat.ravel()[idx], lon.ravel()[idx]
    top, bot = h_top.ravel()[idx], h_bot.ravel()[idx]
    n_steps = np.floor((top - bot) / config.h_step + 1e-9).astype(np.int64)
    for k in range(int(n_steps.max(initial=-1)) + 1):
        sel = n_steps >= k
        hk = top[sel] - k * config.h_step
        s, l = camera.project(p_lat[sel], p_lon[sel], hk, check_domain=False)
        row, col, inside = _pixel_index(s, l, patch)
        lut.update(row[inside], col[inside], hk[inside])
    # DEM end point, when the stepping did not land on it exactly
    tail = top - n_steps * config.h_step > bot + 1e-9
    if tail.any():
        s, l = camera.project(p_lat[tail], p_lon[tail], bot[tail], check_domain=False)
        row, col, inside = _pixel_index(s, l, patch)
        lut.update(row[inside], col[inside], bot[tail][inside])

    # pass 2
    reason = np.full(out.shape, R_NO_DSM, dtype=np.int64)
    s, l = camera.project(lat[finite_top], lon[finite_top], h_top[finite_top],
                          check_domain=False)
    row, col, inside = _pixel_index(s, l, patch)
    r = np.full(s.shape, R_OUTSIDE, dtype=np.int64)
    lt = np.full(s.shape, LT_SENTINEL)
    lt[inside] = lut.values[row[inside], col[inside]]
    occluded = inside & (lt > h_top[finite_top] + config.gamma)
    r[inside] = R_VISIBLE
    r[occluded] = R_OCCLUDED
    reason[finite_top] = r
    visible = reason == R_VISIBLE

    bands = []
    vis_sub = r == R_VISIBLE
    for band in patch.data:
        vals = np.full(out.shape, np.nan)
        if config.interp == "nearest":
            v = band[row[vis_sub], col[vis_sub]]
        else:
            v = _bilinear(band, s[vis_sub] - patch.col0, l[vis_sub] - patch.row0)
        sub = np.full(s.shape, np.nan)
        sub[vis_sub] = v
        vals[finite_top] = sub
        bands.append(out.with_data(vals))
    mask = out.with_data(np.where(visible, VISIBLE, NODATA).astype(np.int64))
    return OrthoResult(bands, mask, out.with_data(reason), clamped, lut)


def mosaic_ortho(results) -> OrthoResult:
    """Core-cropped mosaic of per-tile ortho results (no blending)."""
    results = list(results)
    if not results:
        raise ValueError("no ortho results to mosaic")
    cs = results[0][1].mask.cellsize
    nb = len(results[0][1].bands)
    for _, res in results:
        if abs(res.mask.cellsize - cs) > 1e-9:
            raise ValueError(f"resolution mismatch: {res.mask.cellsize} vs {cs}")
        if len(res.bands) != nb:
            raise ValueError("band count mismatch")
    cores = [t.core for t, _ in results]
    ext = Extent(min(e.xmin for e in cores), min(e.ymin for e in cores),
                 max(e.xmax for e in cores), max(e.ymax for e in cores))
    frame = results[0][1].mask.frame
    bands = [empty_grid(ext, cs, frame=frame) for _ in range(nb)]
    mask = empty_grid(ext, cs, fill=NODATA, frame=frame, dtype=np.int64)
    reason = empty_grid(ext, cs, fill=R_NO_DSM, frame=frame, dtype=np.int64)
    for tile, res in results:
        for dst, src in zip(bands, res.bands):
            paste(dst, src, tile.core)
        paste(mask, res.mask, tile.core)
        paste(reason, res.reason, tile.core)
    return OrthoResult(bands, mask, reason, sum(r.clamped for _, r in results))
