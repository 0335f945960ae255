"""Stereo-pair selection, disparity triangulation and DSM fusion/mosaicking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .grid import Extent, Grid, LocalFrame, empty_grid, paste
from .io import format_value
from .rpc import BiasedCamera, Tile, triangulate_batch

# --- pair selection -------------------------------------------------------------------


@dataclass(frozen=True)
class ViewMeta:
    """Acquisition metadata of one image."""

    image_id: str
    off_nadir: float        # deg
    azimuth: float          # deg, ground -> satellite, clockwise from north
    sun_elevation: float    # deg
    sun_azimuth: float      # deg
    acquired: float         # days since an arbitrary epoch


def _unit(zenith_deg, azimuth_deg):
    z, a = math.radians(zenith_deg), math.radians(azimuth_deg)
    return np.array([math.sin(z) * math.sin(a), math.sin(z) * math.cos(a), math.cos(z)])


def _angle(u, v) -> float:
    return math.degrees(math.acos(float(np.clip(np.dot(u, v), -1.0, 1.0))))


@dataclass(frozen=True)
class PairCandidate:
    a: str
    b: str
    view_angle_diff: float
    sun_angle_diff: float
    time_gap_days: float
    off_nadir_a: float
    off_nadir_b: float
    azimuth: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("a pair needs two distinct images")
        if not (0 <= self.view_angle_diff <= 180 and 0 <= self.sun_angle_diff <= 180):
            raise ValueError("angle differences must lie in [0, 180]")
        if not (0 <= self.off_nadir_a < 90 and 0 <= self.off_nadir_b < 90):
            raise ValueError("off-nadir angles must lie in [0, 90)")

    @property
    def id(self) -> str:
        return f"{self.a}__{self.b}"


def pair_candidate(ma: ViewMeta, mb: ViewMeta) -> PairCandidate:
    """Derive pair metadata; the pair azimuth is that of the baseline between the
    two satellite directions projected on the ground."""
    va, vb = _unit(ma.off_nadir, ma.azimuth), _unit(mb.off_nadir, mb.azimuth)
    sa, sb = _unit(90 - ma.sun_elevation, ma.sun_azimuth), _unit(90 - mb.sun_elevation,
                                                                  mb.sun_azimuth)
    dx, dy = vb[0] - va[0], vb[1] - va[1]
    az = math.degrees(math.atan2(dx, dy)) % 360.0 if (dx or dy) else 0.0
    return PairCandidate(ma.image_id, mb.image_id, _angle(va, vb), _angle(sa, sb),
                         abs(mb.acquired - ma.acquired), ma.off_nadir, mb.off_nadir, az)


@dataclass(frozen=True)
class PairThresholds:
    view_min: float = 5.0
    view_max: float = 35.0
    sun_max: float = 35.0
    off_nadir_max: float = 35.0

    def admits(self, c: PairCandidate) -> bool:
        return (self.view_min <= c.view_angle_diff <= self.view_max
                and c.sun_angle_diff <= self.sun_max
                and max(c.off_nadir_a, c.off_nadir_b) <= self.off_nadir_max)

    def relaxed(self, frac: float = 0.2) -> "PairThresholds":
        return PairThresholds(self.view_min * (1 - frac), self.view_max * (1 + frac),
                              self.sun_max * (1 + frac), self.off_nadir_max * (1 + frac))


@dataclass
class PairSelection:
    pairs: list[PairCandidate]
    relaxed: bool
    under_minimum: bool
    bins: np.ndarray          # selected count per azimuth bin

    def as_dict(self):
        return {"n_pairs": len(self.pairs), "relaxed": self.relaxed,
                "under_minimum": self.under_minimum,
                "bins_nonempty": int(np.count_nonzero(self.bins))}


def azimuth_bin(azimuth: float, bin_width: float = 30.0) -> int:
    return int((azimuth % 360.0) // bin_width)


def _round_robin(cands, max_pairs, bin_width):
    nbins = int(round(360.0 / bin_width))
    bins = [[] for _ in range(nbins)]
    for c in cands:
        bins[azimuth_bin(c.azimuth, bin_width)].append(c)
    for b in bins:
        b.sort(key=lambda c: (c.view_angle_diff, c.a, c.b))
    out = []
    depth = 0
    while len(out) < max_pairs and any(depth < len(b) for b in bins):
        for b in bins:
            if depth < len(b) and len(out) < max_pairs:
                out.append(b[depth])
        depth += 1
    counts = np.zeros(nbins, dtype=int)
    for c in out:
        counts[azimuth_bin(c.azimuth, bin_width)] += 1
    return out, counts


def select_pairs(candidates, min_pairs: int = 40, max_pairs: int = 80,
                 thresholds: PairThresholds = PairThresholds(),
                 bin_width: float = 30.0) -> PairSelection:
    """Filter candidates, then fill azimuth bins round-robin.

    Within a bin, smaller view-angle differences go first. If fewer than
    ``min_pairs`` survive the filters the thresholds are relaxed by 20% once.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no pair candidates")
    passing = [c for c in candidates if thresholds.admits(c)]
    relaxed = False
    if len(passing) < min_pairs:
        relaxed = True
        loose = thresholds.relaxed()
        passing = [c for c in candidates if loose.admits(c)]
    pairs, counts = _round_robin(passing, max_pairs, bin_width)
    return PairSelection(pairs, relaxed, len(pairs) < min_pairs, counts)


# --- disparity maps and point clouds ------------------------------------------------------


@dataclass
class DisparityMap:
    """Horizontal disparity over a rectified grid (NaN = invalid).

    Rectified pixel (col, row) maps to image a at ``rect_to_a @ (col, row, 1)``
    and its match maps to image b at ``rect_to_b @ (col + d, row, 1)``.
    """

    pair_id: str
    image_a: str
    image_b: str
    disparity: np.ndarray
    rect_to_a: np.ndarray
    rect_to_b: np.ndarray

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, float)
        self.rect_to_a = np.asarray(self.rect_to_a, float).reshape(2, 3)
        self.rect_to_b = np.asarray(self.rect_to_b, float).reshape(2, 3)

    def correspondences(self, mask=None):
        """Source-image pixels (n, 2) in a and b for every valid (and masked) cell."""
        valid = np.isfinite(self.disparity)
        if mask is not None:
            valid &= mask
        row, col = np.nonzero(valid)
        d = self.disparity[row, col]
        one = np.ones(len(row))
        pa = np.stack([col, row, one], axis=1) @ self.rect_to_a.T
        pb = np.stack([col + d, row, one], axis=1) @ self.rect_to_b.T
        return pa, pb

    def source_a(self):
        """Image-a pixel (sample, line) of every rectified cell, each (rows, cols)."""
        rows, cols = self.disparity.shape
        r, c = np.mgrid[0:rows, 0:cols].astype(float)
        A = self.rect_to_a
        return A[0, 0] * c + A[0, 1] * r + A[0, 2], A[1, 0] * c + A[1, 1] * r + A[1, 2]


DISPARITY_NODATA = -99999.0


def write_disparity(path, disp: DisparityMap) -> None:
    rows, cols = disp.disparity.shape
    head = {"pair_id": disp.pair_id, "image_a": disp.image_a, "image_b": disp.image_b,
            "rect_to_a": " ".join(repr(float(v)) for v in disp.rect_to_a.ravel()),
            "rect_to_b": " ".join(repr(float(v)) for v in disp.rect_to_b.ravel()),
            "nrows": rows, "ncols": cols, "nodata": DISPARITY_NODATA}
    vals = np.where(np.isfinite(disp.disparity), disp.disparity, DISPARITY_NODATA)
    with open(path, "w") as fh:
        for k, v in head.items():
            fh.write(f"# {k} = {format_value(v)}\n")
        np.savetxt(fh, vals, fmt="%.9g")


def read_disparity(path) -> DisparityMap:
    head = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            k, v = line[1:].split("=", 1)
            head[k.strip()] = v.strip()
        elif line.strip():
            body.append(line)
    vals = np.loadtxt(body, ndmin=2).reshape(int(head["nrows"]), int(head["ncols"]))
    vals = np.where(vals == float(head["nodata"]), np.nan, vals)
    return DisparityMap(head["pair_id"], head["image_a"], head["image_b"], vals,
                        np.array(head["rect_to_a"].split(), float),
                        np.array(head["rect_to_b"].split(), float))


def rectify_affine(cam_a: BiasedCamera, cam_b: BiasedCamera, lat: float, lon: float,
                   h: float, window_a: tuple[float, float, float, float]):
    """Affine rectification of a pair linearised at (lat, lon, h).

    Rectified rows are epipolar lines: for a fixed image-a pixel, the match in
    b moves only along the rectified column axis as the height changes, with
    zero disparity at height ``h``. ``window_a`` = (s0, l0, s1, l1) is the
    image-a region the rectified grid must cover.
    Returns (rect_to_a, rect_to_b, (rows, cols)).
    """
    Ja = cam_a.jacobian(lat, lon, h)
    Jb = cam_b.jacobian(lat, lon, h)
    Ga, ta = Ja[:, :2], Ja[:, 2]
    Gb, tb = Jb[:, :2], Jb[:, 2]
    H = Gb @ np.linalg.inv(Ga)
    delta = tb - H @ ta
    e = np.linalg.solve(H, delta)
    if np.linalg.norm(e) < 1e-12:
        raise ValueError("views have no parallax; pair cannot be rectified")
    e = e / np.linalg.norm(e)
    Q = np.array([[e[0], -e[1]], [e[1], e[0]]])
    s0, l0, s1, l1 = window_a
    corners = np.array([[s0, l0], [s1, l0], [s0, l1], [s1, l1]], float)
    q = corners @ Q                     # Q is orthonormal: q = Q^T a
    qmin = np.floor(q.min(axis=0))
    qmax = np.ceil(q.max(axis=0))
    o_a = Q @ qmin
    shape = (int(qmax[1] - qmin[1]) + 1, int(qmax[0] - qmin[0]) + 1)
    a_ref = np.array(cam_a.project(lat, lon, h, check_domain=False), float)
    b_ref = np.array(cam_b.project(lat, lon, h, check_domain=False), float)
    A_a = np.column_stack([Q, o_a])
    A_b = np.column_stack([H @ Q, H @ (o_a - a_ref) + b_ref])
    return A_a, A_b, shape


@dataclass
class PointCloud:
    lat: np.ndarray
    lon: np.ndarray
    h: np.ndarray
    dropped: int = 0

    def __len__(self):
        return len(self.h)

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros(0), np.zeros(0), np.zeros(0))
        return PointCloud(np.concatenate([c.lat for c in clouds]),
                          np.concatenate([c.lon for c in clouds]),
                          np.concatenate([c.h for c in clouds]),
                          sum(c.dropped for c in clouds))


def write_cloud(path, cloud: PointCloud) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat", "lon", "h"])
        for row in zip(cloud.lat, cloud.lon, cloud.h):
            w.writerow([repr(float(v)) for v in row])


def read_cloud(path) -> PointCloud:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2).reshape(-1, 3)
    return PointCloud(data[:, 0], data[:, 1], data[:, 2])


def disparity_to_cloud(disp: DisparityMap, cam_a: BiasedCamera, cam_b: BiasedCamera,
                       h_init=None, mask=None, max_residual: float | None = None) -> PointCloud:
    """Triangulate every valid disparity cell.

    Non-convergent and ill-conditioned points are dropped and counted; so are
    points whose residual exceeds ``max_residual`` (px) when given.
    ``h_init`` is a scalar or a callable ``(sample_a, line_a) -> heights``.
    """
    pa, pb = disp.correspondences(mask)
    if len(pa) == 0:
        return PointCloud(np.zeros(0), np.zeros(0), np.zeros(0))
    if h_init is None:
        h0 = cam_a.camera.height_off
    elif callable(h_init):
        h0 = np.asarray(h_init(pa[:, 0], pa[:, 1]), float)
    else:
        h0 = float(h_init)
    res = triangulate_batch(cam_a, cam_b, pa, pb, h0)
    keep = res.converged & np.isfinite(res.h)
    if max_residual is not None:
        keep &= res.residual <= max_residual
    return PointCloud(res.lat[keep], res.lon[keep], res.h[keep], int(np.count_nonzero(~keep)))


# --- fusion -----------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionConfig:
    y_top: int = 3
    median_window: int = 3
    hole_radius: int = 11
    cellsize: float = 0.5

    def __post_init__(self):
        if self.y_top < 1:
            raise ValueError("y_top must be >= 1")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError("median_window must be a positive odd integer")
        if self.hole_radius < 0 or self.cellsize <= 0:
            raise ValueError("invalid fusion configuration")


def top_y_median(cell: np.ndarray, h: np.ndarray, n_cells: int, y_top: int) -> np.ndarray:
    """Per-cell median of the ``y_top`` largest heights (NaN for empty cells)."""
    cell = np.asarray(cell, np.int64)
    h = np.asarray(h, float)
    out = np.full(n_cells, np.nan)
    if cell.size == 0:
        return out
    order = np.lexsort((-h, cell))
    cs, hs = cell[order], h[order]
    starts = np.searchsorted(cs, np.arange(n_cells))
    counts = np.bincount(cs, minlength=n_cells)
    k = np.minimum(counts, y_top)
    have = k > 0
    st, kk = starts[have], k[have]
    lo = hs[st + (kk - 1) // 2]
    hi = hs[st + kk // 2]
    out[have] = 0.5 * (lo + hi)
    return out


def nan_median_filter(data: np.ndarray, window: int) -> np.ndarray:
    """Median over the valid cells of each window; invalid cells stay NaN."""
    if window == 1:
        return data.copy()
    r = window // 2
    padded = np.pad(data, r, constant_values=np.nan)
    win = sliding_window_view(padded, (window, window)).reshape(*data.shape, -1)
    out = np.full(data.shape, np.nan)
    valid = np.isfinite(data)
    if valid.any():
        out[valid] = np.nanmedian(win[valid], axis=1)
    return out


def fill_holes(data: np.ndarray, max_radius: int) -> np.ndarray:
    """Fill NaN regions lying entirely within ``max_radius`` cells of valid data.

    Qualifying regions are filled from the outside in: each ring takes the
    median of the already-valid cells in its 3x3 neighbourhood. Larger regions
    are left untouched.
    """
    out = data.copy()
    holes = ~np.isfinite(out)
    if not holes.any() or not (~holes).any() or max_radius <= 0:
        return out
    dist = ndimage.distance_transform_cdt(holes, metric="chessboard")
    labels, n = ndimage.label(holes, structure=np.ones((3, 3)))
    reach = ndimage.maximum(dist, labels, index=np.arange(1, n + 1))
    fillable = np.isin(labels, 1 + np.nonzero(np.asarray(reach) <= max_radius)[0])
    for ring in range(1, max_radius + 1):
        cells = fillable & (dist == ring)
        if not cells.any():
            continue
        padded = np.pad(out, 1, constant_values=np.nan)
        win = sliding_window_view(padded, (3, 3)).reshape(*out.shape, 9)
        out[cells] = np.nanmedian(win[cells], axis=1)
    return out


def fuse_clouds(clouds, config: FusionConfig, tile: Tile, frame: LocalFrame,
                extent: Extent | None = None) -> Grid:
    """Grid a tile DSM from point clouds: top-Y median, median filter, hole fill."""
    clouds = list(clouds)
    if not clouds:
        raise ValueError("need at least one point cloud")
    ext = extent or tile.padded
    grid = empty_grid(ext, config.cellsize, frame=frame)
    cloud = PointCloud.concat(clouds)
    x, y = frame.from_geo(cloud.lat, cloud.lon)
    row, col = grid.cell_index(x, y)
    inside = (row >= 0) & (row < grid.nrows) & (col >= 0) & (col < grid.ncols)
    cell = row[inside] * grid.ncols + col[inside]
    z = top_y_median(cell, cloud.h[inside], grid.nrows * grid.ncols, config.y_top)
    z = z.reshape(grid.shape)
    z = nan_median_filter(z, config.median_window)
    z = fill_holes(z, config.hole_radius)
    return grid.with_data(z)


# --- mosaicking ----------------------------------------------------------------------------


def merge_tiles(tile_dsms) -> Grid:
    """Mosaic the core of every tile DSM into one grid covering the union of cores."""
    tile_dsms = list(tile_dsms)
    if not tile_dsms:
        raise ValueError("no tiles to merge")
    cs = tile_dsms[0][1].cellsize
    for _, g in tile_dsms:
        if abs(g.cellsize - cs) > 1e-9:
            raise ValueError(f"inconsistent cell sizes: {g.cellsize} vs {cs}")
    cores = [t.core for t, _ in tile_dsms]
    ext = Extent(min(e.xmin for e in cores), min(e.ymin for e in cores),
                 max(e.xmax for e in cores), max(e.ymax for e in cores))
    out = empty_grid(ext, cs, frame=tile_dsms[0][1].frame,
                     dtype=np.result_type(*[g.data.dtype for _, g in tile_dsms], float))
    out = replace(out, nodata=tile_dsms[0][1].nodata)
    for tile, g in tile_dsms:
        paste(out, g, tile.core)
    return out


@dataclass
class BoundaryStats:
    median_abs_z: float
    median_rms_z: float
    per_boundary: dict = field(default_factory=dict)

    def as_dict(self):
        return {"median_abs_z": self.median_abs_z, "median_rms_z": self.median_rms_z,
                "n_boundaries": len(self.per_boundary)}


def _boundary_diffs(ta: Tile, ga: Grid, tb: Tile, gb: Grid):
    """Height differences a - b on the cells straddling the shared core edge."""
    cs = ga.cellsize
    if tb.row == ta.row and tb.col == ta.col + 1:
        x = ta.core.xmax
        y0, y1 = max(ta.core.ymin, tb.core.ymin), min(ta.core.ymax, tb.core.ymax)
        ys = np.arange(y1 - 0.5 * cs, y0, -cs)
        xs = np.array([x - 0.5 * cs, x + 0.5 * cs])
        X, Y = np.meshgrid(xs, ys)
    elif tb.col == ta.col and tb.row == ta.row + 1:
        y = ta.core.ymin
        x0, x1 = max(ta.core.xmin, tb.core.xmin), min(ta.core.xmax, tb.core.xmax)
        xs = np.arange(x0 + 0.5 * cs, x1, cs)
        ys = np.array([y + 0.5 * cs, y - 0.5 * cs])
        X, Y = np.meshgrid(xs, ys)
    else:
        return None
    d = ga.sample(X, Y) - gb.sample(X, Y)
    return d[np.isfinite(d)]


def boundary_stats(tile_dsms) -> BoundaryStats:
    """Agreement of adjacent tile DSMs along their shared core edges.

    Per boundary: median |dz| and RMS dz over the cells on both sides of the
    edge (inside the overlap); the result is the median over boundaries.
    """
    tile_dsms = sorted(tile_dsms, key=lambda td: td[0].id)
    per = {}
    for i, (ta, ga) in enumerate(tile_dsms):
        for tb, gb in tile_dsms[i + 1:]:
            d = _boundary_diffs(ta, ga, tb, gb)
            if d is None or d.size == 0:
                continue
            per[f"{ta.name}|{tb.name}"] = (float(np.median(np.abs(d))),
                                           float(np.sqrt(np.mean(d * d))))
    if not per:
        raise ValueError("no adjacent tile pairs with overlapping data")
    vals = np.array(list(per.values()))
    return BoundaryStats(float(np.median(vals[:, 0])), float(np.median(vals[:, 1])), per)
