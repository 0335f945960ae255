"""RPC camera model, per-image bias correction, triangulation and tiling."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DegenerateCameraError, IllConditionedError, NonConvergenceError,
                     RpcDomainWarning)
from .grid import Extent, Grid, LocalFrame

# Exponents of (L=lon, P=lat, H=height) for the 20 cubic monomials, RPC00B order.
MONOMIAL_EXPONENTS = np.array([
    (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, 0, 1), (0, 1, 1), (2, 0, 0), (0, 2, 0), (0, 0, 2),
    (1, 1, 1), (3, 0, 0), (1, 2, 0), (1, 0, 2), (2, 1, 0),
    (0, 3, 0), (0, 1, 2), (2, 0, 1), (0, 2, 1), (0, 0, 3),
])

VALIDITY_BOX = 1.5
DEN_EPS = 1e-12


def _powers(v):
    return [np.ones_like(v), v, v * v, v * v * v]


def monomials(lon_n, lat_n, h_n):
    """All 20 monomials, shape (20, ...), for normalised coordinates."""
    Lp, Pp, Hp = _powers(lon_n), _powers(lat_n), _powers(h_n)
    return np.stack([Lp[a] * Pp[b] * Hp[c] for a, b, c in MONOMIAL_EXPONENTS])


def monomial_gradients(lon_n, lat_n, h_n):
    """d(monomials)/d(L, P, H), each of shape (20, ...)."""
    Lp, Pp, Hp = _powers(lon_n), _powers(lat_n), _powers(h_n)
    zero = np.zeros_like(lon_n)
    dL, dP, dH = [], [], []
    for a, b, c in MONOMIAL_EXPONENTS:
        dL.append(a * Lp[a - 1] * Pp[b] * Hp[c] if a else zero)
        dP.append(b * Lp[a] * Pp[b - 1] * Hp[c] if b else zero)
        dH.append(c * Lp[a] * Pp[b] * Hp[c - 1] if c else zero)
    return np.stack(dL), np.stack(dP), np.stack(dH)


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    h: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class PixelCoord:
    sample: float
    line: float

    def __post_init__(self):
        if not (math.isfinite(self.sample) and math.isfinite(self.line)):
            raise ValueError("pixel coordinates must be finite")


@dataclass(frozen=True)
class BiasCorrection:
    """Constant image-space offset added after the RPC projection."""

    d_sample: float = 0.0
    d_line: float = 0.0
    bound: float = field(default=50.0, compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.d_sample) and math.isfinite(self.d_line)):
            raise ValueError("bias must be finite")
        if math.hypot(self.d_sample, self.d_line) > self.bound:
            raise ValueError(
                f"bias ({self.d_sample}, {self.d_line}) exceeds sanity bound {self.bound} px")

    def __add__(self, other: "BiasCorrection") -> "BiasCorrection":
        return BiasCorrection(self.d_sample + other.d_sample, self.d_line + other.d_line,
                              bound=max(self.bound, other.bound))


ZERO_BIAS = BiasCorrection()


@dataclass(frozen=True, eq=False)
class RpcCamera:
    image_id: str
    line_off: float
    samp_off: float
    lat_off: float
    lon_off: float
    height_off: float
    line_scale: float
    samp_scale: float
    lat_scale: float
    lon_scale: float
    height_scale: float
    line_num: np.ndarray
    line_den: np.ndarray
    samp_num: np.ndarray
    samp_den: np.ndarray

    def __post_init__(self):
        for name in ("line_num", "line_den", "samp_num", "samp_den"):
            coeffs = np.asarray(getattr(self, name), dtype=float)
            if coeffs.shape != (20,):
                raise ValueError(f"{name} must have exactly 20 coefficients")
            object.__setattr__(self, name, coeffs)
        for name in ("line_scale", "samp_scale", "lat_scale", "lon_scale", "height_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.line_den[0] == 0 or self.samp_den[0] == 0:
            raise ValueError("denominator constant term must be nonzero")

    def normalize(self, lat, lon, h):
        return ((np.asarray(lon, dtype=float) - self.lon_off) / self.lon_scale,
                (np.asarray(lat, dtype=float) - self.lat_off) / self.lat_scale,
                (np.asarray(h, dtype=float) - self.height_off) / self.height_scale)

    def _check_domain(self, *norm):
        if any(np.any(np.abs(v) > VALIDITY_BOX) for v in norm):
            warnings.warn(f"{self.image_id}: point outside RPC validity box",
                          RpcDomainWarning, stacklevel=3)

    def project_normalized(self, lon_n, lat_n, h_n):
        m = monomials(lon_n, lat_n, h_n)
        sd = np.tensordot(self.samp_den, m, 1)
        ld = np.tensordot(self.line_den, m, 1)
        if np.any(np.abs(sd) < DEN_EPS) or np.any(np.abs(ld) < DEN_EPS):
            raise DegenerateCameraError(f"{self.image_id}: RPC denominator vanishes")
        s = np.tensordot(self.samp_num, m, 1) / sd
        l = np.tensordot(self.line_num, m, 1) / ld
        return s * self.samp_scale + self.samp_off, l * self.line_scale + self.line_off

    def project(self, lat, lon, h, check_domain=True):
        """Vectorised (lat, lon, h) -> (sample, line) without bias."""
        norm = self.normalize(lat, lon, h)
        if check_domain:
            self._check_domain(*norm)
        return self.project_normalized(*norm)

    def jacobian(self, lat, lon, h):
        """d(sample, line)/d(lat, lon, h); shape (..., 2, 3)."""
        L, P, H = self.normalize(lat, lon, h)
        m = monomials(L, P, H)
        dm = monomial_gradients(L, P, H)
        rows = []
        for num, den, out_scale in ((self.samp_num, self.samp_den, self.samp_scale),
                                    (self.line_num, self.line_den, self.line_scale)):
            n, d = np.tensordot(num, m, 1), np.tensordot(den, m, 1)
            # order of dm is (L, P, H); output order is (lat, lon, h)
            grads = [(np.tensordot(num, g, 1) * d - n * np.tensordot(den, g, 1)) / (d * d)
                     for g in dm]
            rows.append([out_scale * grads[1] / self.lat_scale,
                         out_scale * grads[0] / self.lon_scale,
                         out_scale * grads[2] / self.height_scale])
        return np.moveaxis(np.array(rows), (0, 1), (-2, -1))


@dataclass(frozen=True, eq=False)
class BiasedCamera:
    """An RPC camera together with its bias correction."""

    camera: RpcCamera
    bias: BiasCorrection = ZERO_BIAS

    @property
    def image_id(self) -> str:
        return self.camera.image_id

    def project(self, lat, lon, h, check_domain=True):
        s, l = self.camera.project(lat, lon, h, check_domain=check_domain)
        return s + self.bias.d_sample, l + self.bias.d_line

    def jacobian(self, lat, lon, h):
        return self.camera.jacobian(lat, lon, h)


def project(camera: RpcCamera, bias: BiasCorrection, point: GeoPoint) -> PixelCoord:
    s, l = BiasedCamera(camera, bias).project(point.lat, point.lon, point.h)
    return PixelCoord(float(s), float(l))


def localize(cam: BiasedCamera, sample, line, h, max_iter=30, tol=1e-9):
    """Inverse projection at fixed height: pixel -> (lat, lon), vectorised Newton."""
    sample, line, h = np.broadcast_arrays(np.asarray(sample, float), np.asarray(line, float),
                                          np.asarray(h, float))
    c = cam.camera
    lat = np.full(sample.shape, c.lat_off)
    lon = np.full(sample.shape, c.lon_off)
    for _ in range(max_iter):
        s, l = cam.project(lat, lon, h, check_domain=False)
        J = cam.jacobian(lat, lon, h)[..., :, :2]
        r = np.stack([sample - s, line - l], axis=-1)
        step = np.linalg.solve(J, r[..., None])[..., 0]
        lat = lat + step[..., 0]
        lon = lon + step[..., 1]
        if np.all(np.abs(step[..., 0]) < tol * c.lat_scale) and \
                np.all(np.abs(step[..., 1]) < tol * c.lon_scale):
            break
    return lat, lon


# --- triangulation -------------------------------------------------------------

@dataclass(frozen=True)
class Triangulation:
    point: GeoPoint
    residual: float
    iterations: int


@dataclass
class BatchTriangulation:
    lat: np.ndarray
    lon: np.ndarray
    h: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    ill_conditioned: np.ndarray
    iterations: int


FD_STEP = 1e-7
COND_MAX = 1e10


def _stack_residual(cams, pxs, lat, lon, h):
    parts = []
    for cam, px in zip(cams, pxs):
        s, l = cam.project(lat, lon, h, check_domain=False)
        parts += [s - px[:, 0], l - px[:, 1]]
    return np.stack(parts, axis=-1)


def triangulate_batch(cam_a: BiasedCamera, cam_b: BiasedCamera, px_a, px_b, h_init,
                      max_iter: int = 50, tol: float = 1e-4) -> BatchTriangulation:
    """Two-view damped Gauss-Newton on (lat, lon, h) for many correspondences.

    Jacobians use central differences with step ``FD_STEP`` in the normalised
    coordinates of ``cam_a``. Convergence means the predicted pixel motion of
    the last step is below ``tol``.
    """
    px_a = np.atleast_2d(np.asarray(px_a, float))
    px_b = np.atleast_2d(np.asarray(px_b, float))
    n = len(px_a)
    ref = cam_a.camera
    scale = np.array([ref.lat_scale, ref.lon_scale, ref.height_scale])
    h0 = np.broadcast_to(np.asarray(h_init, float), (n,)).copy()
    lat0, lon0 = localize(cam_a, px_a[:, 0], px_a[:, 1], h0)
    x = np.stack([lat0, lon0, h0], axis=-1)
    cams, pxs = (cam_a, cam_b), (px_a, px_b)

    def resid(xx, idx):
        return _stack_residual(cams, (px_a[idx], px_b[idx]), xx[:, 0], xx[:, 1], xx[:, 2])

    converged = np.zeros(n, bool)
    ill = np.zeros(n, bool)
    active = np.arange(n)
    it = 0
    for it in range(1, max_iter + 1):
        if active.size == 0:
            it -= 1
            break
        xa = x[active]
        r = resid(xa, active)
        J = np.empty((active.size, 4, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = FD_STEP * scale[k]
            J[:, :, k] = (resid(xa + d, active) - resid(xa - d, active)) / (2 * FD_STEP)
        # J is w.r.t. normalised units; solve there and rescale.
        JtJ = np.einsum("nik,nil->nkl", J, J)
        g = np.einsum("nik,ni->nk", J, r)
        cond = np.linalg.cond(JtJ)
        bad = ~np.isfinite(cond) | (cond > COND_MAX)
        if bad.any():
            ill[active[bad]] = True
        ok = ~bad
        step = np.zeros((active.size, 3))
        if ok.any():
            step[ok] = -np.linalg.solve(JtJ[ok], g[ok][..., None])[..., 0]
        cost0 = np.sum(r * r, axis=1)
        t = np.ones(active.size)
        for _ in range(20):
            trial = xa + step * t[:, None] * scale
            cost1 = np.sum(resid(trial, active) ** 2, axis=1)
            worse = ok & (cost1 > cost0 * (1 + 1e-12) + 1e-18)
            if not worse.any():
                break
            t[worse] *= 0.5
        eff = step * t[:, None]
        x[active[ok]] = xa[ok] + eff[ok] * scale
        moved = np.max(np.abs(np.einsum("nik,nk->ni", J, eff)), axis=1)
        done = ok & (moved < tol)
        converged[active[done]] = True
        active = active[ok & ~done]
    final = _stack_residual(cams, pxs, x[:, 0], x[:, 1], x[:, 2])
    rms = np.sqrt(np.sum(final ** 2, axis=1) / 2.0)
    return BatchTriangulation(x[:, 0], x[:, 1], x[:, 2], rms, converged & ~ill, ill, it)


def triangulate(cam_a: BiasedCamera, cam_b: BiasedCamera, px_a: PixelCoord,
                px_b: PixelCoord, h_init: float, max_iter: int = 50,
                tol: float = 1e-4) -> Triangulation:
    """Least-squares intersection of two rays.

    The residual is the RMS over the two images of the reprojection distance.
    """
    res = triangulate_batch(cam_a, cam_b, [[px_a.sample, px_a.line]],
                            [[px_b.sample, px_b.line]], h_init, max_iter, tol)
    if res.ill_conditioned[0]:
        raise IllConditionedError("rays are (nearly) parallel; height unobservable")
    if not res.converged[0]:
        raise NonConvergenceError(f"no convergence after {max_iter} iterations",
                                  residual=float(res.residual[0]))
    return Triangulation(GeoPoint(float(res.lat[0]), float(res.lon[0]), float(res.h[0])),
                         float(res.residual[0]), res.iterations)


# --- tiling ---------------------------------------------------------------------

TILE_CORE_M = 1000.0
TILE_MARGIN_M = 300.0


@dataclass(frozen=True)
class Tile:
    row: int
    col: int
    core: Extent
    padded: Extent

    @property
    def id(self) -> tuple[int, int]:
        return (self.row, self.col)

    @property
    def name(self) -> str:
        return f"r{self.row}c{self.col}"

    def geo_bounds(self, frame: LocalFrame, padded=True):
        e = self.padded if padded else self.core
        (lat0, lat1), (lon0, lon1) = frame.to_geo([e.xmin, e.xmax], [e.ymin, e.ymax])
        return float(lat0), float(lon0), float(lat1), float(lon1)


def partition_aoi(aoi: Extent, core: float = TILE_CORE_M,
                  margin: float = TILE_MARGIN_M) -> list[Tile]:
    """Split the AOI into row-major tiles (row 0 is northernmost).

    Cores are ``core`` metres square except in the last row/column, where they
    are clipped to the AOI; padded extents add ``margin`` on every side.
    """
    if not (aoi.width > 0 and aoi.height > 0) or not all(
            math.isfinite(v) for v in (aoi.xmin, aoi.ymin, aoi.xmax, aoi.ymax)):
        raise ValueError(f"degenerate AOI {aoi}")
    if aoi.width < core - 1e-9 or aoi.height < core - 1e-9:
        raise ValueError(f"AOI {aoi.width} x {aoi.height} m is smaller than one tile core")
    ncols = math.ceil(aoi.width / core - 1e-9)
    nrows = math.ceil(aoi.height / core - 1e-9)
    tiles = []
    for r in range(nrows):
        ymax = aoi.ymax - r * core
        ymin = max(ymax - core, aoi.ymin)
        for c in range(ncols):
            xmin = aoi.xmin + c * core
            xmax = min(xmin + core, aoi.xmax)
            e = Extent(xmin, ymin, xmax, ymax)
            tiles.append(Tile(r, c, e, e.buffer(margin)))
    return tiles


@dataclass(frozen=True)
class PixelBox:
    col0: int
    row0: int
    col1: int
    row1: int

    @property
    def width(self) -> int:
        return self.col1 - self.col0

    @property
    def height(self) -> int:
        return self.row1 - self.row0


def default_image_shape(camera: RpcCamera) -> tuple[int, int]:
    return (int(math.ceil(camera.line_off + camera.line_scale)),
            int(math.ceil(camera.samp_off + camera.samp_scale)))


def image_footprint(cam: BiasedCamera, tile: Tile, dem: Grid, frame: LocalFrame,
                    margin: int = 16, image_shape: tuple[int, int] | None = None,
                    unclipped: bool = False) -> PixelBox | None:
    """Pixel window covering the tile's padded extent, or None if disjoint.

    Corner heights come from the DEM; missing DEM values fall back to its
    minimum.
    """
    e = tile.padded
    xs = np.array([e.xmin, e.xmax, e.xmin, e.xmax])
    ys = np.array([e.ymin, e.ymin, e.ymax, e.ymax])
    inset = 0.5 * dem.cellsize
    hx = np.clip(xs, dem.extent.xmin + inset, dem.extent.xmax - inset)
    hy = np.clip(ys, dem.extent.ymin + inset, dem.extent.ymax - inset)
    h = dem.sample(hx, hy)
    if np.isnan(h).any():
        fallback = np.nanmin(dem.data) if np.isfinite(dem.data).any() else 0.0
        h = np.where(np.isnan(h), fallback, h)
    lat, lon = frame.to_geo(xs, ys)
    s, l = cam.project(lat, lon, h, check_domain=False)
    box = PixelBox(int(math.floor(s.min())) - margin, int(math.floor(l.min())) - margin,
                   int(math.ceil(s.max())) + margin + 1, int(math.ceil(l.max())) + margin + 1)
    if unclipped:
        return box
    rows, cols = image_shape if image_shape is not None else default_image_shape(cam.camera)
    clipped = PixelBox(max(box.col0, 0), max(box.row0, 0), min(box.col1, cols),
                       min(box.row1, rows))
    if clipped.width <= 0 or clipped.height <= 0:
        return None
    return clipped


# --- file formats -----------------------------------------------------------------

_SCALAR_KEYS = [("LINE_OFF", "line_off"), ("SAMP_OFF", "samp_off"), ("LAT_OFF", "lat_off"),
                ("LONG_OFF", "lon_off"), ("HEIGHT_OFF", "height_off"),
                ("LINE_SCALE", "line_scale"), ("SAMP_SCALE", "samp_scale"),
                ("LAT_SCALE", "lat_scale"), ("LONG_SCALE", "lon_scale"),
                ("HEIGHT_SCALE", "height_scale")]
_COEFF_KEYS = [("LINE_NUM_COEFF", "line_num"), ("LINE_DEN_COEFF", "line_den"),
               ("SAMP_NUM_COEFF", "samp_num"), ("SAMP_DEN_COEFF", "samp_den")]


def write_rpc(path, camera: RpcCamera) -> None:
    lines = [f"{key} = {float(getattr(camera, attr))!r}" for key, attr in _SCALAR_KEYS]
    for key, attr in _COEFF_KEYS:
        coeffs = getattr(camera, attr)
        lines += [f"{key}_{i + 1} = {float(c)!r}" for i, c in enumerate(coeffs)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_rpc(path, image_id: str | None = None) -> RpcCamera:
    values = {}
    for raw in Path(path).read_text().splitlines():
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        key, _, value = raw.partition("=")
        values[key.strip().upper()] = float(value.strip())
    kwargs = {attr: values[key] for key, attr in _SCALAR_KEYS}
    for key, attr in _COEFF_KEYS:
        kwargs[attr] = np.array([values[f"{key}_{i}"] for i in range(1, 21)])
    return RpcCamera(image_id=image_id or Path(path).stem, **kwargs)


def write_biases(path, biases: dict[str, BiasCorrection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "d_sample", "d_line"])
        for image_id in sorted(biases):
            b = biases[image_id]
            w.writerow([image_id, repr(float(b.d_sample)), repr(float(b.d_line))])


def read_biases(path) -> dict[str, BiasCorrection]:
    with open(path, newline="") as fh:
        return {row["image_id"]: BiasCorrection(float(row["d_sample"]), float(row["d_line"]))
                for row in csv.DictReader(fh)}
