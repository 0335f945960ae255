"""Synthetic cameras and box-world scenes used as test oracles and fixtures.

An ``AffineView`` is a parallel-ray satellite view: an elevated point at
height h images where the ground point shifted by ``h * tan(off_nadir)`` away
from the satellite would. It is exactly representable as an RPC with linear
numerators and unit denominators, so every quantity derived from it (parallax,
shadow extents, correspondences) has a closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import shapely

from .grid import Extent, LocalFrame
from .rpc import BiasCorrection, BiasedCamera, RpcCamera, ZERO_BIAS

BACKGROUND, BUILDING, ROAD = 0, 1, 2


@dataclass(frozen=True)
class AffineView:
    image_id: str
    frame: LocalFrame
    x_ul: float          # local x of pixel (0, 0) centre at h = 0
    y_ul: float
    gsd: float
    shape: tuple[int, int]
    off_nadir_deg: float = 0.0
    azimuth_deg: float = 0.0     # direction ground -> satellite, clockwise from north
    bias: BiasCorrection = ZERO_BIAS   # true (unknown to the pipeline) bias
    height_off: float = 0.0
    height_scale: float = 500.0

    @property
    def lean(self) -> np.ndarray:
        """Horizontal ground shift per metre of height, (east, north)."""
        t = math.tan(math.radians(self.off_nadir_deg))
        a = math.radians(self.azimuth_deg)
        return np.array([t * math.sin(a), t * math.cos(a)])

    def pixel_of(self, x, y, h):
        """Exact (sample, line) without bias."""
        kx, ky = self.lean
        x = np.asarray(x, float) - np.asarray(h, float) * kx
        y = np.asarray(y, float) - np.asarray(h, float) * ky
        return (x - self.x_ul) / self.gsd, (self.y_ul - y) / self.gsd

    def ground_xy(self, sample, line, h=0.0, with_bias=True):
        """Inverse of ``pixel_of`` (+ true bias) at height h."""
        if with_bias:
            sample = np.asarray(sample, float) - self.bias.d_sample
            line = np.asarray(line, float) - self.bias.d_line
        kx, ky = self.lean
        x = self.x_ul + np.asarray(sample, float) * self.gsd + np.asarray(h, float) * kx
        y = self.y_ul - np.asarray(line, float) * self.gsd + np.asarray(h, float) * ky
        return x, y

    def rpc(self) -> RpcCamera:
        rows, cols = self.shape
        fr = self.frame
        xc = self.x_ul + 0.5 * (cols - 1) * self.gsd
        yc = self.y_ul - 0.5 * (rows - 1) * self.gsd
        lat_off, lon_off = (float(v) for v in fr.to_geo(xc, yc))
        half_w = 0.5 * cols * self.gsd + 50.0
        half_h = 0.5 * rows * self.gsd + 50.0
        lat_scale = half_h / fr.m_per_deg_lat
        lon_scale = half_w / fr.m_per_deg_lon
        samp_off, line_off = 0.5 * (cols - 1), 0.5 * (rows - 1)
        samp_scale, line_scale = 0.5 * cols, 0.5 * rows
        kx, ky = self.lean
        # x = (L*lon_scale + lon_off - lon0) * mlon, y likewise, h = H*hs + ho
        ax = (lon_off - fr.lon0) * fr.m_per_deg_lon
        bx = lon_scale * fr.m_per_deg_lon
        ay = (lat_off - fr.lat0) * fr.m_per_deg_lat
        by = lat_scale * fr.m_per_deg_lat
        ho, hs = self.height_off, self.height_scale
        # sample = (x - h kx - x_ul) / gsd
        s_const = (ax - ho * kx - self.x_ul) / self.gsd
        l_const = (self.y_ul - ay + ho * ky) / self.gsd
        samp_num = np.zeros(20)
        line_num = np.zeros(20)
        samp_num[0] = (s_const - samp_off) / samp_scale
        samp_num[1] = bx / self.gsd / samp_scale            # L
        samp_num[3] = -hs * kx / self.gsd / samp_scale      # H
        line_num[0] = (l_const - line_off) / line_scale
        line_num[2] = -by / self.gsd / line_scale           # P
        line_num[3] = hs * ky / self.gsd / line_scale       # H
        den = np.zeros(20)
        den[0] = 1.0
        return RpcCamera(self.image_id, line_off, samp_off, lat_off, lon_off, ho,
                         line_scale, samp_scale, lat_scale, lon_scale, hs,
                         line_num, den.copy(), samp_num, den.copy())

    def camera(self, bias: BiasCorrection | None = None) -> BiasedCamera:
        """RPC + bias; by default the true bias."""
        return BiasedCamera(self.rpc(), self.bias if bias is None else bias)


def view_over(image_id, frame, extent: Extent, gsd, off_nadir_deg=0.0, azimuth_deg=0.0,
              bias=ZERO_BIAS, max_height=30.0, pad=8.0) -> AffineView:
    """A view whose image covers ``extent`` for all heights in [0, max_height]."""
    v = AffineView(image_id, frame, 0.0, 0.0, gsd, (1, 1), off_nadir_deg, azimuth_deg, bias)
    kx, ky = v.lean
    xs = [extent.xmin - pad, extent.xmax + pad]
    ys = [extent.ymin - pad, extent.ymax + pad]
    xmin = min(xs[0], xs[0] - max_height * kx)
    xmax = max(xs[1], xs[1] - max_height * kx)
    ymin = min(ys[0], ys[0] - max_height * ky)
    ymax = max(ys[1], ys[1] - max_height * ky)
    x_ul = math.floor(xmin / gsd) * gsd + 0.5 * gsd
    y_ul = math.ceil(ymax / gsd) * gsd - 0.5 * gsd
    cols = int(math.ceil((xmax - x_ul) / gsd)) + 1
    rows = int(math.ceil((y_ul - ymin) / gsd)) + 1
    return AffineView(image_id, frame, x_ul, y_ul, gsd, (rows, cols), off_nadir_deg,
                      azimuth_deg, bias)


def random_cubic_camera(rng: np.random.Generator, image_id="cubic", strength=1e-3,
                        lat_off=40.0, lon_off=-86.0) -> RpcCamera:
    """A generic RPC with all 80 coefficients populated (denominators near 1)."""
    def num():
        c = rng.normal(0, strength, 20)
        c[1:4] += rng.normal(0, 1, 3)
        c[0] += rng.normal(0, 0.05)
        return c

    def den():
        c = rng.normal(0, strength, 20)
        c[0] = 1.0
        return c

    return RpcCamera(image_id, line_off=5000.0, samp_off=5000.0, lat_off=lat_off,
                     lon_off=lon_off, height_off=200.0, line_scale=5000.0,
                     samp_scale=5000.0, lat_scale=0.05, lon_scale=0.05, height_scale=500.0,
                     line_num=num(), line_den=den(), samp_num=num(), samp_den=den())


# --- box world ---------------------------------------------------------------------

@dataclass
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    top: float     # absolute roof height (m)

    @property
    def polygon(self):
        return shapely.box(self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass
class Surface:
    """Visible surface points for a batch of pixels."""

    x: np.ndarray
    y: np.ndarray
    h: np.ndarray
    wall: np.ndarray
    box: np.ndarray      # index of the box hit, -1 for ground


@dataclass
class BoxScene:
    """Flat-roofed boxes on a planar ground ``z = z0 + gx*x + gy*y``.

    Roads are polylines in local metres; their 8 m buffered footprint is used
    for ground classification.
    """

    boxes: list[Box] = field(default_factory=list)
    z0: float = 0.0
    gx: float = 0.0
    gy: float = 0.0
    roads: list[list[tuple[float, float]]] = field(default_factory=list)
    road_width: float = 8.0

    def ground(self, x, y):
        return self.z0 + self.gx * np.asarray(x, float) + self.gy * np.asarray(y, float)

    def surface(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        z = self.ground(x, y)
        for b in self.boxes:
            inside = (x >= b.xmin) & (x < b.xmax) & (y > b.ymin) & (y <= b.ymax)
            z = np.where(inside, np.maximum(z, b.top), z)
        return z

    def box_index(self, x, y):
        idx = np.full(np.shape(x), -1)
        for i, b in enumerate(self.boxes):
            inside = (x >= b.xmin) & (x < b.xmax) & (y > b.ymin) & (y <= b.ymax)
            idx = np.where(inside, i, idx)
        return idx

    def road_polygon(self):
        from .labels import buffer_polyline
        polys = [buffer_polyline(np.asarray(r, float), self.road_width / 2.0)
                 for r in self.roads]
        polys = [p for p in polys if p is not None]
        return shapely.union_all(polys) if polys else shapely.Polygon()

    def classify_ground(self, x, y):
        cls = np.full(np.shape(x), BACKGROUND, dtype=np.int64)
        roads = self.road_polygon()
        if not roads.is_empty:
            cls[shapely.contains_xy(roads, x, y)] = ROAD
        return cls

    def cast(self, view: AffineView, sample, line) -> Surface:
        """First surface point hit by the ray through each pixel."""
        sample = np.asarray(sample, float)
        line = np.asarray(line, float)
        gx0, gy0 = view.ground_xy(sample, line, 0.0)
        kx, ky = view.lean
        denom = 1.0 - self.gx * kx - self.gy * ky
        h_best = (self.z0 + self.gx * gx0 + self.gy * gy0) / denom
        wall = np.zeros(sample.shape, bool)
        which = np.full(sample.shape, -1)
        for i, b in enumerate(self.boxes):
            lo = np.full(sample.shape, -np.inf)
            hi = np.full(sample.shape, b.top)
            limited = np.zeros(sample.shape, bool)
            for g0, k, a0, a1 in ((gx0, kx, b.xmin, b.xmax), (gy0, ky, b.ymin, b.ymax)):
                if abs(k) < 1e-15:
                    outside = (g0 < a0) | (g0 > a1)
                    hi = np.where(outside, -np.inf, hi)
                    continue
                t0 = (a0 - g0) / k
                t1 = (a1 - g0) / k
                tmin, tmax = np.minimum(t0, t1), np.maximum(t0, t1)
                limited |= tmax < hi
                hi = np.minimum(hi, tmax)
                lo = np.maximum(lo, tmin)
            base = min(self.ground(b.xmin, b.ymin), self.ground(b.xmax, b.ymax),
                       self.ground(b.xmin, b.ymax), self.ground(b.xmax, b.ymin))
            lo = np.maximum(lo, base)
            hit = (hi >= lo) & (hi > h_best)
            h_best = np.where(hit, hi, h_best)
            wall = np.where(hit, limited, wall)
            which = np.where(hit, i, which)
        x = gx0 + h_best * kx
        y = gy0 + h_best * ky
        return Surface(x, y, h_best, wall, which)


SPECTRA = {
    # coastal, red edge, pan
    BACKGROUND: (0.20, 0.25, 0.45),
    BUILDING: (0.30, 0.30, 0.80),
    ROAD: (0.10, 0.30, 0.20),
}
WALL_SPECTRUM = (0.28, 0.28, 0.65)


def render_image(scene: BoxScene, view: AffineView, noise: float = 0.0,
                 rng: np.random.Generator | None = None):
    """(3, rows, cols) band stack: coastal, red edge, pan."""
    rows, cols = view.shape
    ll, ss = np.mgrid[0:rows, 0:cols].astype(float)
    surf = scene.cast(view, ss, ll)
    cls = scene.classify_ground(surf.x, surf.y)
    cls = np.where(surf.box >= 0, BUILDING, cls)
    bands = np.empty((3, rows, cols))
    for c, spec in SPECTRA.items():
        for b in range(3):
            bands[b][cls == c] = spec[b]
    for b in range(3):
        bands[b][surf.wall] = WALL_SPECTRUM[b]
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        bands = bands + rng.normal(0, noise, bands.shape)
    return bands


def shadow_mask(scene: BoxScene, view: AffineView, xs, ys, samples: int = 400):
    """Analytic occlusion oracle: is the ray from (x, y, surface) to the satellite blocked?

    Marches the ray upward in ``samples`` steps up to the tallest roof.
    """
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    h0 = scene.surface(xs, ys)
    top = max([b.top for b in scene.boxes] + [float(np.max(h0))])
    kx, ky = view.lean
    blocked = np.zeros(xs.shape, bool)
    if kx == 0 and ky == 0:
        return blocked
    for t in np.linspace(0.0, 1.0, samples + 1)[1:]:
        dh = t * (top - h0) + 1e-9
        hx = xs + dh * kx
        hy = ys + dh * ky
        blocked |= scene.surface(hx, hy) > h0 + dh + 1e-9
    return blocked


# --- tie-point fixtures ---------------------------------------------------------------

@dataclass
class TieFixture:
    views: list[AffineView]
    observations: list      # TieObservation
    biases: np.ndarray      # (n, 2) injected (true) biases

    @property
    def cameras(self) -> list[RpcCamera]:
        """Unbiased RPCs as handed to the adjustment."""
        return [v.rpc() for v in self.views]


def tie_fixture(rng: np.random.Generator, n_images=10, n_tracks=300, track_len=3,
                bias_px=6.0, noise_px=0.0, extent=Extent(0, 0, 1000, 1000), gsd=0.5,
                max_height=30.0, frame=LocalFrame(40.0, -86.0),
                gauge_free=True) -> TieFixture:
    """Views with known biases observing random world points.

    Injected biases have mean magnitude ``bias_px``. With ``gauge_free`` they are
    projected off the translation gauge (see ``alignment.gauge_basis``), which is
    the representative the L2 regulariser recovers.
    """
    from .alignment import TieObservation, gauge_basis, remove_gauge

    off_nadir = rng.uniform(5.0, 30.0, n_images)
    azimuth = rng.uniform(0.0, 360.0, n_images)
    b = rng.normal(0.0, 1.0, (n_images, 2))
    b -= b.mean(axis=0)
    if gauge_free:
        plain = [view_over(f"img{i:02d}", frame, extent, gsd, off_nadir[i], azimuth[i])
                 for i in range(n_images)]
        cx, cy = 0.5 * (extent.xmin + extent.xmax), 0.5 * (extent.ymin + extent.ymax)
        lat, lon = frame.to_geo(cx, cy)
        b = remove_gauge(b, gauge_basis([v.camera() for v in plain], float(lat), float(lon),
                                        0.5 * max_height))
    if bias_px > 0:
        b *= bias_px / np.mean(np.hypot(b[:, 0], b[:, 1]))
    else:
        b[:] = 0.0
    views = [view_over(f"img{i:02d}", frame, extent, gsd, off_nadir[i], azimuth[i],
                       bias=BiasCorrection(*map(float, b[i])), max_height=max_height)
             for i in range(n_images)]
    cams = [v.camera() for v in views]
    obs = []
    margin = 0.05 * extent.width
    for t in range(n_tracks):
        x = rng.uniform(extent.xmin + margin, extent.xmax - margin)
        y = rng.uniform(extent.ymin + margin, extent.ymax - margin)
        h = rng.uniform(0.0, max_height)
        lat, lon = frame.to_geo(x, y)
        for i in sorted(rng.choice(n_images, track_len, replace=False)):
            s, l = cams[i].project(lat, lon, h)
            ds, dl = rng.normal(0.0, noise_px, 2) if noise_px > 0 else (0.0, 0.0)
            obs.append(TieObservation(views[i].image_id, float(s) + ds, float(l) + dl, t))
    return TieFixture(views, obs, b)


# --- stereo ----------------------------------------------------------------------------

def render_disparity(scene: BoxScene, view_a: AffineView, view_b: AffineView,
                     rect_to_a: np.ndarray, rect_to_b: np.ndarray, shape, pair_id=None):
    """Exact disparities of ``scene`` on a rectified grid.

    Cells whose image-a ray hits a wall, whose surface point is hidden from
    view b, or that fall outside either image are invalid.
    """
    from .dsm import DisparityMap

    rows, cols = shape
    r, c = np.mgrid[0:rows, 0:cols].astype(float)
    A, B = np.asarray(rect_to_a, float), np.asarray(rect_to_b, float)
    sa = A[0, 0] * c + A[0, 1] * r + A[0, 2]
    la = A[1, 0] * c + A[1, 1] * r + A[1, 2]
    surf = scene.cast(view_a, sa, la)
    sb, lb = view_b.pixel_of(surf.x, surf.y, surf.h)
    sb = sb + view_b.bias.d_sample
    lb = lb + view_b.bias.d_line
    seen = scene.cast(view_b, sb, lb)
    visible = (np.abs(seen.x - surf.x) < 1e-6) & (np.abs(seen.y - surf.y) < 1e-6) & \
        (np.abs(seen.h - surf.h) < 1e-6)
    inv = np.linalg.inv(B[:, :2])
    u = inv[0, 0] * (sb - B[0, 2]) + inv[0, 1] * (lb - B[1, 2])
    d = u - c

    def inside(view, s, l):
        return (s >= -0.5) & (s <= view.shape[1] - 0.5) & (l >= -0.5) & (l <= view.shape[0] - 0.5)

    valid = ~surf.wall & visible & inside(view_a, sa, la) & inside(view_b, sb, lb)
    d = np.where(valid, d, np.nan)
    pid = pair_id or f"{view_a.image_id}__{view_b.image_id}"
    return DisparityMap(pid, view_a.image_id, view_b.image_id, d, A, B)
