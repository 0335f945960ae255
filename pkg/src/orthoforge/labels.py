"""Vector labels: GeoJSON ingest, road buffering, rasterisation, feature rasters,
NCC registration of labels to imagery, ground windows and off-nadir projection."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import shapely
from scipy.signal import correlate

from .errors import NoSignalError, ValidationError
from .grid import Grid, LocalFrame
from .rpc import BiasedCamera

log = logging.getLogger(__name__)

BACKGROUND, BUILDING, ROAD = 0, 1, 2
CLASS_NAMES = {BUILDING: "building", ROAD: "road"}
CLASS_IDS = {v: k for k, v in CLASS_NAMES.items()}

ROAD_WIDTH_M = 8.0


# --- vectors --------------------------------------------------------------------------

@dataclass
class Feature:
    id: str
    cls: int
    kind: str                  # "Polygon" or "LineString"
    coords: np.ndarray         # (n, 2) lon, lat; polygon rings closed

    def __post_init__(self):
        self.coords = np.asarray(self.coords, float).reshape(-1, 2)
        if self.cls not in CLASS_NAMES:
            raise ValidationError(f"feature {self.id}: unknown class {self.cls}")
        if self.kind == "LineString":
            if len(self.coords) < 2:
                raise ValidationError(f"feature {self.id}: polyline needs >= 2 vertices")
        elif self.kind == "Polygon":
            if len(self.coords) < 4 or not np.array_equal(self.coords[0], self.coords[-1]):
                raise ValidationError(f"feature {self.id}: polygon ring is not closed")
            if not shapely.Polygon(self.coords).is_valid:
                raise ValidationError(f"feature {self.id}: polygon ring self-intersects")
        else:
            raise ValidationError(f"feature {self.id}: unsupported geometry {self.kind}")

    def local(self, frame: LocalFrame) -> np.ndarray:
        x, y = frame.from_geo(self.coords[:, 1], self.coords[:, 0])
        return np.column_stack([x, y])


@dataclass
class VectorLayer:
    features: list[Feature] = field(default_factory=list)

    def of_class(self, cls: int) -> list[Feature]:
        return [f for f in self.features if f.cls == cls]


def from_local(fid, cls, kind, xy, frame: LocalFrame) -> Feature:
    xy = np.asarray(xy, float)
    lat, lon = frame.to_geo(xy[:, 0], xy[:, 1])
    return Feature(fid, cls, kind, np.column_stack([lon, lat]))


def read_geojson(path) -> VectorLayer:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise ValidationError(f"{path}: expected a FeatureCollection")
    feats = []
    for i, f in enumerate(doc.get("features", [])):
        geom = f["geometry"]
        props = f.get("properties") or {}
        name = props.get("class")
        if name not in CLASS_IDS:
            raise ValidationError(f"{path}: feature {i} has unknown class {name!r}")
        coords = geom["coordinates"][0] if geom["type"] == "Polygon" else geom["coordinates"]
        feats.append(Feature(str(props.get("id", i)), CLASS_IDS[name], geom["type"], coords))
    return VectorLayer(feats)


def write_geojson(path, layer: VectorLayer) -> None:
    feats = []
    for f in layer.features:
        coords = f.coords.tolist()
        geom = {"type": f.kind, "coordinates": [coords] if f.kind == "Polygon" else coords}
        feats.append({"type": "Feature", "geometry": geom,
                      "properties": {"class": CLASS_NAMES[f.cls], "id": f.id}})
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": feats},
                                     indent=1) + "\n")


def _dedupe(coords):
    keep = np.ones(len(coords), bool)
    keep[1:] = np.any(np.diff(coords, axis=0) != 0, axis=1)
    return coords[keep], int(np.count_nonzero(~keep))


def buffer_polyline(coords, half_width: float):
    """Flat-capped, mitre-joined buffer (mitre limit 2) of a metric polyline.

    Zero-length segments are dropped; a polyline with no length left gives None.
    """
    pts, dropped = _dedupe(np.asarray(coords, float))
    if dropped:
        warnings.warn(f"skipped {dropped} zero-length road segment(s)", stacklevel=2)
    if len(pts) < 2:
        return None
    return shapely.LineString(pts).buffer(half_width, cap_style="flat", join_style="mitre",
                                          mitre_limit=2.0)


def buffer_roads(layer: VectorLayer, frame: LocalFrame,
                 width: float = ROAD_WIDTH_M) -> VectorLayer:
    """Replace every road polyline by its ``width``-wide polygon; other features pass."""
    out = []
    for f in layer.features:
        if f.cls != ROAD or f.kind != "LineString":
            out.append(f)
            continue
        poly = buffer_polyline(f.local(frame), width / 2.0)
        if poly is None or poly.is_empty:
            continue
        parts = poly.geoms if hasattr(poly, "geoms") else [poly]
        for k, p in enumerate(parts):
            ring = np.asarray(p.exterior.coords)
            fid = f.id if len(parts) == 1 else f"{f.id}.{k}"
            out.append(from_local(fid, ROAD, "Polygon", ring, frame))
    return VectorLayer(out)


# --- rasters --------------------------------------------------------------------------

def rasterize(layer: VectorLayer, grid: Grid, frame: LocalFrame) -> Grid:
    """Cell-centre-in-polygon labelling; BUILDING wins over ROAD wins over BACKGROUND."""
    xs, ys = grid.cell_centers()
    out = np.full(grid.shape, BACKGROUND, dtype=np.int64)
    for cls in (ROAD, BUILDING):
        polys = [shapely.Polygon(f.local(frame)) for f in layer.of_class(cls)
                 if f.kind == "Polygon"]
        if not polys:
            continue
        shape = shapely.union_all(polys)
        shapely.prepare(shape)
        out[shapely.contains_xy(shape, xs, ys)] = cls
    return replace(grid, data=out, nodata=-1)


def building_footprints(dsm: Grid, dem: Grid, threshold: float = 2.5) -> Grid:
    if not dsm.same_geometry(dem):
        raise ValueError("DSM and DEM grids differ")
    with np.errstate(invalid="ignore"):
        diff = dsm.data - dem.data
        fp = np.where(np.isfinite(diff) & (diff > threshold), 1, 0)
    return replace(dsm, data=fp.astype(np.int64), nodata=-1)


def nhfd(red_edge, coastal, eps: float = 1e-6):
    """(RedEdge - Coastal) / (RedEdge + Coastal); NaN where the sum is below eps."""
    re = np.asarray(red_edge, float)
    co = np.asarray(coastal, float)
    if re.shape != co.shape:
        raise ValueError("band shapes differ")
    total = re + co
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total >= eps, (re - co) / total, np.nan)
    return out


def road_footprints(nhfd_values, quantile: float = 0.9) -> np.ndarray:
    """Cells in the top (1 - quantile) of valid NHFD values."""
    v = np.asarray(nhfd_values, float)
    valid = np.isfinite(v)
    if not valid.any():
        return np.zeros(v.shape, np.int64)
    t = np.quantile(v[valid], quantile)
    return (valid & (v >= t)).astype(np.int64)


# --- NCC registration -------------------------------------------------------------------

@dataclass(frozen=True)
class AlignmentOffset:
    dx: int            # columns, positive = east
    dy: int            # rows, positive = south (down)
    ncc_peak: float

    def as_text(self) -> str:
        return f"{self.dx} {self.dy} {self.ncc_peak!r}\n"


def shift_raster(x, dx: int, dy: int, fill=0):
    """Move raster content by +dx columns and +dy rows."""
    x = np.asarray(x)
    out = np.full_like(x, fill)
    rows, cols = x.shape
    if abs(dx) >= cols or abs(dy) >= rows:
        return out
    src = x[max(0, -dy):rows - max(0, dy), max(0, -dx):cols - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


TIE_TOL = 1e-9


def ncc_surface(feature, labels, radius: int) -> np.ndarray:
    """ZNCC of ``feature`` against ``labels`` moved by every (dx, dy) in [-r, r]^2.

    Entry [dy + r, dx + r] correlates feature[i, j] with labels[i - dy, j - dx]
    over their overlap. Undefined (zero-variance) overlaps are NaN.
    """
    f = np.asarray(feature, float)
    g = np.asarray(labels, float)
    if f.shape != g.shape:
        raise ValueError("rasters must share a grid")
    if np.ptp(f) == 0 or np.ptp(g) == 0:
        raise NoSignalError("raster has zero variance")
    f = f - f.mean()
    g = g - g.mean()
    one = np.ones_like(f)
    rows, cols = f.shape
    r = int(min(radius, rows - 1, cols - 1))

    def xc(a, b):
        full = correlate(a, b, mode="full", method="fft")
        c0, r0 = cols - 1, rows - 1
        return full[r0 - r:r0 + r + 1, c0 - r:c0 + r + 1]

    n = np.rint(xc(one, one))
    sf, sg = xc(f, one), xc(one, g)
    sff, sgg = xc(f * f, one), xc(one, g * g)
    sfg = xc(f, g)
    with np.errstate(invalid="ignore", divide="ignore"):
        vf = sff - sf * sf / n
        vg = sgg - sg * sg / n
        num = sfg - sf * sg / n
        den = np.sqrt(np.clip(vf, 0, None) * np.clip(vg, 0, None))
        scale = np.sqrt(sff * sgg)
        z = np.where(den > 1e-12 * np.maximum(scale, 1e-300), num / den, np.nan)
    out = np.full((2 * radius + 1, 2 * radius + 1), np.nan)
    out[radius - r:radius + r + 1, radius - r:radius + r + 1] = np.clip(z, -1.0, 1.0)
    return out


def ncc_align(feature, labels, search_radius: int = 40) -> AlignmentOffset:
    """Integer shift (dx, dy) that best moves ``labels`` onto ``feature``.

    ``ncc_align(shift_raster(X, dx, dy), X)`` returns (dx, dy). Near-ties
    (within 1e-9) go to the smallest shift, then to row-major order.
    """
    z = ncc_surface(feature, labels, search_radius)
    if not np.isfinite(z).any():
        raise NoSignalError("no shift has a defined correlation")
    best = np.nanmax(z)
    r = search_radius
    cand = np.argwhere(z >= best - TIE_TOL)
    dys, dxs = cand[:, 0] - r, cand[:, 1] - r
    k = np.lexsort((dxs, dys, dxs * dxs + dys * dys))[0]
    return AlignmentOffset(int(dxs[k]), int(dys[k]), float(z[cand[k][0], cand[k][1]]))


def apply_offset(label_raster: Grid, offset: AlignmentOffset) -> Grid:
    return label_raster.with_data(shift_raster(label_raster.data, offset.dx, offset.dy,
                                               fill=BACKGROUND))


# --- ground windows --------------------------------------------------------------------

@dataclass(frozen=True)
class GroundWindow:
    row: int
    col: int
    size: int
    tile: str = ""

    def slices(self):
        return slice(self.row, self.row + self.size), slice(self.col, self.col + self.size)


def sample_ground_windows(nrows: int, ncols: int, f: int = 572, count: int = 1,
                          seed: int = 0, tile: str = "") -> list[GroundWindow]:
    """Uniformly random F x F windows lying fully inside an nrows x ncols raster."""
    if f < 1 or nrows < f or ncols < f:
        raise ValueError(f"raster {nrows}x{ncols} cannot hold a {f}x{f} window")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, nrows - f + 1, count)
    cols = rng.integers(0, ncols - f + 1, count)
    return [GroundWindow(int(r), int(c), f, tile) for r, c in zip(rows, cols)]


# --- off-nadir projection ------------------------------------------------------------

@dataclass
class ProjectedPolygon:
    polygon: object            # shapely geometry in (sample, line) pixel space, clipped
    mask: np.ndarray           # (rows, cols) bool, pixel centres inside

    @property
    def empty(self) -> bool:
        return not self.mask.any()


def vertex_heights(xy, dsm: Grid, dem: Grid | None = None, inset: float = 0.25):
    """DSM height under each vertex, sampled ``inset`` cells toward the centroid.

    Footprint vertices sit on the height discontinuity at the polygon edge, so
    the sample is taken just inside. DSM gaps fall back to the DEM, then to the
    DSM minimum.
    """
    xy = np.asarray(xy, float)
    c = xy[:-1].mean(axis=0) if len(xy) > 1 else xy[0]
    d = c - xy
    norm = np.hypot(d[:, 0], d[:, 1])
    step = np.where(norm > 0, inset * dsm.cellsize / np.maximum(norm, 1e-300), 0.0)
    p = xy + d * step[:, None]
    h = dsm.sample(p[:, 0], p[:, 1])
    if dem is not None:
        h = np.where(np.isfinite(h), h, dem.sample(p[:, 0], p[:, 1]))
    if np.isnan(h).any():
        fallback = float(np.nanmin(dsm.data)) if np.isfinite(dsm.data).any() else 0.0
        h = np.where(np.isnan(h), fallback, h)
    return h


def project_polygon_offnadir(ring_lonlat, dsm: Grid, camera: BiasedCamera,
                             image_shape: tuple[int, int], frame: LocalFrame,
                             dem: Grid | None = None, heights=None) -> ProjectedPolygon:
    """Project a ground polygon into an image vertex by vertex and fill it.

    Parts outside the image are clipped away.
    """
    ring = np.asarray(ring_lonlat, float)
    x, y = frame.from_geo(ring[:, 1], ring[:, 0])
    xy = np.column_stack([x, y])
    h = vertex_heights(xy, dsm, dem) if heights is None else np.broadcast_to(
        np.asarray(heights, float), (len(xy),))
    s, l = camera.project(ring[:, 1], ring[:, 0], h, check_domain=False)
    rows, cols = image_shape
    poly = shapely.make_valid(shapely.Polygon(np.column_stack([s, l])))
    bounds = shapely.box(-0.5, -0.5, cols - 0.5, rows - 0.5)
    clipped = shapely.intersection(poly, bounds)
    mask = np.zeros((rows, cols), bool)
    if not clipped.is_empty:
        c0, r0, c1, r1 = clipped.bounds
        ca, cb = max(int(np.floor(c0)), 0), min(int(np.ceil(c1)) + 1, cols)
        ra, rb = max(int(np.floor(r0)), 0), min(int(np.ceil(r1)) + 1, rows)
        if ca < cb and ra < rb:
            ll, ss = np.mgrid[ra:rb, ca:cb]
            mask[ra:rb, ca:cb] = shapely.contains_xy(clipped, ss.astype(float),
                                                     ll.astype(float))
    return ProjectedPolygon(clipped, mask)


def offnadir_label_raster(layer: VectorLayer, dsm: Grid, camera: BiasedCamera,
                          image_shape, frame: LocalFrame, dem: Grid | None = None):
    """Per-pixel class labels of an off-nadir image (BUILDING over ROAD)."""
    out = np.full(image_shape, BACKGROUND, dtype=np.int64)
    for cls in (ROAD, BUILDING):
        for f in layer.of_class(cls):
            if f.kind != "Polygon":
                continue
            out[project_polygon_offnadir(f.coords, dsm, camera, image_shape, frame,
                                         dem).mask] = cls
    return out
