"""Tile-wise orchestration: manifest, stage DAG, per-stage runners and validation.

Every stage reads only the artifacts it declares, writes into
``<outputs.root>/<stage>/`` and finishes with a ``report.txt``. Outputs depend
only on the manifest, its inputs and its seed, so re-runs are byte-identical.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import labels as lab
from .alignment import (assess_quality, build_graph, bundle_adjust, read_tiepoints,
                        reprojection_stats)
from .dsm import (FusionConfig, ViewMeta, boundary_stats, disparity_to_cloud, fuse_clouds,
                  merge_tiles, pair_candidate, read_disparity, select_pairs)
from .errors import DependencyError, ValidationError
from .fusion import (FusionWeights, GroundTruthWindow, Strategy, ToyPredictor, TrainConfig,
                     Variant, ViewStack, WindowSample, fuse, iou, majority_vote, train)
from .grid import Extent, Grid, LocalFrame, empty_grid, paste
from .io import read_ascii_grid, read_kv, write_ascii_grid, write_kv
from .ortho import VISIBLE, ImagePatch, OrthoConfig, mosaic_ortho, true_orthorectify
from .rpc import (BiasedCamera, Tile, image_footprint, partition_aoi, read_biases, read_rpc,
                  write_biases)
from .schedsim import Mode, WorkPlan, fleet, simulate, write_timeline

log = logging.getLogger(__name__)

STAGES = ("partition", "align", "dsm", "ortho", "labels", "windows", "fuse-train", "vote",
          "schedule-sim")


# --- manifest ---------------------------------------------------------------------------

# name: (type, lower, upper); bounds are inclusive, None means unbounded
PARAM_BOUNDS = {
    "resolution": (float, 0.05, 10.0),
    "h_step": (float, 0.01, 10.0),
    "gamma": (float, 0.01, 100.0),
    "y_top": (int, 1, 1000),
    "median_window": (int, 1, 31),
    "hole_radius": (int, 0, 1000),
    "lambda_reg": (float, 1e-9, 1e6),
    "ncc_radius": (int, 1, 1000),
    "window_size": (int, 4, 4096),
    "windows_per_tile": (int, 1, 10000),
    "subset_size": (int, 1, 64),
    "alpha": (float, 0.0, 100.0),
    "beta": (float, 0.0, 100.0),
    "epochs": (int, 1, 100000),
    "lr": (float, 1e-9, 100.0),
    "sv_lr_scale": (float, 0.0, 1.0),
    "min_pairs": (int, 1, 100000),
    "max_pairs": (int, 1, 100000),
    "seed": (int, 0, 2**32 - 1),
}


@dataclass(frozen=True)
class Params:
    resolution: float = 0.5
    h_step: float = 0.5
    gamma: float = 1.0
    interp: str = "nearest"
    y_top: int = 3
    median_window: int = 3
    hole_radius: int = 11
    lambda_reg: float = 1e-2
    ncc_radius: int = 40
    window_size: int = 572
    windows_per_tile: int = 1
    subset_size: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 30
    lr: float = 0.5
    sv_lr_scale: float = 0.1
    variant: str = "B"
    min_pairs: int = 40
    max_pairs: int = 80
    seed: int = 0

    @classmethod
    def from_section(cls, section) -> "Params":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(section) - known)
        if unknown:
            raise ValidationError(f"unknown parameter(s): {', '.join(unknown)}")
        kw = {}
        for name, raw in section.items():
            if name in PARAM_BOUNDS:
                typ, lo, hi = PARAM_BOUNDS[name]
                try:
                    v = typ(raw) if typ is float else int(raw)
                except ValueError:
                    raise ValidationError(f"parameter {name} = {raw!r} is not {typ.__name__}") \
                        from None
                if lo is not None and v < lo:
                    raise ValidationError(f"parameter {name} = {v} is below the minimum {lo}")
                if hi is not None and v > hi:
                    raise ValidationError(f"parameter {name} = {v} exceeds the maximum {hi}")
                kw[name] = v
            else:
                kw[name] = raw.strip()
        p = cls(**kw)
        if p.interp not in ("nearest", "bilinear"):
            raise ValidationError(f"parameter interp = {p.interp!r} must be nearest or bilinear")
        if p.variant not in ("A", "B"):
            raise ValidationError(f"parameter variant = {p.variant!r} must be A or B")
        if p.median_window % 2 == 0:
            raise ValidationError(f"parameter median_window = {p.median_window} must be odd")
        if p.max_pairs < p.min_pairs:
            raise ValidationError(f"parameter max_pairs = {p.max_pairs} is below the minimum "
                                  f"min_pairs = {p.min_pairs}")
        return p


@dataclass
class Manifest:
    path: Path
    config: configparser.ConfigParser
    params: Params
    workers: int = 1
    overrides: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, seed: int | None = None, workers: int | None = None,
             params: dict | None = None) -> "Manifest":
        """Read a manifest; ``seed``, ``workers`` and ``params`` override its values."""
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"manifest not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        for sec in ("aoi", "frame", "tiles", "inputs", "outputs"):
            if not cp.has_section(sec):
                raise ValidationError(f"manifest lacks section [{sec}]")
        section = dict(cp["params"]) if cp.has_section("params") else {}
        overrides = {}
        for k, v in (params or {}).items():
            if v is not None:
                section[k] = str(v)
                overrides[k] = v
        if seed is not None:
            section["seed"] = str(seed)
            overrides["seed"] = seed
        if workers is not None:
            if workers < 1:
                raise ValidationError(f"workers = {workers} is below the minimum 1")
            overrides["workers"] = workers
        return cls(path, cp, Params.from_section(section), workers or 1, overrides)

    @property
    def base(self) -> Path:
        return self.path.parent

    @property
    def out_root(self) -> Path:
        return self.base / self.config["outputs"].get("root", "out")

    def stage_dir(self, stage: str) -> Path:
        return self.out_root / stage

    def input(self, key: str) -> Path:
        if key not in self.config["inputs"]:
            raise ValidationError(f"manifest [inputs] lacks '{key}'")
        return self.base / self.config["inputs"][key]

    def require_input(self, key: str) -> Path:
        p = self.input(key)
        if not p.exists():
            raise ValidationError(f"input '{key}' not found: {p}")
        return p

    @property
    def frame(self) -> LocalFrame:
        f = self.config["frame"]
        return LocalFrame(float(f["lat0"]), float(f["lon0"]))

    @property
    def aoi(self) -> Extent:
        a = self.config["aoi"]
        return Extent(float(a["xmin"]), float(a["ymin"]), float(a["xmax"]), float(a["ymax"]))

    @property
    def images(self) -> list[str]:
        return [s.strip() for s in self.config["inputs"]["images"].split(",") if s.strip()]

    def plan(self) -> tuple[WorkPlan, list]:
        if not self.config.has_section("schedule"):
            raise ValidationError("manifest lacks section [schedule]")
        s = self.config["schedule"]
        plan = WorkPlan(int(s["tiles"]), int(s["pairs_per_tile"]), float(s["pair_minutes"]),
                        float(s["fusion_minutes"]), float(s.get("failure_prob", "0")),
                        self.params.seed)
        return plan, fleet(int(s.get("n_large", "0")), int(s.get("n_small", "0")))

    def write_resolved(self) -> None:
        """Record the effective manifest (overrides included) next to the outputs."""
        cp = configparser.ConfigParser()
        cp.read_dict(self.config)
        cp["params"] = {f.name: str(getattr(self.params, f.name)) for f in fields(Params)}
        if self.overrides:
            cp["overrides"] = {k: str(v) for k, v in sorted(self.overrides.items())}
        self.out_root.mkdir(parents=True, exist_ok=True)
        with open(self.out_root / "manifest.resolved.ini", "w") as fh:
            cp.write(fh)


# --- stage bookkeeping ------------------------------------------------------------------

# artifacts each stage declares as its inputs, by producing stage
REQUIRES = {
    "partition": [],
    "align": [],
    "dsm": [("partition", "tiles.csv"), ("align", "biases.csv")],
    "ortho": [("partition", "tiles.csv"), ("align", "biases.csv"), ("dsm", "dsm.asc")],
    "labels": [("partition", "tiles.csv"), ("dsm", "dsm.asc"), ("ortho", "mosaic.txt")],
    "windows": [("partition", "tiles.csv"), ("labels", "labels.asc")],
    "fuse-train": [("ortho", "mosaic.txt"), ("labels", "labels.asc"),
                   ("windows", "windows.csv")],
    "vote": [("ortho", "mosaic.txt"), ("fuse-train", "model.txt")],
    "schedule-sim": [],
}


def check_dependencies(m: Manifest, stage: str) -> None:
    for upstream, name in REQUIRES[stage]:
        p = m.stage_dir(upstream) / name
        if not p.exists():
            raise DependencyError(upstream, str(p.relative_to(m.base)))


def _map(m: Manifest, fn, items):
    items = list(items)
    if m.workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=m.workers) as ex:
        return list(ex.map(fn, items))


def _write_tiles(path, tiles) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "row", "col", "core_xmin", "core_ymin", "core_xmax", "core_ymax",
                    "pad_xmin", "pad_ymin", "pad_xmax", "pad_ymax"])
        for t in tiles:
            w.writerow([t.name, t.row, t.col] + [repr(float(v)) for v in
                       (t.core.xmin, t.core.ymin, t.core.xmax, t.core.ymax,
                        t.padded.xmin, t.padded.ymin, t.padded.xmax, t.padded.ymax)])


def read_tiles(path) -> list[Tile]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            core = Extent(*(float(r[f"core_{k}"]) for k in ("xmin", "ymin", "xmax", "ymax")))
            pad = Extent(*(float(r[f"pad_{k}"]) for k in ("xmin", "ymin", "xmax", "ymax")))
            out.append(Tile(int(r["row"]), int(r["col"]), core, pad))
    return out


def read_views(path) -> dict[str, tuple[ViewMeta, tuple[int, int]]]:
    out = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            meta = ViewMeta(r["image_id"], float(r["off_nadir"]), float(r["azimuth"]),
                            float(r["sun_elevation"]), float(r["sun_azimuth"]),
                            float(r["acquired"]))
            out[meta.image_id] = (meta, (int(r["rows"]), int(r["cols"])))
    return out


def _cameras(m: Manifest, biases=None) -> dict[str, BiasedCamera]:
    rpc_dir = m.require_input("rpc_dir")
    cams = {}
    for iid in m.images:
        p = rpc_dir / f"{iid}.rpc"
        if not p.exists():
            raise ValidationError(f"RPC file for {iid} not found: {p}")
        rpc = read_rpc(p, iid)
        b = None if biases is None else biases.get(iid)
        if biases is not None and b is None:
            raise ValidationError(f"no bias estimate for {iid}")
        cams[iid] = BiasedCamera(rpc, b) if b is not None else BiasedCamera(rpc)
    return cams


def _tiles(m: Manifest) -> list[Tile]:
    return read_tiles(m.stage_dir("partition") / "tiles.csv")


def _dem(m: Manifest) -> Grid:
    return read_ascii_grid(m.require_input("dem"), frame=m.frame)


def _biases(m: Manifest):
    return read_biases(m.stage_dir("align") / "biases.csv")


# --- stages -------------------------------------------------------------------------------

def stage_partition(m: Manifest) -> dict:
    t = m.config["tiles"]
    tiles = partition_aoi(m.aoi, float(t["core"]), float(t["margin"]))
    d = m.stage_dir("partition")
    d.mkdir(parents=True, exist_ok=True)
    _write_tiles(d / "tiles.csv", tiles)
    return {"tiles": len(tiles), "rows": 1 + max(x.row for x in tiles),
            "cols": 1 + max(x.col for x in tiles)}


def stage_align(m: Manifest) -> dict:
    obs = read_tiepoints(m.require_input("tiepoints"))
    cams = _cameras(m)
    ids = m.images
    quality = assess_quality(build_graph(obs), len(ids))
    sol = bundle_adjust([cams[i].camera for i in ids], obs, lambda_reg=m.params.lambda_reg)
    d = m.stage_dir("align")
    d.mkdir(parents=True, exist_ok=True)
    write_biases(d / "biases.csv", sol.biases)
    report = {f"quality.{k}": v for k, v in quality.as_dict().items()}
    report.update(sol.as_dict())
    return report


def _tile_dsm(m: Manifest, tile: Tile, cams, pairs, dem: Grid, disparity_dir: Path,
              cfg: FusionConfig):
    h0 = float(np.nanmean(dem.crop(tile.padded).data))
    clouds, dropped = [], 0
    for pair_id, a, b in pairs:
        disp = _load_disparity(disparity_dir, pair_id)
        box = image_footprint(cams[a], tile, dem, m.frame, margin=2, unclipped=True)
        sa, la = disp.source_a()
        mask = ((sa >= box.col0) & (sa < box.col1) & (la >= box.row0) & (la < box.row1))
        c = disparity_to_cloud(disp, cams[a], cams[b], h_init=h0, mask=mask, max_residual=1.0)
        clouds.append(c)
        dropped += c.dropped
    return fuse_clouds(clouds, cfg, tile, m.frame), dropped


_DISP_CACHE: dict = {}


def _load_disparity(disparity_dir: Path, pair_id: str):
    key = (str(disparity_dir), pair_id)
    if key not in _DISP_CACHE:
        _DISP_CACHE.clear() if len(_DISP_CACHE) > 64 else None
        _DISP_CACHE[key] = read_disparity(disparity_dir / f"{pair_id}.disp")
    return _DISP_CACHE[key]


def stage_dsm(m: Manifest) -> dict:
    p = m.params
    tiles = _tiles(m)
    cams = _cameras(m, _biases(m))
    views = read_views(m.require_input("views"))
    disparity_dir = m.require_input("disparity_dir")
    dem = _dem(m)
    ids = [i for i in m.images if i in views]
    cands = [pair_candidate(views[a][0], views[b][0])
             for k, a in enumerate(ids) for b in ids[k + 1:]]
    sel = select_pairs(cands, p.min_pairs, p.max_pairs)
    pairs = []
    for c in sel.pairs:
        if (disparity_dir / f"{c.id}.disp").exists():
            pairs.append((c.id, c.a, c.b))
        else:
            log.warning("no disparity map for pair %s; skipped", c.id)
    if not pairs:
        raise ValidationError("no selected pair has a disparity map")
    # read once up front so worker threads only hit the cache
    _DISP_CACHE.clear()
    for pid, _, _ in pairs:
        _load_disparity(disparity_dir, pid)
    cfg = FusionConfig(p.y_top, p.median_window, p.hole_radius, p.resolution)
    results = _map(m, lambda t: _tile_dsm(m, t, cams, pairs, dem, disparity_dir, cfg), tiles)
    _DISP_CACHE.clear()

    d = m.stage_dir("dsm")
    (d / "tiles").mkdir(parents=True, exist_ok=True)
    tile_dsms = []
    for t, (g, _) in zip(tiles, results):
        write_ascii_grid(d / "tiles" / f"{t.name}.asc", g)
        tile_dsms.append((t, g))
    with open(d / "pairs.txt", "w") as fh:
        fh.writelines(f"{pid}\n" for pid, _, _ in pairs)
    merged = merge_tiles(tile_dsms)
    write_ascii_grid(d / "dsm.asc", merged)
    report = {"pairs": len(pairs), "pairs_relaxed": sel.relaxed,
              "pairs_under_minimum": sel.under_minimum,
              "points_dropped": sum(r[1] for r in results),
              "nodata_cells": int(np.count_nonzero(~np.isfinite(merged.data)))}
    if len(tile_dsms) > 1:
        report.update({f"boundary.{k}": v for k, v in boundary_stats(tile_dsms).as_dict().items()})
    return report


def _tile_dsm_grids(m: Manifest, tiles):
    d = m.stage_dir("dsm") / "tiles"
    out = []
    for t in tiles:
        p = d / f"{t.name}.asc"
        if not p.exists():
            raise DependencyError("dsm", str(p.relative_to(m.base)))
        out.append((t, read_ascii_grid(p, frame=m.frame)))
    return out


def _load_image(m: Manifest, iid: str) -> np.ndarray:
    p = m.require_input("image_dir") / f"{iid}.npy"
    if not p.exists():
        raise ValidationError(f"image {iid} not found: {p}")
    return np.load(p)


def stage_ortho(m: Manifest) -> dict:
    p = m.params
    tiles = _tiles(m)
    cams = _cameras(m, _biases(m))
    dem = _dem(m)
    tile_dsms = _tile_dsm_grids(m, tiles)
    cfg = OrthoConfig(p.resolution, p.h_step, p.gamma, p.interp)
    d = m.stage_dir("ortho")
    d.mkdir(parents=True, exist_ok=True)
    report = {}
    for iid in m.images:
        img = _load_image(m, iid)
        cam = cams[iid]

        def one(td, img=img, cam=cam):
            tile, dsm = td
            box = image_footprint(cam, tile, dem, m.frame, margin=4, image_shape=img.shape[1:])
            if box is None:
                patch = ImagePatch(np.zeros((img.shape[0], 1, 1)), -10**9, -10**9)
            else:
                patch = ImagePatch(img[:, box.row0:box.row1, box.col0:box.col1],
                                   box.col0, box.row0)
            return tile, true_orthorectify(patch, cam, dsm, dem.crop(tile.padded), cfg, m.frame)

        res = mosaic_ortho(_map(m, one, tile_dsms))
        for k, band in enumerate(res.bands):
            write_ascii_grid(d / f"{iid}_b{k}.asc", band)
        write_ascii_grid(d / f"{iid}_mask.asc", res.mask, fmt="%d")
        n = res.mask.data.size
        report[f"{iid}.visible_fraction"] = float(np.count_nonzero(res.mask.data == VISIBLE) / n)
        report[f"{iid}.occluded_cells"] = res.n_occluded
        report[f"{iid}.dem_clamped"] = res.clamped
    (d / "mosaic.txt").write_text("".join(f"{i}\n" for i in m.images))
    return report


@dataclass
class OrthoStack:
    bands: np.ndarray       # (M, B, H, W), NaN where not visible
    visible: np.ndarray     # (M, H, W)
    grid: Grid


def load_ortho(m: Manifest) -> OrthoStack:
    d = m.stage_dir("ortho")
    ids = [s for s in (d / "mosaic.txt").read_text().split() if s]
    bands, vis, grid = [], [], None
    for iid in ids:
        mask = read_ascii_grid(d / f"{iid}_mask.asc", frame=m.frame)
        grid = mask
        vis.append(mask.data == VISIBLE)
        k, bs = 0, []
        while (d / f"{iid}_b{k}.asc").exists():
            bs.append(read_ascii_grid(d / f"{iid}_b{k}.asc").data)
            k += 1
        bands.append(np.stack(bs))
    return OrthoStack(np.stack(bands), np.stack(vis), grid)


def _mean_visible(bands, visible):
    w = visible.astype(float)[:, None]
    num = np.nansum(np.where(visible[:, None], bands, 0.0) * w, axis=0)
    den = w.sum(axis=0)
    with np.errstate(invalid="ignore"):
        return np.where(den > 0, num / np.maximum(den, 1), np.nan)


def stage_labels(m: Manifest) -> dict:
    p = m.params
    tiles = _tiles(m)
    frame = m.frame
    dsm = read_ascii_grid(m.stage_dir("dsm") / "dsm.asc", frame=frame)
    dem = _dem(m)
    ortho = load_ortho(m)
    mean = _mean_visible(ortho.bands, ortho.visible)
    feature_nhfd = ortho.grid.with_data(lab.nhfd(mean[1], mean[0]))
    layer = lab.buffer_roads(lab.read_geojson(m.require_input("osm")), frame)
    out = empty_grid(ortho.grid.extent, ortho.grid.cellsize, fill=lab.BACKGROUND, frame=frame,
                     dtype=np.int64)
    report = {}
    aoi = ortho.grid.extent
    for t in tiles:
        ext = t.padded.intersection(aoi)
        sub = empty_grid(ext, ortho.grid.cellsize, frame=frame)
        raster = lab.rasterize(layer, sub, frame).data
        feats = {lab.BUILDING: lab.building_footprints(dsm.crop(ext), _regrid(dem, sub)).data,
                 lab.ROAD: lab.road_footprints(feature_nhfd.crop(ext).data)}
        aligned = np.full(sub.shape, lab.BACKGROUND, np.int64)
        offsets = {}
        for cls in (lab.ROAD, lab.BUILDING):
            target = (raster == cls).astype(float)
            try:
                off = lab.ncc_align(feats[cls], target, p.ncc_radius)
            except lab.NoSignalError:
                off = lab.AlignmentOffset(0, 0, float("nan"))
            offsets[cls] = off
            aligned[lab.shift_raster(target, off.dx, off.dy) > 0.5] = cls
        for cls, off in offsets.items():
            name = lab.CLASS_NAMES[cls]
            report[f"{t.name}.{name}.dx"] = off.dx
            report[f"{t.name}.{name}.dy"] = off.dy
            report[f"{t.name}.{name}.ncc"] = off.ncc_peak
        paste(out, sub.with_data(aligned), t.core)
    d = m.stage_dir("labels")
    d.mkdir(parents=True, exist_ok=True)
    write_ascii_grid(d / "labels.asc", out, fmt="%d")
    for cls, name in lab.CLASS_NAMES.items():
        report[f"fraction.{name}"] = float(np.count_nonzero(out.data == cls) / out.data.size)
    return report


def _regrid(src: Grid, like: Grid) -> Grid:
    xs, ys = like.cell_centers()
    return like.with_data(src.sample(xs, ys))


def stage_windows(m: Manifest) -> dict:
    p = m.params
    tiles = _tiles(m)
    grid = read_ascii_grid(m.stage_dir("labels") / "labels.asc", frame=m.frame)
    rows = []
    for k, t in enumerate(tiles):
        r0, c0 = grid.cell_index(t.core.xmin + 0.5 * grid.cellsize,
                                 t.core.ymax - 0.5 * grid.cellsize)
        nr = int(round(t.core.height / grid.cellsize))
        nc = int(round(t.core.width / grid.cellsize))
        if nr < p.window_size or nc < p.window_size:
            raise ValidationError(f"parameter window_size = {p.window_size} exceeds the maximum "
                                  f"{min(nr, nc)} for tile {t.name}")
        for j, w in enumerate(lab.sample_ground_windows(nr, nc, p.window_size,
                                                        p.windows_per_tile, p.seed + k, t.name)):
            split = "val" if j == p.windows_per_tile - 1 and p.windows_per_tile > 1 else "train"
            rows.append((t.name, int(r0) + w.row, int(c0) + w.col, w.size, split))
    d = m.stage_dir("windows")
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "windows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile", "row", "col", "size", "split"])
        w.writerows(rows)
    return {"windows": len(rows), "train": sum(r[4] == "train" for r in rows),
            "val": sum(r[4] == "val" for r in rows), "size": p.window_size}


def _samples(ortho: OrthoStack, labels: np.ndarray, windows):
    out = []
    for r, c, f in windows:
        sl = (slice(r, r + f), slice(c, c + f))
        feats = np.nan_to_num(ortho.bands[:, :, sl[0], sl[1]], nan=0.0)
        masks = ~ortho.visible[:, sl[0], sl[1]]
        present = (~masks).any(axis=(1, 2))
        out.append(WindowSample(feats, present, GroundTruthWindow(labels[sl], masks)))
    return out


def write_model(path, pred: ToyPredictor, fw: FusionWeights, extra: dict | None = None) -> None:
    items = dict(extra or {})
    for k, v in pred.params().items():
        items[f"predictor.{k}.shape"] = " ".join(map(str, v.shape))
        items[f"predictor.{k}"] = " ".join(repr(float(x)) for x in v.ravel())
    items["fusion.variant"] = "A" if fw.variant is Variant.MV_A else "B"
    items["fusion.weights.shape"] = " ".join(map(str, fw.weights.shape))
    items["fusion.weights"] = " ".join(repr(float(x)) for x in fw.weights.ravel())
    items["fusion.bias"] = " ".join(repr(float(x)) for x in fw.bias.ravel())
    write_kv(path, items)


def read_model(path) -> tuple[ToyPredictor, FusionWeights]:
    kv = read_kv(path)

    def arr(key):
        shape = tuple(int(s) for s in kv[f"{key}.shape"].split())
        return np.array([float(x) for x in kv[key].split()]).reshape(shape)

    pred = ToyPredictor(*(arr(f"predictor.{k}") for k in ("W1", "b1", "W2", "b2")))
    variant = Variant.MV_A if kv["fusion.variant"] == "A" else Variant.MV_B
    bias = np.array([float(x) for x in kv["fusion.bias"].split()])
    return pred, FusionWeights(variant, arr("fusion.weights"), bias)


def stage_fuse_train(m: Manifest) -> dict:
    p = m.params
    ortho = load_ortho(m)
    labels = read_ascii_grid(m.stage_dir("labels") / "labels.asc").data.astype(np.int64)
    tr, va = [], []
    with open(m.stage_dir("windows") / "windows.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            (va if r["split"] == "val" else tr).append((int(r["row"]), int(r["col"]),
                                                        int(r["size"])))
    if not tr:
        raise ValidationError("no training windows")
    train_set = _samples(ortho, labels, tr)
    val_set = _samples(ortho, labels, va) or train_set
    variant = Variant.MV_A if p.variant == "A" else Variant.MV_B
    cfg = TrainConfig(p.epochs, p.lr, p.sv_lr_scale, p.subset_size, p.alpha, p.beta, variant,
                      seed=p.seed)
    res = train(Strategy.MV_TRAIN_II, train_set, val_set, cfg)
    d = m.stage_dir("fuse-train")
    d.mkdir(parents=True, exist_ok=True)
    write_model(d / "model.txt", res.predictor, res.fusion,
                {"views": ",".join((m.stage_dir("ortho") / "mosaic.txt").read_text().split())})
    with open(d / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_iou"])
        for e, h in enumerate(res.history):
            w.writerow([e, repr(h.train_loss), repr(h.val_loss), repr(h.val_iou)])
    last = res.history[res.e_min_val]
    return {"strategy": Strategy.MV_TRAIN_II.value, "variant": p.variant,
            "epochs": p.epochs, "e_min_val": res.e_min_val, "e_min_train": res.e_min_train,
            "train_loss": last.train_loss, "val_loss": last.val_loss, "val_iou": last.val_iou,
            "train_windows": len(train_set), "val_windows": len(va)}


def stage_vote(m: Manifest) -> dict:
    ortho = load_ortho(m)
    pred, fw = read_model(m.stage_dir("fuse-train") / "model.txt")
    feats = np.nan_to_num(ortho.bands, nan=0.0)
    scores = np.stack([pred.forward(f)[0] for f in feats])
    maps = np.argmax(scores, axis=1)
    voted, unobserved = majority_vote(maps, ortho.visible)
    fused_scores, _ = fuse(ViewStack(scores, np.ones(len(scores), bool)), fw)
    fused = np.argmax(fused_scores, axis=0)
    d = m.stage_dir("vote")
    d.mkdir(parents=True, exist_ok=True)
    write_ascii_grid(d / "vote.asc", ortho.grid.with_data(voted), fmt="%d")
    write_ascii_grid(d / "fused.asc", ortho.grid.with_data(fused), fmt="%d")
    report = {"unobserved_cells": int(np.count_nonzero(unobserved))}
    truth_path = m.input("truth") if "truth" in m.config["inputs"] else None
    if truth_path is not None and truth_path.exists():
        truth = read_ascii_grid(truth_path).data.astype(np.int64)
        for key, labels in (("vote", voted), ("fused", fused)):
            for cls, v in iou(labels, truth, classes=(1, 2)).items():
                report[f"iou.{key}.{lab.CLASS_NAMES[cls]}"] = v
    return report


def stage_schedule(m: Manifest) -> dict:
    plan, vms = m.plan()
    d = m.stage_dir("schedule-sim")
    d.mkdir(parents=True, exist_ok=True)
    report = {}
    for mode in (Mode.BARRIER, Mode.PIPELINED):
        tl = simulate(vms, plan, mode)
        write_timeline(d / f"timeline_{mode.value}.csv", tl)
        report[f"makespan.{mode.value}"] = tl.makespan
    report["saving"] = report["makespan.barrier"] - report["makespan.pipelined"]
    return report


RUNNERS = {"partition": stage_partition, "align": stage_align, "dsm": stage_dsm,
           "ortho": stage_ortho, "labels": stage_labels, "windows": stage_windows,
           "fuse-train": stage_fuse_train, "vote": stage_vote, "schedule-sim": stage_schedule}


def run_stage(m: Manifest, stage: str) -> dict:
    if stage not in RUNNERS:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    check_dependencies(m, stage)
    m.write_resolved()
    log.info("stage %s", stage)
    report = RUNNERS[stage](m)
    m.stage_dir(stage).mkdir(parents=True, exist_ok=True)
    write_kv(m.stage_dir(stage) / "report.txt", {"stage": stage, **report})
    return report


def run_all(m: Manifest, stages=STAGES) -> dict[str, dict]:
    return {s: run_stage(m, s) for s in stages}


# --- validation -------------------------------------------------------------------------

@dataclass(frozen=True)
class Thresholds:
    max_reprojection_px: float = 0.5
    max_boundary_median_abs_m: float = 0.5
    min_visible_fraction: float = 0.5
    min_iou: float = 0.95


@dataclass
class Check:
    name: str
    value: float
    passed: bool


def _fusion_slot_check(m: Manifest, rng: np.random.Generator) -> tuple[float, bool]:
    """Permuting view slots together with their fusion weights leaves the output unchanged."""
    pred, fw = read_model(m.stage_dir("fuse-train") / "model.txt")
    ortho = load_ortho(m)
    f = min(16, ortho.grid.nrows, ortho.grid.ncols)
    feats = np.nan_to_num(ortho.bands[:, :, :f, :f], nan=0.0)
    scores = np.stack([pred.forward(x)[0] for x in feats])
    present = np.ones(len(scores), bool)
    base, _ = fuse(ViewStack(scores, present), fw)
    perm = rng.permutation(len(scores))
    fw2 = FusionWeights(fw.variant, fw.weights[perm], fw.bias)
    moved, _ = fuse(ViewStack(scores[perm], present), fw2)
    err = float(np.max(np.abs(moved - base)))
    return err, err <= 1e-9 * max(1.0, float(np.max(np.abs(base))))


def validate_report(m: Manifest,
                    thresholds: Thresholds = Thresholds()) -> tuple[list[Check], bool]:
    """Collect the acceptance checks over whatever stages have run."""
    checks: list[Check] = []
    align = m.stage_dir("align") / "biases.csv"
    if align.exists():
        cams = _cameras(m, _biases(m))
        stats = reprojection_stats([cams[i] for i in m.images],
                                   read_tiepoints(m.require_input("tiepoints")))
        checks.append(Check("reprojection_mean_px", stats.mean,
                            stats.mean <= thresholds.max_reprojection_px))
    if (m.stage_dir("partition") / "tiles.csv").exists() and \
            (m.stage_dir("dsm") / "tiles").is_dir():
        tiles = _tiles(m)
        if len(tiles) > 1:
            bs = boundary_stats(_tile_dsm_grids(m, tiles))
            checks.append(Check("boundary_median_abs_m", bs.median_abs_z,
                                bs.median_abs_z < thresholds.max_boundary_median_abs_m))
    if (m.stage_dir("ortho") / "mosaic.txt").exists():
        ortho = load_ortho(m)
        for iid, v in zip(m.images, ortho.visible):
            frac = float(np.mean(v))
            checks.append(Check(f"visible_fraction.{iid}", frac,
                                frac >= thresholds.min_visible_fraction))
    vote = m.stage_dir("vote") / "report.txt"
    if vote.exists():
        kv = read_kv(vote)
        for k in sorted(kv):
            if k.startswith("iou.vote."):
                v = float(kv[k])
                checks.append(Check(k, v, not math.isnan(v) and v >= thresholds.min_iou))
    if (m.stage_dir("fuse-train") / "model.txt").exists() and \
            (m.stage_dir("ortho") / "mosaic.txt").exists():
        err, ok = _fusion_slot_check(m, np.random.default_rng(m.params.seed))
        checks.append(Check("fusion_slot_permutation", err, ok))
    ok = all(c.passed for c in checks)
    d = m.out_root / "validate"
    d.mkdir(parents=True, exist_ok=True)
    items = {}
    for c in checks:
        items[f"{c.name}.value"] = c.value
        items[f"{c.name}.pass"] = c.passed
    items["all_passed"] = ok
    write_kv(d / "summary.txt", items)
    return checks, ok
