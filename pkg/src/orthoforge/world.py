"""Generator for the end-to-end synthetic world: terrain, boxes, roads, views,
tie points, disparity maps, a shifted OSM layer and the truth label raster.

Everything lands in one directory together with a manifest the pipeline can
run from.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import labels as lab
from .alignment import TieObservation, gauge_basis, remove_gauge, write_tiepoints
from .dsm import ViewMeta, rectify_affine, write_disparity
from .grid import Extent, LocalFrame, empty_grid
from .io import write_ascii_grid
from .rpc import BiasCorrection, write_rpc
from .synthetic import (BUILDING, Box, BoxScene, render_disparity, render_image,
                        view_over)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    lat0: float = 40.0
    lon0: float = -86.0
    aoi: tuple = (0.0, 0.0, 300.0, 300.0)
    tile_core: float = 100.0
    tile_margin: float = 30.0
    gsd: float = 1.0
    n_views: int = 5
    off_nadir: tuple = (12.0, 24.0)
    bias_px: float = 3.0
    tie_tracks: int = 300
    tie_noise: float = 0.1
    image_noise: float = 0.01
    osm_shift: tuple = (3.0, 2.0)         # metres east, north
    terrain: tuple = (5.0, 0.01, -0.005)  # z0, gx, gy
    road_spacing: float = 100.0


def build_scene(cfg: WorldConfig, rng: np.random.Generator) -> BoxScene:
    """Axis-aligned roads every ``road_spacing`` m and grid-aligned boxes between them."""
    x0, y0, x1, y1 = cfg.aoi
    m = cfg.tile_margin
    z0, gx, gy = cfg.terrain
    roads = []
    off = cfg.road_spacing / 2.0
    for k in range(int((x1 - x0) // cfg.road_spacing)):
        c = float(round(x0 + off + k * cfg.road_spacing))
        roads.append([(c, y0 - m), (c, y1 + m)])
    for k in range(int((y1 - y0) // cfg.road_spacing)):
        c = float(round(y0 + off + k * cfg.road_spacing))
        roads.append([(x0 - m, c), (x1 + m, c)])
    scene = BoxScene([], z0, gx, gy, roads)
    boxes = []
    step = cfg.road_spacing / 2.0
    for bx in np.arange(x0, x1, step):
        for by in np.arange(y0, y1, step):
            # one box per quadrant between roads, clear of the 8 m road band
            w, h = rng.integers(12, 24, 2)
            cx = bx + (step - w) / 2.0 + rng.integers(-5, 6)
            cy = by + (step - h) / 2.0 + rng.integers(-5, 6)
            xa, ya = float(np.floor(cx)), float(np.floor(cy))
            base = max(scene.ground(xa, ya), scene.ground(xa + w, ya + h),
                       scene.ground(xa, ya + h), scene.ground(xa + w, ya))
            boxes.append(Box(xa, ya, xa + float(w), ya + float(h),
                             float(np.round(base + rng.uniform(8.0, 20.0), 2))))
    scene.boxes = boxes
    return scene


def truth_labels(scene: BoxScene, grid):
    xs, ys = grid.cell_centers()
    cls = scene.classify_ground(xs, ys)
    cls[scene.box_index(xs, ys) >= 0] = BUILDING
    return grid.with_data(cls)


def generate_world(out_dir, cfg: WorldConfig = WorldConfig()) -> Path:
    """Write the fixture and return the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "rpc", "disparity"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    frame = LocalFrame(cfg.lat0, cfg.lon0)
    aoi = Extent(*cfg.aoi)
    scene = build_scene(cfg, rng)
    padded = aoi.buffer(cfg.tile_margin)
    max_h = float(math.ceil(max(b.top for b in scene.boxes) + 5.0))

    # views with biases free of the translation gauge
    n = cfg.n_views
    azimuths = (np.arange(n) * 360.0 / n + rng.uniform(-10, 10, n)) % 360.0
    off_nadir = rng.uniform(*cfg.off_nadir, n)
    ids = [f"img{i:02d}" for i in range(n)]
    plain = [view_over(ids[i], frame, padded, cfg.gsd, off_nadir[i], azimuths[i],
                       max_height=max_h) for i in range(n)]
    b = rng.normal(0.0, 1.0, (n, 2))
    cx, cy = 0.5 * (aoi.xmin + aoi.xmax), 0.5 * (aoi.ymin + aoi.ymax)
    clat, clon = (float(v) for v in frame.to_geo(cx, cy))
    href = float(scene.ground(cx, cy))
    b = remove_gauge(b - b.mean(axis=0), gauge_basis([v.camera() for v in plain], clat, clon,
                                                     href))
    b *= cfg.bias_px / np.mean(np.hypot(b[:, 0], b[:, 1]))
    views = [view_over(ids[i], frame, padded, cfg.gsd, off_nadir[i], azimuths[i],
                       bias=BiasCorrection(*map(float, b[i])), max_height=max_h)
             for i in range(n)]

    with open(out / "views.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "off_nadir", "azimuth", "sun_elevation", "sun_azimuth",
                    "acquired", "rows", "cols"])
        for i, v in enumerate(views):
            meta = ViewMeta(v.image_id, float(off_nadir[i]), float(azimuths[i]),
                            float(round(55.0 + rng.uniform(-5, 5), 3)),
                            float(round(150.0 + rng.uniform(-10, 10), 3)),
                            float(round(30.0 * i + rng.uniform(0, 5), 3)))
            w.writerow([meta.image_id, repr(meta.off_nadir), repr(meta.azimuth),
                        repr(meta.sun_elevation), repr(meta.sun_azimuth),
                        repr(meta.acquired), v.shape[0], v.shape[1]])
    with open(out / "truth_biases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "d_sample", "d_line"])
        for v in views:
            w.writerow([v.image_id, repr(v.bias.d_sample), repr(v.bias.d_line)])

    for v in views:
        write_rpc(out / "rpc" / f"{v.image_id}.rpc", v.rpc())
        img = render_image(scene, v, cfg.image_noise, np.random.default_rng(
            [cfg.seed, int(v.image_id[3:])]))
        np.save(out / "images" / f"{v.image_id}.npy", np.clip(img, 0.0, None))

    # tie points on visible surface points, three views per track
    cams = [v.camera() for v in views]
    obs = []
    t = 0
    while t < cfg.tie_tracks:
        x = rng.uniform(aoi.xmin, aoi.xmax)
        y = rng.uniform(aoi.ymin, aoi.ymax)
        h = float(scene.surface(x, y))
        lat, lon = frame.to_geo(x, y)
        chosen = sorted(rng.choice(n, 3, replace=False))
        ok = True
        pix = []
        for i in chosen:
            s, l = cams[i].project(lat, lon, h)
            hit = scene.cast(views[i], np.array([s]), np.array([l]))
            if abs(hit.x[0] - x) > 1e-6 or abs(hit.y[0] - y) > 1e-6:
                ok = False
                break
            pix.append((views[i].image_id, float(s), float(l)))
        if not ok:
            continue
        for iid, s, l in pix:
            ds, dl = rng.normal(0.0, cfg.tie_noise, 2)
            obs.append(TieObservation(iid, s + ds, l + dl, t))
        t += 1
    write_tiepoints(out / "tiepoints.csv", obs)

    # disparity maps for every pair, rectified with the true cameras
    for i in range(n):
        for j in range(i + 1, n):
            va, vb = views[i], views[j]
            A, B, shape = rectify_affine(va.camera(), vb.camera(), clat, clon, href,
                                         (0, 0, va.shape[1] - 1, va.shape[0] - 1))
            disp = render_disparity(scene, va, vb, A, B, shape)
            write_disparity(out / "disparity" / f"{disp.pair_id}.disp", disp)

    # terrain model and truth labels
    dem = empty_grid(padded, cfg.gsd, frame=frame)
    xs, ys = dem.cell_centers()
    write_ascii_grid(out / "dem.asc", dem.with_data(scene.ground(xs, ys)))
    truth = truth_labels(scene, empty_grid(aoi, cfg.gsd, frame=frame))
    write_ascii_grid(out / "truth_labels.asc", truth, fmt="%d")

    # OSM layer, deliberately displaced
    dx, dy = cfg.osm_shift
    feats = []
    for k, bx in enumerate(scene.boxes):
        ring = np.array([(bx.xmin, bx.ymin), (bx.xmax, bx.ymin), (bx.xmax, bx.ymax),
                         (bx.xmin, bx.ymax), (bx.xmin, bx.ymin)]) + (dx, dy)
        feats.append(lab.from_local(f"b{k}", lab.BUILDING, "Polygon", ring, frame))
    for k, r in enumerate(scene.roads):
        feats.append(lab.from_local(f"r{k}", lab.ROAD, "LineString",
                                    np.asarray(r, float) + (dx, dy), frame))
    lab.write_geojson(out / "osm.geojson", lab.VectorLayer(feats))

    manifest = out / "manifest.ini"
    write_manifest(manifest, cfg, ids)
    return manifest


def write_manifest(path, cfg: WorldConfig, ids) -> None:
    cp = configparser.ConfigParser()
    cp["frame"] = {"lat0": repr(cfg.lat0), "lon0": repr(cfg.lon0)}
    cp["aoi"] = dict(zip(("xmin", "ymin", "xmax", "ymax"), (repr(float(v)) for v in cfg.aoi)))
    cp["tiles"] = {"core": repr(cfg.tile_core), "margin": repr(cfg.tile_margin)}
    cp["inputs"] = {"images": ",".join(ids), "image_dir": "images", "rpc_dir": "rpc",
                    "views": "views.csv", "tiepoints": "tiepoints.csv",
                    "disparity_dir": "disparity", "dem": "dem.asc", "osm": "osm.geojson",
                    "truth": "truth_labels.asc"}
    cp["outputs"] = {"root": "out"}
    cp["params"] = {"resolution": repr(cfg.gsd), "h_step": "0.5", "gamma": "1.0",
                    "interp": "nearest", "y_top": "3", "median_window": "3",
                    "hole_radius": "11", "lambda_reg": "0.01", "ncc_radius": "10",
                    "window_size": "48", "windows_per_tile": "3", "subset_size": "3",
                    "alpha": "1.0", "beta": "1.0", "epochs": "25", "lr": "0.5",
                    "sv_lr_scale": "0.1", "variant": "B", "min_pairs": "40",
                    "max_pairs": "80", "seed": str(cfg.seed)}
    cp["schedule"] = {"tiles": "100", "pairs_per_tile": "80", "pair_minutes": "20.0",
                      "fusion_minutes": "60.0", "failure_prob": "0.0", "n_large": "0",
                      "n_small": "9"}
    with open(path, "w") as fh:
        cp.write(fh)
