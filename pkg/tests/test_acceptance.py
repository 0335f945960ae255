"""Acceptance criteria, one test each; every test logs a single PASS/FAIL line."""

import itertools
import math
import time
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.ndimage import binary_dilation

from conftest import FRAME, record_criterion
from oracles import detector_oracle
from test_dsm import _tile_grids, median_abs_diff_oracle
from test_fusion import gradient_errors, random_instance
from test_labels import blobs, mitred_l_oracle, square
from test_ortho import BOX_SCENE, ortho_of
from orthoforge.alignment import DetectorConfig, TiePointGraph, assess_quality, bundle_adjust
from orthoforge.dsm import boundary_stats, top_y_median
from orthoforge.fusion import LossConfig, Variant, loss_mv, loss_sv
from orthoforge.grid import Extent, empty_grid
from orthoforge.io import read_kv
from orthoforge.labels import (BUILDING, buffer_polyline, from_local, ncc_align, nhfd,
                               project_polygon_offnadir, shift_raster)
from orthoforge.ortho import NODATA
from orthoforge.rpc import partition_aoi
from orthoforge.schedsim import (APPENDIX_PLAN, Action, Mode, appendix_fleet,
                                 replay_figure_fixture, simulate)
from orthoforge.synthetic import Box, BoxScene, shadow_mask, tie_fixture, view_over


def test_criterion_1_gwarp_occlusion_oracle():
    t0 = time.perf_counter()
    checks = {}
    for az in (0.0, 90.0, 135.0, 270.0):
        view, dsm, res = ortho_of(BOX_SCENE, 30.0, az)
        xs, ys = dsm.cell_centers()
        truth = shadow_mask(BOX_SCENE, view, xs, ys)
        ours = res.mask.data == NODATA
        within = bool(np.all(~ours | binary_dilation(truth))
                      and np.all(~truth | binary_dilation(ours)))
        checks[f"az {az:g}: NODATA {ours.sum()} vs shadow {truth.sum()} within 1 cell"] = within
    nadir = ortho_of(BOX_SCENE, 0.0, 0.0)[2].n_nodata
    checks[f"nadir NODATA = {nadir}"] = nadir == 0
    assert record_criterion(1, "gwarp++ occlusion oracle", checks, time.perf_counter() - t0, 10)


def test_criterion_2_bundle_adjustment_recovery():
    t0 = time.perf_counter()
    fx = tie_fixture(np.random.default_rng(1), n_images=10, n_tracks=300, noise_px=0.5,
                     gauge_free=False)
    sol = bundle_adjust(fx.cameras, fx.observations)
    clean = tie_fixture(np.random.default_rng(11), n_images=10, n_tracks=1000)
    sol0 = bundle_adjust(clean.cameras, clean.observations)
    rec = np.array([[sol0.biases[v.image_id].d_sample, sol0.biases[v.image_id].d_line]
                    for v in clean.views])
    err = float(np.max(np.abs(rec - clean.biases)))
    checks = {
        f"noisy residual {sol.initial.mean:.2f} -> {sol.mean_residual:.3f} px <= 0.5":
            sol.mean_residual <= 0.5,
        f"injected bias rms {np.sqrt(np.mean(fx.biases ** 2)):.2f} px":
            np.sqrt(np.mean(fx.biases ** 2)) > 3.0,
        f"zero-noise recovery error {err:.2e} px <= 0.1": err <= 0.1,
    }
    assert record_criterion(2, "bundle-adjustment recovery", checks, time.perf_counter() - t0,
                            30)


def _profile_graphs(n):
    """One graph per (component sizes, edges per component) profile on n vertices."""
    def partitions(n, most):
        if n == 0:
            yield []
            return
        for k in range(min(n, most), 0, -1):
            for rest in partitions(n - k, k):
                yield [k] + rest

    for sizes in partitions(n, n):
        options = [range(s - 1, s * (s - 1) // 2 + 1) if s > 1 else [0] for s in sizes]
        for counts in itertools.product(*options):
            edges, base = [], 0
            for s, e in zip(sizes, counts):
                path = [(base + i, base + i + 1) for i in range(s - 1)]
                extra = [p for p in itertools.combinations(range(base, base + s), 2)
                         if p not in path]
                edges += path + extra[:e - (s - 1)] if s > 1 else []
                base += s
            yield edges


def _graph_suite():
    for g in nx.graph_atlas_g()[1:]:
        yield g.number_of_nodes(), sorted(tuple(sorted(e)) for e in g.edges())
    for n in range(1, 6):
        pairs = list(itertools.combinations(range(n), 2))
        for mask in range(1 << len(pairs)):
            yield n, [p for i, p in enumerate(pairs) if mask >> i & 1]
    for edges in _profile_graphs(8):
        yield 8, edges


def test_criterion_3_detector_conformance():
    t0 = time.perf_counter()
    ks = (0.1, 0.3, 0.5, 0.7, 0.8, 0.9)
    d_mins = (0.1, 0.3, 0.5, 0.7, 1.0)
    n_cases = mismatches = 0
    worst_d = 0.0
    for n, edges in _graph_suite():
        names = [f"v{i}" for i in range(n)]
        graph = TiePointGraph(names, {(names[a], names[b]): 1 for a, b in edges})
        for s_total in (n, n + 1, n + 3):
            for k in ks:
                for d_min in d_mins:
                    rep = assess_quality(graph, s_total, DetectorConfig(k, d_min))
                    aq, reason, d, size = detector_oracle(list(range(n)), edges, s_total, k,
                                                          d_min)
                    n_cases += 1
                    if (rep.aq, rep.reason.value, rep.component_size) != (aq, reason, size):
                        mismatches += 1
                    worst_d = max(worst_d, abs(rep.density - float(d)))
    checks = {f"{n_cases} cases, {mismatches} (aq, reason) mismatches": mismatches == 0,
              f"max |D - exact| = {worst_d:.1e} <= 1e-12": worst_d <= 1e-12}
    assert record_criterion(3, "detector conformance", checks, time.perf_counter() - t0)


def test_criterion_4_fusion_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    grad_ok = masked_ok = coupled = 0
    for i in range(200):
        variant = Variant.MV_A if i % 2 else Variant.MV_B
        stack, w, gt, cfg = random_instance(rng, variant=variant)
        grad_ok += all(gradient_errors(stack, w, gt, cfg))
        # L_SV and L_MV separately as well as the total
        for part in (LossConfig(1, 0), LossConfig(0, 1)):
            grad_ok -= not all(gradient_errors(stack, w, gt, part))
        g = loss_sv(stack, gt, cfg).grad_scores
        masked_ok += bool(np.all(g[np.broadcast_to(gt.masks[:, None], g.shape)] == 0.0))
        # coupling on a generic MV-B instance with every view present
        s2, w2, gt2, cfg2 = random_instance(rng, m=int(rng.integers(2, 5)),
                                            variant=Variant.MV_B)
        s2.present[:] = True
        s2.scores[:] = rng.normal(0, 2, s2.scores.shape)
        base = loss_mv(s2, w2, gt2, cfg2).grad_scores[0].copy()
        s2.scores[1] += rng.normal(0, 1, s2.scores[1].shape)
        coupled += not np.allclose(base, loss_mv(s2, w2, gt2, cfg2).grad_scores[0], atol=1e-12)
    checks = {f"{grad_ok}/200 instances match finite differences": grad_ok == 200,
              f"{masked_ok}/200 masked gradients exactly zero": masked_ok == 200,
              f"{coupled}/200 MV-B instances coupled": coupled == 200}
    assert record_criterion(4, "fusion gradient suite", checks, time.perf_counter() - t0)


def test_criterion_5_scheduler_arithmetic():
    t0 = time.perf_counter()
    barrier = simulate(appendix_fleet(), APPENDIX_PLAN, Mode.BARRIER).makespan
    pipelined = simulate(appendix_fleet(), APPENDIX_PLAN, Mode.PIPELINED).makespan
    lo = 11 * 1440 + 2 * 60
    saving = barrier - pipelined
    tl = replay_figure_fixture()
    fuse = tl.of(vm=0, action=Action.FUSE_START, tile=0)[0].time
    fuse_end = tl.of(vm=0, action=Action.FUSE_END, tile=0)[0].time
    captain_next = min(e.time for e in tl.of(vm=0, tile=1)
                       if e.action in (Action.PULL, Action.RETRY))
    others = all(fuse <= min(e.time for e in tl.of(vm=v, action=Action.PULL, tile=1)) < fuse_end
                 for v in (1, 2))
    checks = {
        f"barrier {barrier:g} min == 22000": barrier == 22_000,
        f"pipelined {pipelined:g} min in [{lo}, {lo + 240}]": lo <= pipelined <= lo + 240,
        f"saving {saving / 1440:.2f} d within 4 d +- 4 h": abs(saving - 4 * 1440) <= 240,
        "captain fuses tile 1 before pulling tile 2": fuse < captain_next,
        "small and large VMs pull tile 2 during fusion": others,
    }
    assert record_criterion(5, "scheduler arithmetic", checks, time.perf_counter() - t0, 5)


def _top_y_sort_oracle(cell, h, n_cells, y):
    order = np.lexsort((-h, cell))
    c, v = cell[order], h[order]
    start = np.searchsorted(c, np.arange(n_cells))
    count = np.bincount(c, minlength=n_cells)
    n_eff = np.minimum(count, y)
    out = np.full(n_cells, np.nan)
    ok = n_eff > 0
    lo = start[ok] + (n_eff[ok] - 1) // 2
    hi = start[ok] + n_eff[ok] // 2
    out[ok] = 0.5 * (v[lo] + v[hi])
    return out


def test_criterion_6_dsm_fusion_and_mosaicking():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    n_cells = 100_000
    cell = rng.integers(0, n_cells, 500_000)
    h = rng.normal(0, 10, cell.size)
    checks = {}
    for y in (1, 2, 3, 4):
        same = np.array_equal(top_y_median(cell, h, n_cells, y),
                              _top_y_sort_oracle(cell, h, n_cells, y), equal_nan=True)
        checks[f"top-{y} median equals sort oracle on 1e5 cells"] = same
    tiles = partition_aoi(Extent(0, 0, 200, 100), core=100, margin=30)
    bs = boundary_stats(_tile_grids(tiles, noise=0.5, rng=np.random.default_rng(60),
                                    cellsize=0.5))
    oracle = median_abs_diff_oracle(0.5)
    checks[f"boundary median_abs {bs.median_abs_z:.4f} within 10% of {oracle:.4f}"] = \
        abs(bs.median_abs_z - oracle) <= 0.1 * oracle
    checks[f"median_abs {bs.median_abs_z:.4f} < 0.5 m"] = bs.median_abs_z < 0.5
    assert record_criterion(6, "DSM fusion and mosaicking", checks, time.perf_counter() - t0)


def _distance_field_area(coords, half_width, step=0.1):
    """Area within ``half_width`` of a polyline, flattened beyond its two end points."""
    pts = np.asarray(coords, float)
    lo, hi = pts.min(axis=0) - half_width - 1, pts.max(axis=0) + half_width + 1
    xs, ys = np.meshgrid(np.arange(lo[0], hi[0], step) + step / 2,
                         np.arange(lo[1], hi[1], step) + step / 2)
    dists, ts = [], []
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        t = ((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / (d @ d)
        tc = np.clip(t, 0, 1)
        dists.append(np.hypot(xs - a[0] - tc * d[0], ys - a[1] - tc * d[1]))
        ts.append(t)
    dists = np.array(dists)
    inside = dists.min(axis=0) <= half_width
    # a round cap is cut flat unless another segment also covers the point
    inside &= ~((ts[0] < 0) & (np.delete(dists, 0, axis=0).min(axis=0, initial=np.inf)
                                > half_width))
    inside &= ~((ts[-1] > 1) & (np.delete(dists, -1, axis=0).min(axis=0, initial=np.inf)
                                 > half_width))
    return np.count_nonzero(inside) * step * step


def test_criterion_7_labels_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    hits = 0
    for _ in range(50):
        x = blobs(rng, n=10)
        dx, dy = (int(v) for v in rng.integers(-10, 11, 2))
        off = ncc_align(shift_raster(x, dx, dy), x, 10)
        hits += (off.dx, off.dy) == (dx, dy)
    poly = buffer_polyline([[0, 0], [40, 0], [40, 30]], 4.0)
    oracle = mitred_l_oracle()
    field = _distance_field_area([[0, 0], [40, 0], [40, 30]], 4.0)
    hand = [(nhfd(0.4, 0.4), 0.0), (nhfd(0.7, 0.0), 1.0), (nhfd(0.3, 0.1), 0.5)]
    nhfd_ok = all(math.isclose(float(a), b, abs_tol=1e-12) for a, b in hand)
    nhfd_ok &= bool(np.isnan(nhfd(0.0, 0.0)))

    scene = BoxScene([Box(15, 15, 25, 25, 10.0)])
    ext = Extent(0, 0, 40, 40)
    view = view_over("o", FRAME, ext, 0.5, 30.0, 90.0, max_height=15.0)
    g = empty_grid(ext, 0.5, frame=FRAME)
    xs, ys = g.cell_centers()
    dsm = g.with_data(scene.surface(xs, ys))
    ring = from_local("b", BUILDING, "Polygon", square(15, 15, 10), FRAME).coords
    roof = project_polygon_offnadir(ring, dsm, view.camera(), view.shape, FRAME)
    base = project_polygon_offnadir(ring, dsm, view.camera(), view.shape, FRAME, heights=0.0)
    shift = float(np.hypot(*np.subtract(roof.polygon.centroid.coords[0],
                                        base.polygon.centroid.coords[0])))
    expect = 10 * math.tan(math.radians(30)) / 0.5
    checks = {
        f"NCC recovered {hits}/50 shifts": hits == 50,
        f"L buffer {poly.area:.2f} vs oracle {oracle:.2f} m2 within 1%":
            abs(poly.area - oracle) <= 0.01 * oracle,
        f"L buffer {poly.area:.2f} vs distance field {field:.2f} m2 within 1%":
            abs(poly.area - field) <= 0.01 * field,
        "NHFD hand values": nhfd_ok,
        f"parallax {shift:.3f} px vs {expect:.3f} px within 1": abs(shift - expect) <= 1.0,
    }
    assert record_criterion(7, "labels round-trip", checks, time.perf_counter() - t0)


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.resolved.ini"}


def test_criterion_8_end_to_end_fixture(world, world_rerun):
    rep = read_kv(world.out / "vote" / "report.txt")
    b, r = float(rep["iou.vote.building"]), float(rep["iou.vote.road"])
    first, second = _tree(world.out), _tree(world_rerun.out)
    differing = sorted(k for k in first.keys() | second.keys()
                       if first.get(k) != second.get(k))
    checks = {
        f"exit codes {world.exit_code}/{world_rerun.exit_code}":
            world.exit_code == 0 and world_rerun.exit_code == 0,
        f"vote IoU building {b:.4f} >= 0.95": b >= 0.95,
        f"vote IoU road {r:.4f} >= 0.95": r >= 0.95,
        f"re-run byte-identical over {len(first)} files"
        + (f" (differs: {', '.join(differing[:3])})" if differing else ""): not differing,
    }
    assert record_criterion(8, "end-to-end fixture", checks, world.seconds, 300)
