"""Independent reference implementations the package is checked against."""

from fractions import Fraction
from itertools import combinations

import numpy as np
from scipy.optimize import least_squares


def detector_oracle(vertices, edges, s_total, k, d_min):
    """Brute-force detector: union-find components, exact rational density.

    Returns (aq, reason, density, component_size).
    """
    parent = {v: v for v in vertices}

    def find(v):
        while parent[v] != v:
            v = parent[v]
        return v

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for v in vertices:
        groups.setdefault(find(v), []).append(v)
    best = None
    for members in groups.values():
        s = set(members)
        n_e = sum(1 for a, b in edges if a in s and b in s)
        key = (len(s), n_e)
        if best is None or key > best[0]:
            best = (key, s)
    size, n_e = best[0] if best else (0, 0)
    d = Fraction(2 * n_e, size * (size - 1)) if size >= 2 else Fraction(0)
    if size < Fraction(repr(k)) * s_total:
        return False, "TOO_FEW_ALIGNED", d, size
    if n_e == size - 1:
        return False, "TREE", d, size
    if d < Fraction(repr(d_min)):
        return False, "SPARSE", d, size
    return True, "OK", d, size


def all_graphs(n):
    """Every labelled simple graph on vertices 0..n-1, as edge lists."""
    pairs = list(combinations(range(n), 2))
    for mask in range(1 << len(pairs)):
        yield [p for i, p in enumerate(pairs) if mask >> i & 1]


def retriangulated_rms(cameras, observations):
    """Per-track RMS reprojection distance after a scipy least-squares intersection."""
    cams = {c.image_id: c for c in cameras}
    tracks = {}
    for o in observations:
        tracks.setdefault(o.track_id, []).append(o)
    out = []
    for tid in sorted(tracks):
        obs = tracks[tid]
        first = cams[obs[0].image_id].camera
        scale = np.array([first.lat_scale, first.lon_scale, first.height_scale])
        x0 = np.array([first.lat_off, first.lon_off, first.height_off])

        def resid(u):
            p = x0 + u * scale
            r = []
            for o in obs:
                s, l = cams[o.image_id].project(p[0], p[1], p[2], check_domain=False)
                r += [float(s) - o.sample, float(l) - o.line]
            return np.array(r)

        sol = least_squares(resid, np.zeros(3), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        r = sol.fun.reshape(-1, 2)
        out.append(np.sqrt(np.mean(np.sum(r * r, axis=1))))
    return np.array(out)


def ncc_bruteforce(feature, labels, radius):
    """Zero-normalised correlation of feature[i, j] with labels[i - dy, j - dx], by loops."""
    f = np.asarray(feature, float)
    g = np.asarray(labels, float)
    rows, cols = f.shape
    out = np.full((2 * radius + 1, 2 * radius + 1), np.nan)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            r0, r1 = max(0, dy), min(rows, rows + dy)
            c0, c1 = max(0, dx), min(cols, cols + dx)
            if r1 <= r0 or c1 <= c0:
                continue
            a = f[r0:r1, c0:c1]
            b = g[r0 - dy:r1 - dy, c0 - dx:c1 - dx]
            a = a - a.mean()
            b = b - b.mean()
            den = np.sqrt(np.sum(a * a) * np.sum(b * b))
            if den > 1e-12:
                out[dy + radius, dx + radius] = np.sum(a * b) / den
    return out


def central_difference(fn, x, step=1e-5):
    """Gradient of scalar fn at array x by central differences."""
    x = np.array(x, float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = fn(x)
        flat[i] = keep - step
        down = fn(x)
        flat[i] = keep
        gf[i] = (up - down) / (2 * step)
    return g


def point_in_polygon(ring, x, y):
    """Even-odd ray casting of points (x, y) against one closed ring."""
    ring = np.asarray(ring, float)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    inside = np.zeros(x.shape, bool)
    for (x0, y0), (x1, y1) in zip(ring[:-1], ring[1:]):
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < xc)
    return inside


def ncc_argmax(surface):
    """(dx, dy) of the surface maximum, ties to the smallest shift then row-major."""
    r = surface.shape[0] // 2
    best = np.nanmax(surface)
    cands = []
    for i in range(surface.shape[0]):
        for j in range(surface.shape[1]):
            if surface[i, j] >= best - 1e-9:
                dy, dx = i - r, j - r
                cands.append((dx * dx + dy * dy, dy, dx))
    _, dy, dx = min(cands)
    return dx, dy
