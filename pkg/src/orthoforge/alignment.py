"""Tie-point graphs, the multi-image tie-point need detector, and bias bundle adjustment."""

from __future__ import annotations

import csv
import enum
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import GaugeWarning, NonConvergenceError
from .rpc import BiasCorrection, BiasedCamera, RpcCamera, localize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TieObservation:
    image_id: str
    sample: float
    line: float
    track_id: int


def read_tiepoints(path) -> list[TieObservation]:
    with open(path, newline="") as fh:
        return [TieObservation(r["image_id"], float(r["sample"]), float(r["line"]),
                               int(r["track_id"])) for r in csv.DictReader(fh)]


def write_tiepoints(path, observations) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "sample", "line", "track_id"])
        for o in observations:
            w.writerow([o.image_id, repr(float(o.sample)), repr(float(o.line)), o.track_id])


# --- graph and detector --------------------------------------------------------------

@dataclass
class TiePointGraph:
    vertices: list[str] = field(default_factory=list)
    edges: dict[tuple[str, str], int] = field(default_factory=dict)

    def neighbors(self) -> dict[str, set[str]]:
        adj = {v: set() for v in self.vertices}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj


def build_graph(observations) -> TiePointGraph:
    """Vertices are images; edge (i, j) weight = number of tracks seen in both."""
    images_of_track = defaultdict(set)
    for o in observations:
        images_of_track[o.track_id].add(o.image_id)
    vertices = sorted({o.image_id for o in observations})
    edges: dict[tuple[str, str], int] = defaultdict(int)
    for imgs in images_of_track.values():
        for a, b in combinations(sorted(imgs), 2):
            edges[(a, b)] += 1
    return TiePointGraph(vertices, dict(sorted(edges.items())))


class Reason(enum.Enum):
    OK = "OK"
    TOO_FEW_ALIGNED = "TOO_FEW_ALIGNED"
    TREE = "TREE"
    SPARSE = "SPARSE"


@dataclass(frozen=True)
class DetectorConfig:
    k: float = 0.8
    d_min: float = 0.5

    def __post_init__(self):
        if not 0 < self.k < 1:
            raise ValueError("k must lie in (0, 1)")
        if not 0 < self.d_min <= 1:
            raise ValueError("d_min must lie in (0, 1]")


@dataclass(frozen=True)
class QualityReport:
    aq: bool
    reason: Reason
    density: float
    component_size: int
    component_edges: int

    def as_dict(self):
        return {"aq": self.aq, "reason": self.reason.value, "density": self.density,
                "component_size": self.component_size}


def connected_components(graph: TiePointGraph) -> list[set[str]]:
    adj = graph.neighbors()
    seen: set[str] = set()
    comps = []
    for v in graph.vertices:
        if v in seen:
            continue
        comp, stack = set(), [v]
        while stack:
            u = stack.pop()
            if u in comp:
                continue
            comp.add(u)
            stack.extend(adj[u] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def density(n_vertices: int, n_edges: int) -> float:
    if n_vertices < 2:
        return 0.0
    return 2.0 * n_edges / (n_vertices * (n_vertices - 1))


def assess_quality(graph: TiePointGraph, s_total: int,
                   config: DetectorConfig = DetectorConfig()) -> QualityReport:
    """Decide whether pairwise tie points gave a satisfactory alignment.

    Checks, in order: size of the largest connected component against
    ``k * s_total``, whether that component is a tree, and its edge density.
    Equal-size components are ranked by edge count, then by smallest vertex id.
    """
    if s_total < 1:
        raise ValueError("s_total must be >= 1")
    ranked = []
    for comp in connected_components(graph):
        n_e = sum(1 for a, _ in graph.edges if a in comp)
        ranked.append((-len(comp), -n_e, min(comp), comp))
    ranked.sort(key=lambda t: t[:3])
    best, best_edges = (ranked[0][3], -ranked[0][1]) if ranked else (set(), 0)
    size = len(best)
    d = density(size, best_edges)
    if size / s_total < config.k:      # exact for decimal k, unlike k * s_total
        reason = Reason.TOO_FEW_ALIGNED
    elif best_edges == size - 1:
        reason = Reason.TREE
    elif d < config.d_min:
        reason = Reason.SPARSE
    else:
        reason = Reason.OK
    return QualityReport(reason is Reason.OK, reason, d, size, best_edges)


# --- bundle adjustment ------------------------------------------------------------------

@dataclass
class _Problem:
    """Flattened observation arrays shared by triangulation and adjustment."""

    image_ids: list[str]
    track_ids: np.ndarray      # original id of each dense track index
    img: np.ndarray            # (K,) image index per observation
    trk: np.ndarray            # (K,) dense track index per observation
    uv: np.ndarray             # (K, 2) observed (sample, line)

    @property
    def n_tracks(self):
        return len(self.track_ids)


def _flatten(observations, image_ids) -> _Problem:
    index = {iid: i for i, iid in enumerate(image_ids)}
    obs = sorted(observations, key=lambda o: (o.track_id, index.get(o.image_id, -1)))
    per_track = defaultdict(list)
    for o in obs:
        if o.image_id not in index:
            raise ValueError(f"observation references unknown image {o.image_id!r}")
        per_track[o.track_id].append(o.image_id)
    for tid, imgs in per_track.items():
        if len(imgs) < 2:
            raise ValueError(f"track {tid} has fewer than 2 observations")
        if len(set(imgs)) != len(imgs):
            raise ValueError(f"track {tid} is observed twice in one image")
    track_ids = np.array(sorted(per_track), dtype=np.int64)
    dense = {t: i for i, t in enumerate(track_ids)}
    return _Problem(list(image_ids), track_ids,
                    np.array([index[o.image_id] for o in obs], dtype=np.int64),
                    np.array([dense[o.track_id] for o in obs], dtype=np.int64),
                    np.array([[o.sample, o.line] for o in obs], dtype=float).reshape(-1, 2))


def _project_all(cams, prob: _Problem, X, with_jac=False):
    """Projections (K, 2) and optionally Jacobians (K, 2, 3) w.r.t. (lat, lon, h)."""
    K = len(prob.img)
    uv = np.empty((K, 2))
    J = np.empty((K, 2, 3)) if with_jac else None
    for i, cam in enumerate(cams):
        m = prob.img == i
        if not m.any():
            continue
        P = X[prob.trk[m]]
        s, l = cam.project(P[:, 0], P[:, 1], P[:, 2], check_domain=False)
        uv[m, 0], uv[m, 1] = s, l
        if with_jac:
            J[m] = cam.jacobian(P[:, 0], P[:, 1], P[:, 2])
    return uv, J


def _param_scale(cams) -> np.ndarray:
    c = cams[0].camera
    return np.array([c.lat_scale, c.lon_scale, c.height_scale])


def _solve3(A, b):
    return np.linalg.solve(A, b[..., None])[..., 0]


def _triangulate_tracks(cams, prob: _Problem, X0=None, max_iter=50, tol=1e-9):
    """Per-track least-squares intersection with cameras (and biases) held fixed."""
    scale = _param_scale(cams)
    T = prob.n_tracks
    if X0 is None:
        first = np.unique(prob.trk, return_index=True)[1]
        X = np.empty((T, 3))
        for k in first:
            cam = cams[prob.img[k]]
            h = cam.camera.height_off
            lat, lon = localize(cam, prob.uv[k, 0], prob.uv[k, 1], h)
            X[prob.trk[k]] = (float(lat), float(lon), h)
    else:
        X = X0.copy()
    mu = np.full(T, 1e-6)
    for _ in range(max_iter):
        proj, J = _project_all(cams, prob, X, with_jac=True)
        r = proj - prob.uv
        Jn = J * scale
        H = np.zeros((T, 3, 3))
        g = np.zeros((T, 3))
        np.add.at(H, prob.trk, np.einsum("kia,kib->kab", Jn, Jn))
        np.add.at(g, prob.trk, np.einsum("kia,ki->ka", Jn, r))
        cost = np.zeros(T)
        np.add.at(cost, prob.trk, np.sum(r * r, axis=1))
        diag = np.einsum("taa->ta", H)
        Hd = H + (mu[:, None] * diag)[:, :, None] * np.eye(3)
        step = -_solve3(Hd, g)
        Xn = X + step * scale
        proj_n, _ = _project_all(cams, prob, Xn)
        cost_n = np.zeros(T)
        np.add.at(cost_n, prob.trk, np.sum((proj_n - prob.uv) ** 2, axis=1))
        better = cost_n <= cost
        X[better] = Xn[better]
        mu = np.where(better, mu * 0.3, mu * 10.0)
        moved = np.zeros(T)
        np.maximum.at(moved, prob.trk, np.max(np.abs(np.einsum("kia,ka->ki", Jn,
                                                                step[prob.trk])), axis=1))
        if np.all(moved < tol) or np.all(~better & (moved < 1e-6)):
            break
    return X


@dataclass(frozen=True)
class ReprojectionStats:
    mean: float
    variance: float
    per_track: np.ndarray

    def as_dict(self):
        return {"mean": self.mean, "variance": self.variance,
                "n_tracks": int(len(self.per_track))}


def _stats(cams, prob: _Problem, X) -> ReprojectionStats:
    proj, _ = _project_all(cams, prob, X)
    d2 = np.sum((proj - prob.uv) ** 2, axis=1)
    sums = np.zeros(prob.n_tracks)
    counts = np.zeros(prob.n_tracks)
    np.add.at(sums, prob.trk, d2)
    np.add.at(counts, prob.trk, 1)
    per = np.sqrt(sums / counts)
    return ReprojectionStats(float(per.mean()), float(per.var()), per)


def reprojection_stats(cameras, observations) -> ReprojectionStats:
    """Mean/variance over tracks of the per-track RMS reprojection distance.

    ``cameras`` is a sequence of ``BiasedCamera``; every track is re-triangulated
    against them first.
    """
    cams = list(cameras)
    prob = _flatten(observations, [c.image_id for c in cams])
    if prob.n_tracks == 0:
        return ReprojectionStats(0.0, 0.0, np.zeros(0))
    X = _triangulate_tracks(cams, prob)
    return _stats(cams, prob, X)


def reprojection_stats_at(cameras, observations, points) -> ReprojectionStats:
    """Like ``reprojection_stats`` but against given world points.

    ``points`` maps track id -> (lat, lon, h).
    """
    cams = list(cameras)
    prob = _flatten(observations, [c.image_id for c in cams])
    X = np.array([points[int(t)] for t in prob.track_ids], float).reshape(-1, 3)
    return _stats(cams, prob, X)


@dataclass
class AlignmentSolution:
    biases: dict[str, BiasCorrection]
    mean_residual: float
    variance_residual: float
    iterations: int
    lambda_reg: float
    cost_history: list[float]
    initial: ReprojectionStats | None = None

    def as_dict(self):
        out = {"iterations": self.iterations, "lambda_reg": self.lambda_reg,
               "mean_residual_px": self.mean_residual,
               "variance_residual_px2": self.variance_residual}
        if self.initial is not None:
            out["initial_mean_residual_px"] = self.initial.mean
            out["initial_variance_residual_px2"] = self.initial.variance
        for iid in sorted(self.biases):
            out[f"bias.{iid}.d_sample"] = self.biases[iid].d_sample
            out[f"bias.{iid}.d_line"] = self.biases[iid].d_line
        return out


DEFAULT_LAMBDA = 1e-2


def bundle_adjust(cameras: list[RpcCamera], observations, lambda_reg: float = DEFAULT_LAMBDA,
                  max_iter: int = 200, tol: float = 1e-6,
                  bias_bound: float = 50.0) -> AlignmentSolution:
    """Solve per-image constant biases and per-track world points jointly.

    Minimises the summed squared reprojection error plus
    ``lambda_reg * sum(|bias_i|^2)`` with Levenberg-Marquardt. The world points
    are eliminated through a Schur complement, leaving a dense 2n x 2n system
    in the biases.
    """
    if lambda_reg < 0:
        raise ValueError("lambda_reg must be >= 0")
    cams0 = [BiasedCamera(c) for c in cameras]
    n = len(cams0)
    prob = _flatten(observations, [c.image_id for c in cams0])
    if prob.n_tracks == 0:
        raise ValueError("no tracks to adjust")
    scale = _param_scale(cams0)

    X = _triangulate_tracks(cams0, prob)
    initial = _stats(cams0, prob, X)
    b = np.zeros((n, 2))
    T = prob.n_tracks

    # observation pairs sharing a track, for the Schur complement
    order = np.argsort(prob.trk, kind="stable")
    starts = np.searchsorted(prob.trk[order], np.arange(T))
    ends = np.searchsorted(prob.trk[order], np.arange(T), side="right")
    pk, pl = [], []
    for s, e in zip(starts, ends):
        idx = order[s:e]
        pk.append(np.repeat(idx, len(idx)))
        pl.append(np.tile(idx, len(idx)))
    pk = np.concatenate(pk)
    pl = np.concatenate(pl)
    counts = np.bincount(prob.img, minlength=n).astype(float)

    def residuals(X, b):
        proj, J = _project_all(cams0, prob, X, with_jac=True)
        return proj + b[prob.img] - prob.uv, J

    def cost_of(r, b):
        return float(np.sum(r * r) + lambda_reg * np.sum(b * b))

    r, J = residuals(X, b)
    cost = cost_of(r, b)
    history = [cost]
    mu = 1e-4
    checked_gauge = False
    for it in range(1, max_iter + 1):
        Jn = J * scale                                    # (K, 2, 3)
        V = np.zeros((T, 3, 3))
        np.add.at(V, prob.trk, np.einsum("kia,kib->kab", Jn, Jn))
        gX = np.zeros((T, 3))
        np.add.at(gX, prob.trk, np.einsum("kia,ki->ka", Jn, r))
        gb = np.zeros((n, 2))
        np.add.at(gb, prob.img, r)
        gb += lambda_reg * b
        Ub = counts + lambda_reg                          # bias block is diagonal

        def schur(mu):
            Vd = V + (mu * np.einsum("taa->ta", V))[:, :, None] * np.eye(3)
            Vinv = np.linalg.inv(Vd)
            Y = np.einsum("kia,kab->kib", Jn, Vinv[prob.trk])       # W V^-1
            S = np.zeros((2 * n, 2 * n))
            contrib = np.einsum("pia,pja->pij", Y[pk], Jn[pl])
            ar = np.arange(2)
            rows = 2 * prob.img[pk][:, None, None] + ar[None, :, None]
            cols = 2 * prob.img[pl][:, None, None] + ar[None, None, :]
            np.add.at(S, (rows, cols), -contrib)
            S[np.diag_indices(2 * n)] += np.repeat(Ub * (1 + mu), 2)
            rhs = -gb.copy()
            np.add.at(rhs, prob.img, np.einsum("kia,ka->ki", Y, gX[prob.trk]))
            return S, rhs.reshape(-1), Vinv

        if not checked_gauge:
            S0, _, _ = schur(0.0)
            ev = np.linalg.eigvalsh(0.5 * (S0 + S0.T))
            if lambda_reg == 0 and ev[0] < 1e-9 * max(ev[-1], 1e-300):
                warnings.warn("bias gauge is unconstrained (lambda_reg = 0); bias patterns "
                              "equivalent to a world translation are unobservable",
                              GaugeWarning, stacklevel=2)
            checked_gauge = True

        while True:
            S, rhs, Vinv = schur(mu)
            db = np.linalg.solve(S, rhs).reshape(n, 2)
            tmp = -gX.copy()
            np.add.at(tmp, prob.trk, -np.einsum("kia,ki->ka", Jn, db[prob.img]))
            dX = np.einsum("tab,tb->ta", Vinv, tmp)
            step_px = max(float(np.max(np.abs(db))),
                          float(np.max(np.abs(np.einsum("kia,ka->ki", Jn, dX[prob.trk])))))
            Xn = X + dX * scale
            bn = b + db
            rn, Jnew = residuals(Xn, bn)
            cn = cost_of(rn, bn)
            if cn <= cost:
                X, b, r, J, cost = Xn, bn, rn, Jnew, cn
                history.append(cost)
                mu = max(mu / 3.0, 1e-12)
                break
            mu *= 4.0
            if step_px < tol or mu > 1e16:
                break
        if step_px < tol:
            break
    else:
        raise NonConvergenceError(f"bundle adjustment did not converge in {max_iter} "
                                  f"iterations", residual=np.sqrt(np.sum(r * r, axis=1)))

    cams = [BiasedCamera(c.camera, BiasCorrection(*map(float, bb), bound=bias_bound))
            for c, bb in zip(cams0, b)]
    stats = _stats(cams, prob, _triangulate_tracks(cams, prob, X0=X))
    log.debug("bundle adjustment: %d iterations, cost %.6g -> %.6g", it, history[0],
              history[-1])
    return AlignmentSolution({c.image_id: c.bias for c in cams}, stats.mean, stats.variance,
                             it, lambda_reg, history, initial)


def gauge_basis(cameras, lat: float, lon: float, h: float) -> np.ndarray:
    """(2n, 3) image-space bias patterns produced by a rigid world translation.

    Any bias vector in this span can be traded for moving every track point, so
    tie points alone cannot observe it; the regulariser picks the member of
    ``b + span`` with the smallest norm.
    """
    return np.concatenate([c.jacobian(lat, lon, h).reshape(2, 3) for c in cameras], axis=0)


def remove_gauge(biases: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Project an (n, 2) bias array onto the orthogonal complement of ``basis``."""
    flat = np.asarray(biases, float).reshape(-1)
    coef, *_ = np.linalg.lstsq(basis, flat, rcond=None)
    return (flat - basis @ coef).reshape(-1, 2)
