"""Multi-view fusion of per-view class scores: stacks, MV-A/MV-B layers, losses with
analytic gradients, multi-view data loading, voting, IoU and checkpoint choice.

Array conventions: a stack holds scores as (M, C, H, W); labels are (H, W)
integer class maps; per-view masks are (M, H, W) booleans that are True where
the point is occluded in that view.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

N_CLASSES = 3
CLASS_WEIGHTS = (0.2, 0.4, 0.4)


class Variant(enum.Enum):
    MV_A = "A"
    MV_B = "B"


# --- stacks -----------------------------------------------------------------------------

@dataclass
class PredictionMap:
    view_id: int
    scores: np.ndarray         # (C, H, W)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, float)
        if self.scores.ndim != 3:
            raise ValueError("scores must be (C, H, W)")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"view {self.view_id}: non-finite scores")


@dataclass
class ViewStack:
    scores: np.ndarray         # (M, C, H, W), absent slots zero
    present: np.ndarray        # (M,) bool

    @property
    def m(self) -> int:
        return self.scores.shape[0]

    @property
    def n(self) -> int:
        return int(np.count_nonzero(self.present))

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    def layout_a(self) -> np.ndarray:
        """(1, M*C, H, W): channel m*C + c is class c of view m."""
        m, c, h, w = self.scores.shape
        return self.scores.reshape(1, m * c, h, w)

    def layout_b(self) -> np.ndarray:
        """(C, M, H, W)."""
        return np.transpose(self.scores, (1, 0, 2, 3))

    @classmethod
    def from_layout_a(cls, arr, present, n_classes) -> "ViewStack":
        _, mc, h, w = arr.shape
        return cls(np.asarray(arr).reshape(mc // n_classes, n_classes, h, w).copy(),
                   np.asarray(present, bool))

    @classmethod
    def from_layout_b(cls, arr, present) -> "ViewStack":
        return cls(np.transpose(np.asarray(arr), (1, 0, 2, 3)).copy(),
                   np.asarray(present, bool))

    def views(self) -> list[PredictionMap]:
        return [PredictionMap(int(i), self.scores[i]) for i in np.flatnonzero(self.present)]


def assemble_stack(preds, m: int) -> ViewStack:
    """Place each prediction in the slot of its view id; other slots stay zero."""
    preds = list(preds)
    if not preds:
        raise ValueError("need at least one prediction")
    shape = preds[0].scores.shape
    scores = np.zeros((m,) + shape)
    present = np.zeros(m, bool)
    for p in preds:
        if not 0 <= p.view_id < m:
            raise ValueError(f"view id {p.view_id} outside [0, {m})")
        if present[p.view_id]:
            raise ValueError(f"duplicate view id {p.view_id}")
        if p.scores.shape != shape:
            raise ValueError("prediction shapes differ")
        scores[p.view_id] = p.scores
        present[p.view_id] = True
    return ViewStack(scores, present)


# --- fusion -----------------------------------------------------------------------------

@dataclass
class FusionWeights:
    variant: Variant
    weights: np.ndarray        # (M, C) for MV-A, (M,) for MV-B
    bias: np.ndarray           # (C,) for MV-A, (1,) for MV-B

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float)
        self.bias = np.asarray(self.bias, float).reshape(-1)
        if self.variant is Variant.MV_A:
            if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
                raise ValueError("MV-A needs (M, C) weights and (C,) bias")
        elif self.weights.ndim != 1 or self.bias.shape != (1,):
            raise ValueError("MV-B needs (M,) weights and a scalar bias")

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, variant: Variant, m: int, n_classes: int = N_CLASSES) -> "FusionWeights":
        """Uniform averaging (1/M) with zero bias."""
        if variant is Variant.MV_A:
            return cls(variant, np.full((m, n_classes), 1.0 / m), np.zeros(n_classes))
        return cls(variant, np.full(m, 1.0 / m), np.zeros(1))

    def copy(self) -> "FusionWeights":
        return FusionWeights(self.variant, self.weights.copy(), self.bias.copy())


def softmax(scores, axis=0):
    z = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(scores, axis=0):
    z = scores - np.max(scores, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _check(stack: ViewStack, w: FusionWeights):
    if w.m != stack.m:
        raise ValueError(f"weights cover {w.m} views, stack has {stack.m}")
    if w.variant is Variant.MV_A and w.weights.shape[1] != stack.n_classes:
        raise ValueError("MV-A weights do not match the class count")


def fuse(stack: ViewStack, w: FusionWeights):
    """Fused scores (C, H, W) and their per-point softmax P_MV."""
    _check(stack, w)
    T = stack.scores * stack.present[:, None, None, None]
    if w.variant is Variant.MV_A:
        fused = np.einsum("mc,mchw->chw", w.weights, T) + w.bias[:, None, None]
    else:
        fused = np.einsum("m,mchw->chw", w.weights, T) + w.bias[0]
    return fused, softmax(fused)


# --- losses -----------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    class_weights: tuple = CLASS_WEIGHTS

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")


@dataclass
class GroundTruthWindow:
    labels: np.ndarray         # (H, W) class ids
    masks: np.ndarray          # (M, H, W) True = occluded in that view

    def __post_init__(self):
        self.labels = np.asarray(self.labels, np.int64)
        self.masks = np.asarray(self.masks, bool)
        if self.masks.shape[1:] != self.labels.shape:
            raise ValueError("mask and label dimensions differ")


@dataclass
class LossResult:
    value: float
    grad_scores: np.ndarray                   # (M, C, H, W)
    grad_weights: np.ndarray | None = None
    grad_bias: np.ndarray | None = None
    parts: dict = field(default_factory=dict)


def weighted_ce(scores, labels, class_weights, valid=None):
    """Sum over valid points of -w[g] log softmax(scores)[g]; returns (value, d/dscores)."""
    cw = np.asarray(class_weights, float)
    logp = log_softmax(scores)
    onehot = np.eye(scores.shape[0])[labels].transpose(2, 0, 1)
    wpt = cw[labels]
    if valid is not None:
        wpt = wpt * valid
    value = -float(np.sum(wpt * np.sum(onehot * logp, axis=0)))
    grad = wpt[None] * (np.exp(logp) - onehot)
    return value, grad


def loss_sv(stack: ViewStack, gt: GroundTruthWindow, cfg: LossConfig) -> LossResult:
    """Mean over present views of the masked, class-weighted CE of each view."""
    grad = np.zeros_like(stack.scores)
    n = stack.n
    if n == 0:
        raise ValueError("no views present")
    views = np.flatnonzero(stack.present)
    if all(gt.masks[i].all() for i in views):
        warnings.warn("every point is masked in every view; L_SV is zero", stacklevel=2)
    total = 0.0
    for i in views:
        v, g = weighted_ce(stack.scores[i], gt.labels, cfg.class_weights, ~gt.masks[i])
        total += v
        grad[i] = g / n
    return LossResult(total / n, grad)


def loss_mv(stack: ViewStack, w: FusionWeights, gt: GroundTruthWindow,
            cfg: LossConfig) -> LossResult:
    """Class-weighted CE of the fused prediction against the unmasked labels."""
    if stack.n == 0:
        raise ValueError("no views present")
    fused, _ = fuse(stack, w)
    value, G = weighted_ce(fused, gt.labels, cfg.class_weights)
    T = stack.scores * stack.present[:, None, None, None]
    pres = stack.present[:, None, None, None]
    if w.variant is Variant.MV_A:
        gw = np.einsum("mchw,chw->mc", T, G)
        gb = G.sum(axis=(1, 2))
        gT = w.weights[:, :, None, None] * G[None] * pres
    else:
        gw = np.einsum("mchw,chw->m", T, G)
        gb = np.array([G.sum()])
        gT = w.weights[:, None, None, None] * G[None] * pres
    return LossResult(value, gT, gw, gb)


def total_loss(stack: ViewStack, w: FusionWeights, gt: GroundTruthWindow,
               cfg: LossConfig) -> LossResult:
    """alpha * L_SV + beta * L_MV with all gradients."""
    gT = np.zeros_like(stack.scores)
    gw = np.zeros_like(w.weights)
    gb = np.zeros_like(w.bias)
    value = 0.0
    parts = {}
    if cfg.alpha > 0:
        sv = loss_sv(stack, gt, cfg)
        value += cfg.alpha * sv.value
        gT += cfg.alpha * sv.grad_scores
        parts["l_sv"] = sv.value
    if cfg.beta > 0:
        mv = loss_mv(stack, w, gt, cfg)
        value += cfg.beta * mv.value
        gT += cfg.beta * mv.grad_scores
        gw += cfg.beta * mv.grad_weights
        gb += cfg.beta * mv.grad_bias
        parts["l_mv"] = mv.value
    return LossResult(value, gT, gw, gb, parts)


# --- data loading, voting, metrics --------------------------------------------------------

def split_subsets(r, q: int, seed: int = 0) -> list[list[int]]:
    """Overlapping subsets of exactly q views covering r (empty when |r| < q)."""
    if q < 1:
        raise ValueError("q must be >= 1")
    ids = sorted(r)
    if len(ids) < q:
        return []
    if len(ids) == q:
        return [ids]
    s = list(np.random.default_rng(seed).permutation(ids))
    k = math.ceil(len(s) / q)
    out = [s[j * q:(j + 1) * q] for j in range(k - 1)]
    out.append(s[-q:])
    return [[int(v) for v in sub] for sub in out]


def majority_vote(class_maps, visible=None, n_classes: int = N_CLASSES):
    """Per-point mode over the views that see the point; ties go to the lowest class.

    Returns (labels, unobserved) where unobserved points are BACKGROUND (0).
    """
    maps = np.asarray(class_maps, np.int64)
    if maps.ndim == 2:
        maps = maps[None]
    vis = np.ones(maps.shape, bool) if visible is None else np.asarray(visible, bool)
    counts = np.stack([np.sum((maps == c) & vis, axis=0) for c in range(n_classes)])
    labels = np.argmax(counts, axis=0)
    unobserved = counts.sum(axis=0) == 0
    labels[unobserved] = 0
    return labels, unobserved


def iou(pred, truth, classes=(0, 1, 2), valid=None) -> dict[int, float]:
    """Per-class IoU; NaN when the class is absent from both maps."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    keep = np.ones(pred.shape, bool) if valid is None else np.asarray(valid, bool)
    out = {}
    for c in classes:
        p, t = (pred == c) & keep, (truth == c) & keep
        union = np.count_nonzero(p | t)
        out[c] = float(np.count_nonzero(p & t) / union) if union else float("nan")
    return out


def mean_iou(scores: dict[int, float]) -> float:
    vals = [v for v in scores.values() if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass(frozen=True)
class EpochRecord:
    train_loss: float
    val_loss: float
    val_iou: float


def select_checkpoints(history, iou_slack: float = 0.05) -> tuple[int, int]:
    """(e_min_val, e_min_train) as 0-based epoch indices."""
    history = list(history)
    if not history:
        raise ValueError("empty training history")
    e_val = min(range(len(history)), key=lambda e: (history[e].val_loss, -history[e].val_iou, e))
    best_iou = max(h.val_iou for h in history)
    ok = [e for e, h in enumerate(history) if h.val_iou >= best_iou - iou_slack]
    if not ok:
        warnings.warn("no epoch within the IoU slack; using the min-val epoch", stacklevel=2)
        return e_val, e_val
    e_train = min(ok, key=lambda e: (history[e].train_loss, e))
    return e_val, e_train


# --- toy single-view predictor and training strategies --------------------------------------

@dataclass
class ToyPredictor:
    """Per-pixel two-layer network: scores = W2 tanh(W1 x + b1) + b2."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, n_features: int, n_hidden: int = 8,
             n_classes: int = N_CLASSES) -> "ToyPredictor":
        return cls(rng.normal(0, 1.0 / math.sqrt(n_features), (n_hidden, n_features)),
                   np.zeros(n_hidden),
                   rng.normal(0, 1.0 / math.sqrt(n_hidden), (n_classes, n_hidden)),
                   np.zeros(n_classes))

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self) -> "ToyPredictor":
        return ToyPredictor(*(p.copy() for p in self.params().values()))

    def forward(self, x):
        """x: (F, H, W) -> scores (C, H, W) and a cache for ``backward``."""
        a = np.einsum("kf,fhw->khw", self.W1, x) + self.b1[:, None, None]
        z = np.tanh(a)
        s = np.einsum("ck,khw->chw", self.W2, z) + self.b2[:, None, None]
        return s, (x, z)

    def backward(self, cache, ds) -> dict[str, np.ndarray]:
        x, z = cache
        dz = np.einsum("ck,chw->khw", self.W2, ds)
        da = dz * (1 - z * z)
        return {"W1": np.einsum("khw,fhw->kf", da, x), "b1": da.sum(axis=(1, 2)),
                "W2": np.einsum("chw,khw->ck", ds, z), "b2": ds.sum(axis=(1, 2))}


@dataclass
class WindowSample:
    """One ground window: per-view features on the ortho grid plus labels."""

    features: np.ndarray       # (M, F, H, W), absent views zero
    present: np.ndarray        # (M,) bool
    gt: GroundTruthWindow


class Strategy(enum.Enum):
    SV_TRAIN = "sv"
    MV_TRAIN_I = "mv1"
    MV_TRAIN_II = "mv2"
    MV_TRAIN_III = "mv3"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.5
    sv_lr_scale: float = 0.1       # MV TRAIN-II fine-tuning of the pretrained predictor
    subset_size: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    variant: Variant = Variant.MV_B
    iou_slack: float = 0.05
    seed: int = 0


def _window_pass(pred: ToyPredictor, fw: FusionWeights, sample: WindowSample,
                 views, cfg: LossConfig, need_grad=True):
    m = sample.features.shape[0]
    present = np.zeros(m, bool)
    present[views] = True
    scores = np.zeros((m, fw_classes(pred)) + sample.gt.labels.shape)
    caches = {}
    for i in views:
        scores[i], caches[i] = pred.forward(sample.features[i])
    stack = ViewStack(scores, present)
    res = total_loss(stack, fw, sample.gt, cfg)
    if not need_grad:
        return res.value, None, None
    grads = {k: np.zeros_like(v) for k, v in pred.params().items()}
    for i in views:
        for k, g in pred.backward(caches[i], res.grad_scores[i]).items():
            grads[k] += g
    return res.value, grads, res


def fw_classes(pred: ToyPredictor) -> int:
    return pred.W2.shape[0]


def _sv_batches(samples):
    for s in samples:
        for i in np.flatnonzero(s.present):
            yield s, [int(i)]


def _mv_batches(samples, q, seed):
    for k, s in enumerate(samples):
        for sub in split_subsets(np.flatnonzero(s.present).tolist(), q, seed + k):
            yield s, sub


def predict_views(pred: ToyPredictor, sample: WindowSample):
    """Per-view class maps (M, H, W) of the present views (absent views -1)."""
    out = np.full((sample.features.shape[0],) + sample.gt.labels.shape, -1, np.int64)
    for i in np.flatnonzero(sample.present):
        s, _ = pred.forward(sample.features[i])
        out[i] = np.argmax(s, axis=0)
    return out


def predict_fused(pred: ToyPredictor, fw: FusionWeights, sample: WindowSample):
    """Inference with all views of the window in one stack."""
    m = sample.features.shape[0]
    scores = np.zeros((m, fw_classes(pred)) + sample.gt.labels.shape)
    for i in np.flatnonzero(sample.present):
        scores[i], _ = pred.forward(sample.features[i])
    fused, _ = fuse(ViewStack(scores, sample.present.copy()), fw)
    return np.argmax(fused, axis=0)


def vote_predict(pred: ToyPredictor, sample: WindowSample):
    maps = predict_views(pred, sample)
    visible = (maps >= 0) & ~sample.gt.masks
    return majority_vote(np.where(maps >= 0, maps, 0), visible)[0]


@dataclass
class TrainResult:
    predictor: ToyPredictor
    fusion: FusionWeights
    history: list[EpochRecord]
    e_min_val: int
    e_min_train: int
    checkpoints: dict = field(default_factory=dict)


def _evaluate(pred, fw, samples, cfg: LossConfig, fused: bool):
    loss, n_pts = 0.0, 0
    ious = []
    for s in samples:
        views = [int(i) for i in np.flatnonzero(s.present)]
        if not views:
            continue
        v, _, _ = _window_pass(pred, fw, s, views, cfg, need_grad=False)
        loss += v
        n_pts += s.gt.labels.size
        lab = predict_fused(pred, fw, s) if fused else vote_predict(pred, s)
        ious.append(mean_iou(iou(lab, s.gt.labels, classes=(1, 2))))
    return loss / max(n_pts, 1), float(np.nanmean(ious)) if ious else float("nan")


def train(strategy: Strategy, train_set, val_set, cfg: TrainConfig,
          predictor: ToyPredictor | None = None, fusion: FusionWeights | None = None,
          n_features: int | None = None, lr_hook=None) -> TrainResult:
    """Gradient-descent training under one of the single/multi-view strategies.

    MV TRAIN-I and -II start from an SV-trained predictor (trained here when
    none is supplied); -I freezes it and uses alpha = 0, -II fine-tunes it at
    ``sv_lr_scale`` times the learning rate; -III trains everything from scratch.
    ``lr_hook(epoch, lr) -> lr`` can reshape the schedule.
    """
    rng = np.random.default_rng(cfg.seed)
    m = train_set[0].features.shape[0]
    nf = n_features or train_set[0].features.shape[1]
    if strategy in (Strategy.MV_TRAIN_I, Strategy.MV_TRAIN_II) and predictor is None:
        predictor = train(Strategy.SV_TRAIN, train_set, val_set, cfg, n_features=nf,
                          lr_hook=lr_hook).predictor
    pred = predictor.copy() if predictor is not None else ToyPredictor.init(rng, nf)
    fw = fusion.copy() if fusion is not None else FusionWeights.init(cfg.variant, m,
                                                                     fw_classes(pred))
    if strategy is Strategy.SV_TRAIN:
        loss_cfg = LossConfig(alpha=1.0, beta=0.0)
        freeze_sv, freeze_fusion, sv_scale = False, True, 1.0
    elif strategy is Strategy.MV_TRAIN_I:
        loss_cfg = LossConfig(alpha=0.0, beta=1.0)
        freeze_sv, freeze_fusion, sv_scale = True, False, 0.0
    elif strategy is Strategy.MV_TRAIN_II:
        loss_cfg = LossConfig(alpha=cfg.alpha, beta=cfg.beta)
        freeze_sv, freeze_fusion, sv_scale = False, False, cfg.sv_lr_scale
    else:
        loss_cfg = LossConfig(alpha=cfg.alpha, beta=cfg.beta)
        freeze_sv, freeze_fusion, sv_scale = False, False, 1.0

    history, snaps = [], []
    for epoch in range(cfg.epochs):
        lr = cfg.lr if lr_hook is None else lr_hook(epoch, cfg.lr)
        batches = (_sv_batches(train_set) if strategy is Strategy.SV_TRAIN
                   else _mv_batches(train_set, cfg.subset_size, cfg.seed + 1000 * epoch))
        tot, pts = 0.0, 0
        for sample, views in batches:
            value, grads, res = _window_pass(pred, fw, sample, views, loss_cfg)
            npt = sample.gt.labels.size
            tot += value
            pts += npt
            if not freeze_sv:
                for k, p in pred.params().items():
                    p -= lr * sv_scale * grads[k] / npt
            if not freeze_fusion:
                fw.weights -= lr * res.grad_weights / npt
                fw.bias -= lr * res.grad_bias / npt
        fused_eval = strategy is not Strategy.SV_TRAIN
        val_loss, val_iou = _evaluate(pred, fw, val_set, loss_cfg, fused_eval)
        history.append(EpochRecord(tot / max(pts, 1), val_loss, val_iou))
        snaps.append((pred.copy(), fw.copy()))
        log.debug("%s epoch %d: train %.5f val %.5f iou %.4f", strategy.value, epoch,
                  *history[-1].__dict__.values())
    e_val, e_train = select_checkpoints(history, cfg.iou_slack)
    return TrainResult(snaps[e_val][0], snaps[e_val][1], history, e_val, e_train,
                       {"min_val": snaps[e_val], "min_train": snaps[e_train]})
