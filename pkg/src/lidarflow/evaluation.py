"""Next-map prediction via backward warping, its metrics, and baselines.

F1 treats occupied cells as the positive class, micro-averaged over all
cells of all evaluated maps. Empty-map convention: both maps empty scores
1.0, exactly one empty scores 0.0. Precision at thresholds where nothing
is predicted counts as 1.0 so recall alone drives the curve down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .autodiff import DimensionError, ParameterError, Tensor, bilinear_warp, sigmoid
from .model import ModelParams, backbone_forward, forward_step_batch, init_hidden, stack_maps
from .sim import SequenceSample

DEFAULT_THRESHOLD = 0.4


class UndefinedResultError(ValueError):
    """A metric was asked for on an empty domain (e.g. no masked cells)."""


@dataclass
class PredictionResult:
    soft_map: np.ndarray
    binary_map: np.ndarray
    threshold: float


def warp_map(source: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Plain (tape-free) bilinear warp of one (H, W) map by a (2, H, W) flow."""
    out = bilinear_warp(Tensor(source[None, None].astype(np.float64)), Tensor(flow[None].astype(np.float64)))
    return out.data[0, 0]


def predict_next(occupancy: np.ndarray, backward_flow: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> PredictionResult:
    """Warp the current map along the backward flow and binarize."""
    soft = warp_map(occupancy, backward_flow)
    return PredictionResult(soft, (soft > threshold).astype(np.float64), threshold)


def persistence_baseline(occupancy: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> PredictionResult:
    """Predicts that nothing moves."""
    soft = occupancy.astype(np.float64).copy()
    return PredictionResult(soft, (soft > threshold).astype(np.float64), threshold)


# ---------------------------------------------------------------------------
# metrics


def _counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    p = pred > 0.5
    g = gt > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0  # both maps empty: a perfect (vacuous) prediction
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def f1_score(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise DimensionError("rows/cols", gt.shape, pred.shape, "f1_score")
    return f1_from_counts(*_counts(pred, gt))


@dataclass
class PrCurve:
    points: list  # (threshold, precision, recall), thresholds ascending
    f1_best: float = 0.0

    def at(self, threshold: float) -> tuple[float, float]:
        for t, p, r in self.points:
            if abs(t - threshold) < 1e-12:
                return p, r
        raise ParameterError(f"threshold {threshold} not on the curve grid")


def pr_curve(soft_maps: list, gts: list, thresholds=None) -> PrCurve:
    """Micro-averaged precision/recall over all cells of all maps."""
    if len(soft_maps) != len(gts):
        raise ParameterError(f"{len(soft_maps)} soft maps against {len(gts)} ground truths")
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 101)
    soft = np.concatenate([np.asarray(m).ravel() for m in soft_maps])
    gt = np.concatenate([np.asarray(g).ravel() for g in gts]) > 0.5
    points = []
    f1_best = 0.0
    for t in thresholds:
        pred = soft > t
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        precision = tp / (tp + fp) if (tp + fp) else 1.0
        recall = tp / (tp + fn) if (tp + fn) else 1.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        f1_best = max(f1_best, f1)
        points.append((float(t), precision, recall))
    return PrCurve(points, f1_best)


def flow_epe(pred_flow: np.ndarray, gt_flow: np.ndarray) -> float:
    """Mean endpoint error in cells, over cells where the ground truth is defined."""
    if pred_flow.shape != gt_flow.shape:
        raise DimensionError("rows/cols", gt_flow.shape, pred_flow.shape, "flow_epe")
    mask = np.isfinite(gt_flow).all(axis=0)
    if not mask.any():
        raise UndefinedResultError("ground-truth flow is undefined everywhere")
    diff = pred_flow[:, mask] - gt_flow[:, mask]
    return float(np.sqrt((diff**2).sum(axis=0)).mean())


# ---------------------------------------------------------------------------
# direct prediction baseline


def direct_head_rollout(frames: list, params: ModelParams) -> np.ndarray:
    """Per-frame occupancy probabilities from the direct (sigmoid) head."""
    if params.kind != "direct":
        raise ParameterError("direct_head needs direct-head parameters")
    rows, cols = frames[0].occupancy.shape
    dtype = params.conv0_w.dtype
    hidden = init_hidden(rows, cols, channels=params.hidden_channels, dtype=dtype)
    probs = []
    for fr in frames:
        x = stack_maps(fr.occupancy, fr.visibility, dtype=dtype)
        logits, hidden = backbone_forward(x, hidden, params)
        probs.append(sigmoid(logits).data[0, 0])
    return np.stack(probs)


def direct_head_baseline(frames: list, params_direct: ModelParams) -> np.ndarray:
    """Soft next-map prediction after feeding the whole sequence."""
    return direct_head_rollout(frames, params_direct)[-1]


# ---------------------------------------------------------------------------
# sequence evaluation


@dataclass
class EvalResult:
    f1: float
    f1_visible: float
    epe: float | None
    soft_maps: list
    gt_maps: list
    persistence_f1: float

    def curve(self, thresholds=None) -> PrCurve:
        return pr_curve(self.soft_maps, self.gt_maps, thresholds)


def rollout_flow(sample: SequenceSample, params: ModelParams, warmup_frames: int = 10):
    """Predictions for steps warmup..T-1 of one sequence.

    Returns (soft predictions, target maps, predicted backward flows,
    target visibilities); the step at T-1 targets the held-out next frame.
    """
    frames = sample.frames
    t_len = len(frames)
    rows, cols = frames[0].occupancy.shape
    dtype = params.conv0_w.dtype
    hidden = init_hidden(rows, cols, channels=params.hidden_channels, dtype=dtype)
    softs, targets, flows, vis = [], [], [], []
    for t in range(t_len):
        x = stack_maps(frames[t].occupancy, frames[t].visibility, dtype=dtype)
        prediction, hidden = forward_step_batch(x, hidden, params)
        if t < warmup_frames:
            continue
        target = frames[t + 1] if t + 1 < t_len else sample.gt_next
        flow = prediction.backward.data[0].astype(np.float64)
        softs.append(warp_map(frames[t].occupancy, flow))
        targets.append(target.occupancy)
        flows.append(flow)
        vis.append(target.visibility)
    return np.stack(softs), np.stack(targets), np.stack(flows), np.stack(vis)


def evaluate_flow_model(
    dataset: list,
    params: ModelParams,
    threshold: float = DEFAULT_THRESHOLD,
    warmup_frames: int = 10,
) -> EvalResult:
    """Micro-averaged prediction quality of the flow model over a dataset."""
    tp = fp = fn = 0
    tpv = fpv = fnv = 0
    ptp = pfp = pfn = 0
    epe_sum, epe_cells = 0.0, 0
    soft_all, gt_all = [], []
    for sample in dataset:
        softs, targets, flows, vis = rollout_flow(sample, params, warmup_frames)
        for k in range(softs.shape[0]):
            pred = (softs[k] > threshold).astype(np.float64)
            a, b, c = _counts(pred, targets[k])
            tp, fp, fn = tp + a, fp + b, fn + c
            mask = vis[k] > 0.5
            a, b, c = _counts(pred[mask], targets[k][mask])
            tpv, fpv, fnv = tpv + a, fpv + b, fnv + c
            soft_all.append(softs[k])
            gt_all.append(targets[k])
        # persistence predicts each supervised target with its own frame
        frames = sample.frames
        for t in range(warmup_frames, len(frames)):
            target = frames[t + 1] if t + 1 < len(frames) else sample.gt_next
            a, b, c = _counts(frames[t].occupancy, target.occupancy)
            ptp, pfp, pfn = ptp + a, pfp + b, pfn + c
        if sample.gt_flow_backward:
            for k, t in enumerate(range(warmup_frames, len(frames))):
                gt = sample.gt_flow_backward[t]
                mask = np.isfinite(gt).all(axis=0)
                if not mask.any():
                    continue
                diff = flows[k][:, mask] - gt[:, mask]
                epe_sum += float(np.sqrt((diff**2).sum(axis=0)).sum())
                epe_cells += int(mask.sum())
    return EvalResult(
        f1=f1_from_counts(tp, fp, fn),
        f1_visible=f1_from_counts(tpv, fpv, fnv),
        epe=(epe_sum / epe_cells) if epe_cells else None,
        soft_maps=soft_all,
        gt_maps=gt_all,
        persistence_f1=f1_from_counts(ptp, pfp, pfn),
    )


# ---------------------------------------------------------------------------
# visualization


def flow_to_color(flow: np.ndarray, max_flow: float = 5.0) -> np.ndarray:
    """RGB image of a (2, H, W) flow: hue encodes direction, saturation
    magnitude; zero flow is white."""
    if not np.isfinite(flow).all():
        raise ParameterError("flow_to_color needs finite flow values")
    dx, dy = flow[0], flow[1]
    magnitude = np.hypot(dx, dy)
    hue = (np.arctan2(dy, dx) / (2.0 * math.pi)) % 1.0
    saturation = np.clip(magnitude / max_flow, 0.0, 1.0)
    hsv = np.stack((hue, saturation, np.ones_like(hue)), axis=-1)
    return (hsv_to_rgb(hsv) * 255.0).round().astype(np.uint8)


def color_wheel_legend(size: int = 101, max_flow: float = 1.0) -> np.ndarray:
    """Radial legend image for the flow color convention."""
    half = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    flow = np.stack(((xs - half) / half * max_flow, (ys - half) / half * max_flow))
    return flow_to_color(flow, max_flow=max_flow)


def overlay_image(pred_binary: np.ndarray, gt_binary: np.ndarray) -> np.ndarray:
    """Prediction in the red channel, ground truth in green; correct cells
    turn yellow."""
    h, w = gt_binary.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[..., 0] = (pred_binary > 0.5) * 255
    img[..., 1] = (gt_binary > 0.5) * 255
    return img
