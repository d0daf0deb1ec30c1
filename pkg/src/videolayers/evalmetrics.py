"""Reconstruction and editing-consistency metrics.

Editing consistency is scored by tracking: a ground-truth track's first
visible point is mapped to texture space, then each frame's prediction is
the pixel whose mapped texture coordinate comes closest. If edits stick
to the right scene points, these predictions follow the ground truth.
Scores follow the point-tracking convention: thresholds {1,2,4,8,16} px
at 256x256-normalized resolution, visibility-aware Jaccard, and binary
occlusion accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataio import FlowField, TrackSet
from .errors import DataError, ShapeMismatchError
from .model import LayeredModel, hierarchy_alphas_t
from .trainer import to_norm, from_norm

THRESHOLDS_PX = (1.0, 2.0, 4.0, 8.0, 16.0)
NORMALIZED_SIZE = 256.0
OCCLUSION_TAU_TEXELS = 2.0
OCCLUSION_ALPHA = 0.5


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) over [0,1] images; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class MetricReport:
    average_jaccard: float
    position_accuracy: float
    occlusion_accuracy: float
    per_threshold_accuracy: dict
    per_threshold_jaccard: dict

    def __post_init__(self):
        for v in (self.average_jaccard, self.position_accuracy,
                  self.occlusion_accuracy):
            if not 0.0 <= v <= 1.0:
                raise DataError("metrics must lie in [0,1]")

    def to_dict(self) -> dict:
        return {
            "average_jaccard": self.average_jaccard,
            "position_accuracy": self.position_accuracy,
            "occlusion_accuracy": self.occlusion_accuracy,
            "per_threshold_accuracy": self.per_threshold_accuracy,
            "per_threshold_jaccard": self.per_threshold_jaccard,
        }


# ---------------------------------------------------------------------------
# texture-space tracking
# ---------------------------------------------------------------------------


def _map_layer(model, layer, pts, chunk=32768):
    with ad.no_grad():
        return np.concatenate([
            model.map_uv(layer, pts[s : s + chunk]).data
            for s in range(0, len(pts), chunk)
        ])


def _refine_argmin(model, layer, x0, y0, t, width, height, target_uv,
                   frame_count, dtype):
    """Two-stage local grid refinement around an integer argmin pixel."""
    best = (x0, y0)
    for half, step in ((1.0, 0.25), (0.25, 1.0 / 16.0)):
        deltas = np.arange(-half, half + step / 2, step)
        gx, gy = np.meshgrid(best[0] + deltas, best[1] + deltas)
        pts = np.stack([
            to_norm(np.clip(gx.ravel(), 0, width - 1), width),
            to_norm(np.clip(gy.ravel(), 0, height - 1), height),
            np.full(gx.size, to_norm(t, frame_count)),
        ], axis=1).astype(dtype)
        uv = _map_layer(model, layer, pts)
        d2 = ((uv - target_uv) ** 2).sum(axis=1)
        k = int(np.argmin(d2))
        best = (float(np.clip(gx.ravel()[k], 0, width - 1)),
                float(np.clip(gy.ravel()[k], 0, height - 1)))
        best_d = float(np.sqrt(d2[k]))
    return best[0], best[1], best_d


def track_via_texture(model: LayeredModel, gt: TrackSet, width: int,
                      height: int, frame_count: int, layer: int = 0,
                      extraction_size: int = 256) -> TrackSet:
    """Predict tracks by nearest mapped texture coordinate.

    Occlusion rule: predicted occluded when the best uv distance exceeds
    OCCLUSION_TAU_TEXELS texels at extraction resolution, or the layer's
    alpha at the predicted pixel is below OCCLUSION_ALPHA.
    """
    dtype = model.cfg.np_dtype()
    T, F = gt.visible.shape
    tau_uv = OCCLUSION_TAU_TEXELS * (2.0 / extraction_size)

    # base texture coordinates from each track's first visible frame
    target_uv = np.zeros((T, 2))
    skip = np.zeros(T, dtype=bool)
    for i in range(T):
        vis_frames = np.nonzero(gt.visible[i])[0]
        if len(vis_frames) == 0:
            skip[i] = True
            continue
        f0 = int(vis_frames[0])
        x, y = gt.xy[i, f0]
        p = np.array([[to_norm(x, width), to_norm(y, height),
                       to_norm(f0, frame_count)]], dtype=dtype)
        target_uv[i] = _map_layer(model, layer, p)[0]

    ys, xs = np.mgrid[0:height, 0:width]
    grid_xy = np.stack([xs.ravel(), ys.ravel()], axis=1)
    pred_xy = np.zeros((T, F, 2))
    pred_vis = np.zeros((T, F), dtype=bool)
    for f in range(F):
        pts = np.stack([
            to_norm(grid_xy[:, 0], width),
            to_norm(grid_xy[:, 1], height),
            np.full(len(grid_xy), to_norm(f, frame_count)),
        ], axis=1).astype(dtype)
        uv = _map_layer(model, layer, pts)
        for i in range(T):
            if skip[i]:
                continue
            d2 = ((uv - target_uv[i]) ** 2).sum(axis=1)
            k = int(np.argmin(d2))
            x, y, dist = _refine_argmin(
                model, layer, grid_xy[k, 0], grid_xy[k, 1], f, width, height,
                target_uv[i], frame_count, dtype,
            )
            pred_xy[i, f] = (x, y)
            p = np.array([[to_norm(x, width), to_norm(y, height),
                           to_norm(f, frame_count)]], dtype=dtype)
            with ad.no_grad():
                raw = model.alpha_raw(p)
                alpha = hierarchy_alphas_t(raw)[layer].data[0]
            pred_vis[i, f] = (dist <= tau_uv) and (alpha >= OCCLUSION_ALPHA)
    return TrackSet(pred_xy, pred_vis, width, height)


def flow_chain_track(flow: FlowField, gt: TrackSet, noise_px: float,
                     rng: np.random.Generator) -> TrackSet:
    """Baseline: chain per-frame flow from the first visible point, with
    per-step isotropic noise of the given magnitude (drift accumulates)."""
    T, F = gt.visible.shape
    W, H = gt.width, gt.height
    pred_xy = np.zeros((T, F, 2))
    pred_vis = np.zeros((T, F), dtype=bool)

    def sample_flow(field, x, y):
        xi = int(np.clip(round(x), 0, W - 1))
        yi = int(np.clip(round(y), 0, H - 1))
        return field[yi, xi]

    for i in range(T):
        vis_frames = np.nonzero(gt.visible[i])[0]
        if len(vis_frames) == 0:
            continue
        f0 = int(vis_frames[0])
        pred_xy[i, f0] = gt.xy[i, f0]
        pred_vis[i, f0] = True
        x, y = gt.xy[i, f0]
        for f in range(f0 + 1, F):
            u, v = sample_flow(flow.forward[f - 1], x, y)
            x, y = x + u + rng.normal(0, noise_px), y + v + rng.normal(0, noise_px)
            pred_xy[i, f] = (x, y)
            pred_vis[i, f] = 0 <= x < W and 0 <= y < H
        x, y = gt.xy[i, f0]
        for f in range(f0 - 1, -1, -1):
            u, v = sample_flow(flow.backward[f], x, y)
            x, y = x + u + rng.normal(0, noise_px), y + v + rng.normal(0, noise_px)
            pred_xy[i, f] = (x, y)
            pred_vis[i, f] = 0 <= x < W and 0 <= y < H
    return TrackSet(pred_xy, pred_vis, W, H)


# ---------------------------------------------------------------------------
# TAP-Vid-style scoring
# ---------------------------------------------------------------------------


def tapvid_metrics(pred: TrackSet, gt: TrackSet) -> MetricReport:
    if pred.visible.shape != gt.visible.shape:
        raise ShapeMismatchError("pred/gt track sets differ in shape")
    if (gt.width, gt.height) != (pred.width, pred.height):
        raise ShapeMismatchError("pred/gt resolutions differ")
    sx = NORMALIZED_SIZE / gt.width
    sy = NORMALIZED_SIZE / gt.height
    d = np.sqrt(
        ((pred.xy[..., 0] - gt.xy[..., 0]) * sx) ** 2
        + ((pred.xy[..., 1] - gt.xy[..., 1]) * sy) ** 2
    )
    gt_vis = gt.visible
    pr_vis = pred.visible
    acc = {}
    jac = {}
    for thr in THRESHOLDS_PX:
        within = d <= thr
        n_vis = gt_vis.sum()
        acc[thr] = float((within & gt_vis).sum() / n_vis) if n_vis else 0.0
        tp = float((gt_vis & pr_vis & within).sum())
        fp = float((pr_vis & (~gt_vis | ~within)).sum())
        fn = float((gt_vis & (~pr_vis | ~within)).sum())
        denom = tp + fp + fn
        jac[thr] = tp / denom if denom else 1.0
    oa = float((pr_vis == gt_vis).mean())
    return MetricReport(
        average_jaccard=float(np.mean(list(jac.values()))),
        position_accuracy=float(np.mean(list(acc.values()))),
        occlusion_accuracy=oa,
        per_threshold_accuracy={str(k): v for k, v in acc.items()},
        per_threshold_jaccard={str(k): v for k, v in jac.items()},
    )
