"""Sampling, optimization, staged training, checkpointing, gradcheck.

Training runs pretraining (mapping nets regressed toward a scaled
identity), then the main loop with the coarse-mask bootstrap active for
an initial fraction of iterations. Everything is driven by one seeded
generator in a fixed order, so a fixed seed and fixed data give a
bit-identical loss trajectory and final checkpoint.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import encoding as enc
from . import losses as ls
from .autodiff import Tensor
from .dataio import FlowField, MaskSequence, SyntheticScene, VideoVolume
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    NumericError,
    ShapeMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .model import LayeredModel, ModelConfig, MlpSpec, hierarchy_alphas_t

CHECKPOINT_MAGIC = b"VLCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    points_per_iter: int = 10000
    iterations: int = 50000
    bootstrap_end: float = 0.1      # fraction of iterations
    pretrain_iters: int = 500
    pretrain_points: int = 4096
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_at: float = 0.8        # fraction of iterations
    beta1: float = 0.9
    beta2: float = 0.99
    eps_mlp: float = 1e-8
    eps_table: float = 1e-15
    seed: int = 0
    patches_per_iter: int = 32
    vis_refresh_every: int = 250
    vis_bins: int = 128
    extraction_size: int = 256
    log_every: int = 50
    eval_every: int = 1000
    checkpoint_every: int = 0       # 0: only the final checkpoint
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)

    def __post_init__(self):
        if not 0.0 <= self.bootstrap_end <= 1.0:
            raise ConfigError("bootstrap_end must be a fraction in [0,1]")
        if self.pretrain_iters >= self.iterations:
            raise ConfigError("pretrain_iters must be < iterations")

    @property
    def bootstrap_end_iter(self) -> int:
        return int(round(self.bootstrap_end * self.iterations))

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        if isinstance(d.get("weights"), dict):
            d["weights"] = ls.LossWeights.from_dict(d["weights"])
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: fits a 96x96x24 scene on a small CPU box."""
        model = ModelConfig(
            mapping_mlp=MlpSpec(64, 4),
            texture_mlp=MlpSpec(64, 2),
            residual_mlp=MlpSpec(64, 2),
            alpha_mlp=MlpSpec(64, 2),
            dtype="float32",
        )
        cfg = cls(
            points_per_iter=2048,
            iterations=5000,
            pretrain_iters=400,
            pretrain_points=2048,
            patches_per_iter=16,
            model=model,
        )
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg


@dataclass
class TrainData:
    video: VideoVolume
    flow: FlowField
    masks: MaskSequence | None

    @classmethod
    def from_scene(cls, scene: SyntheticScene) -> "TrainData":
        return cls(scene.video, scene.flow, scene.masks)


# ---------------------------------------------------------------------------
# coordinate helpers
# ---------------------------------------------------------------------------


def to_norm(idx, size):
    """Pixel/frame index -> [-1,1] (size 1 collapses to 0)."""
    if size <= 1:
        return np.zeros_like(np.asarray(idx, dtype=np.float64))
    return 2.0 * np.asarray(idx, dtype=np.float64) / (size - 1) - 1.0


def from_norm(x, size):
    return (np.asarray(x, dtype=np.float64) + 1.0) * 0.5 * (size - 1)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class PatchBatch:
    points: np.ndarray      # (P, K, 3) normalized, all pixels at t1
    t1_frames: np.ndarray   # (P,)
    centers: np.ndarray     # (P, 2) integer pixel (x, y)
    t2_frames: np.ndarray   # (P, T2)
    t2_times: np.ndarray    # (P, T2) normalized

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def pixels_per_patch(self) -> int:
        return self.points.shape[1]


@dataclass
class TrainingBatch:
    points: np.ndarray
    points_dx: np.ndarray
    points_dy: np.ndarray
    colors: np.ndarray
    grad_x: np.ndarray
    grad_y: np.ndarray
    grad_x_valid: np.ndarray
    grad_y_valid: np.ndarray
    flow_fwd_points: np.ndarray
    flow_bwd_points: np.ndarray
    flow_fwd_valid: np.ndarray
    flow_bwd_valid: np.ndarray
    mask_values: np.ndarray
    mask_valid: np.ndarray
    patches: PatchBatch | None


def sample_batch(data: TrainData, rng: np.random.Generator, count: int,
                 num_foreground: int) -> TrainingBatch:
    video = data.video
    F, H, W = video.frame_count, video.height, video.width
    if F == 0 or H == 0 or W == 0:
        raise ConfigError("empty video")
    pf = rng.integers(0, F, size=count)
    py = rng.integers(0, H, size=count)
    px = rng.integers(0, W, size=count)
    frames = video.frames
    colors = frames[pf, py, px]

    points = np.stack([to_norm(px, W), to_norm(py, H), to_norm(pf, F)], axis=1)

    gxv = px + 1 < W
    gyv = py + 1 < H
    pxp = np.minimum(px + 1, W - 1)
    pyp = np.minimum(py + 1, H - 1)
    grad_x = frames[pf, py, pxp] - colors
    grad_y = frames[pf, pyp, px] - colors
    points_dx = points.copy()
    points_dx[gxv, 0] = to_norm(pxp[gxv], W)
    points_dy = points.copy()
    points_dy[gyv, 1] = to_norm(pyp[gyv], H)

    # flow correspondences in the adjacent frames
    fwd_pts = points.copy()
    fwd_valid = np.zeros(count, dtype=bool)
    has_next = pf < F - 1
    if has_next.any():
        i = np.nonzero(has_next)[0]
        fl = data.flow.forward[pf[i], py[i], px[i]]
        tx = px[i] + fl[:, 0]
        ty = py[i] + fl[:, 1]
        ok = data.flow.forward_valid[pf[i], py[i], px[i]]
        ok &= (tx >= 0) & (tx <= W - 1) & (ty >= 0) & (ty <= H - 1)
        j = i[ok]
        fwd_pts[j, 0] = to_norm(tx[ok], W)
        fwd_pts[j, 1] = to_norm(ty[ok], H)
        fwd_pts[j, 2] = to_norm(pf[j] + 1, F)
        fwd_valid[j] = True

    bwd_pts = points.copy()
    bwd_valid = np.zeros(count, dtype=bool)
    has_prev = pf > 0
    if has_prev.any():
        i = np.nonzero(has_prev)[0]
        fl = data.flow.backward[pf[i] - 1, py[i], px[i]]
        tx = px[i] + fl[:, 0]
        ty = py[i] + fl[:, 1]
        ok = data.flow.backward_valid[pf[i] - 1, py[i], px[i]]
        ok &= (tx >= 0) & (tx <= W - 1) & (ty >= 0) & (ty <= H - 1)
        j = i[ok]
        bwd_pts[j, 0] = to_norm(tx[ok], W)
        bwd_pts[j, 1] = to_norm(ty[ok], H)
        bwd_pts[j, 2] = to_norm(pf[j] - 1, F)
        bwd_valid[j] = True

    if data.masks is not None:
        mask_values = data.masks.masks[pf, :, py, px].reshape(count, -1)
        mask_valid = np.ones(count, dtype=bool)
    else:
        mask_values = np.zeros((count, num_foreground))
        mask_valid = np.zeros(count, dtype=bool)

    return TrainingBatch(
        points=points, points_dx=points_dx, points_dy=points_dy,
        colors=colors, grad_x=grad_x, grad_y=grad_y,
        grad_x_valid=gxv, grad_y_valid=gyv,
        flow_fwd_points=fwd_pts, flow_bwd_points=bwd_pts,
        flow_fwd_valid=fwd_valid, flow_bwd_valid=bwd_valid,
        mask_values=mask_values, mask_valid=mask_valid,
        patches=None,
    )


class EdgeIndex:
    """Eligible residual-patch centers: strong-luminance-gradient pixels."""

    def __init__(self, video: VideoVolume, patch_size: int,
                 percentile: float = 90.0):
        k2 = patch_size // 2
        self.patch_size = patch_size
        self.centers = []  # per frame: (n_i, 2) int array of (x, y)
        lum = video.frames @ np.array([0.299, 0.587, 0.114])
        for f in range(video.frame_count):
            gy, gx = np.gradient(lum[f])
            mag = np.hypot(gx, gy)
            thr = np.percentile(mag, percentile)
            mask = mag > thr
            if k2:
                mask[:k2, :] = False
                mask[-k2:, :] = False
                mask[:, :k2] = False
                mask[:, -k2:] = False
            ys, xs = np.nonzero(mask)
            self.centers.append(np.stack([xs, ys], axis=1))
        self.frames_with_edges = [
            f for f, c in enumerate(self.centers) if len(c)
        ]


def sample_edge_patches(video: VideoVolume, rng: np.random.Generator,
                        edge_index: EdgeIndex, patch_count: int,
                        t2_samples: int) -> PatchBatch | None:
    F, H, W = video.frame_count, video.height, video.width
    usable = edge_index.frames_with_edges
    if not usable or patch_count == 0 or F < 2:
        return None
    k = edge_index.patch_size
    k2 = k // 2
    offs = np.stack(
        np.meshgrid(np.arange(-k2, k2 + 1), np.arange(-k2, k2 + 1)), axis=-1
    ).reshape(-1, 2)  # (K, 2) as (dx, dy)

    t1 = rng.choice(np.asarray(usable), size=patch_count, replace=True)
    centers = np.zeros((patch_count, 2), dtype=int)
    for i, f in enumerate(t1):
        cands = edge_index.centers[f]
        centers[i] = cands[rng.integers(0, len(cands))]

    pix = centers[:, None, :] + offs[None, :, :]  # (P, K, 2)
    K = pix.shape[1]
    pts = np.zeros((patch_count, K, 3))
    pts[..., 0] = to_norm(pix[..., 0], W)
    pts[..., 1] = to_norm(pix[..., 1], H)
    pts[..., 2] = to_norm(t1, F)[:, None]

    others = np.arange(F)
    t2 = np.zeros((patch_count, t2_samples), dtype=int)
    for i, f in enumerate(t1):
        pool = others[others != f]
        t2[i] = rng.choice(pool, size=t2_samples, replace=len(pool) < t2_samples)
    return PatchBatch(
        points=pts, t1_frames=t1, centers=centers,
        t2_frames=t2, t2_times=to_norm(t2, F),
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
              v: np.ndarray, step: int, lr: float, beta1: float,
              beta2: float, eps: float, group: str = "?"):
    """One bias-corrected Adam update, in place."""
    if not np.isfinite(grad).all():
        raise NumericError(f"non-finite gradient in parameter group {group!r}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


if enc._HAVE_NUMBA:
    from numba import njit as _njit

    @_njit(cache=True)
    def _nb_adam(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
        for i in range(p.size):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


class Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def eps_for(self, name: str) -> float:
        return self.cfg.eps_table if name.endswith("grid") else self.cfg.eps_mlp

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.cfg.beta1**self.step_count
        bc2 = 1.0 - self.cfg.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if enc._HAVE_NUMBA:
                if not np.isfinite(g.sum(dtype=np.float64)):
                    raise NumericError(
                        f"non-finite gradient in parameter group {name!r}"
                    )
                _nb_adam(
                    p.data.reshape(-1), g.reshape(-1),
                    self.m[name].reshape(-1), self.v[name].reshape(-1),
                    self.lr, self.cfg.beta1, self.cfg.beta2,
                    self.eps_for(name), bc1, bc2,
                )
            else:
                adam_step(
                    p.data, g, self.m[name], self.v[name], self.step_count,
                    self.lr, self.cfg.beta1, self.cfg.beta2,
                    self.eps_for(name), group=name,
                )

    def state_arrays(self) -> dict:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int):
        for k in self.params:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()
        self.step_count = step_count


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain_mappings(model: LayeredModel, cfg: TrainConfig,
                      rng: np.random.Generator):
    """Regress every mapping net toward (u,v) = s*(x,y): a near-identity
    start that keeps early texture lookups spatially coherent."""
    if cfg.pretrain_iters <= 0:
        return
    params = {
        k: p for k, p in model.param_groups().items() if k.startswith("mapping")
    }
    opt = Adam(params, cfg)
    s = model.cfg.uv_scale
    dtype = model.cfg.np_dtype()
    for _ in range(cfg.pretrain_iters):
        p = rng.uniform(-1, 1, size=(cfg.pretrain_points, 3)).astype(dtype)
        target = (s * p[:, :2]).astype(dtype)
        loss = None
        for n in range(model.cfg.num_layers):
            uv = model.map_uv(n, p)
            term = ad.tmean(ad.tsum(ad.square(ad.sub(uv, target)), axis=1))
            loss = term if loss is None else ad.add(loss, term)
        for t in params.values():
            t.grad = None
        loss.backward()
        opt.step()


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------


def refresh_visibility(model: LayeredModel, index: ls.VisibilityIndex,
                       width: int, height: int, stride: int = 2):
    ys, xs = np.mgrid[0:height:stride, 0:width:stride]
    xs = xs.ravel()
    ys = ys.ravel()
    dtype = model.cfg.np_dtype()
    L = model.cfg.num_layers
    for f in range(index.frame_count):
        pts = np.stack(
            [
                to_norm(xs, width),
                to_norm(ys, height),
                np.full(xs.shape, to_norm(f, index.frame_count)),
            ],
            axis=1,
        ).astype(dtype)
        with ad.no_grad():
            raw = model.alpha_raw(pts)
            alphas = hierarchy_alphas_t(raw)
            for n in range(L):
                uv = model.map_uv(n, pts).data
                index.update_frame(n, f, uv, alphas[n].data)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: LayeredModel
    metrics: list
    final_psnr: float
    checkpoint_path: Path | None


def evaluate_psnr(model: LayeredModel, video: VideoVolume,
                  chunk: int = 16384) -> float:
    from .evalmetrics import psnr
    from .renderer import reconstruct_video

    recon = reconstruct_video(
        model, video.width, video.height, video.frame_count, chunk=chunk
    )
    return psnr(recon, video.frames)


def train(cfg: TrainConfig, data: TrainData, out_dir=None,
          log_fn=None) -> TrainResult:
    """Full pipeline: pretrain -> bootstrapped -> free training."""
    if data.video.frame_count < 2:
        raise ConfigError("need at least two frames to train")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    model = LayeredModel(cfg.model, seed=cfg.seed)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    pretrain_mappings(model, cfg, rng)

    edge_index = EdgeIndex(data.video, cfg.weights.patch_size)
    vis = ls.VisibilityIndex(
        cfg.model.num_layers, data.video.frame_count,
        bins=cfg.vis_bins, extraction_size=cfg.extraction_size,
    )
    refresh_visibility(model, vis, data.video.width, data.video.height)

    params = model.param_groups()
    opt = Adam(params, cfg)
    metrics = []
    metrics_file = (out_dir / "metrics.log").open("w") if out_dir else None
    ckpt_path = out_dir / "checkpoint.vlck" if out_dir else None
    decay_at = int(cfg.lr_decay_at * cfg.iterations)
    t_start = time.perf_counter()

    def log(line):
        if metrics_file:
            metrics_file.write(line + "\n")
            metrics_file.flush()
        if log_fn:
            log_fn(line)

    try:
        for it in range(cfg.iterations):
            if it == decay_at:
                opt.lr = cfg.learning_rate * cfg.lr_decay_factor
            if cfg.vis_refresh_every and it and it % cfg.vis_refresh_every == 0:
                refresh_visibility(model, vis, data.video.width, data.video.height)
            batch = sample_batch(data, rng, cfg.points_per_iter,
                                 cfg.model.num_foreground)
            batch.patches = sample_edge_patches(
                data.video, rng, edge_index, cfg.patches_per_iter,
                cfg.weights.t2_samples,
            )
            try:
                loss, breakdown = ls.total_loss(
                    model, batch, cfg.weights, it, cfg.bootstrap_end_iter, vis
                )
                model.zero_grad()
                loss.backward()
                opt.step()
            except NumericError:
                if ckpt_path is not None and ckpt_path.exists():
                    log(f"iter={it} aborted=numeric (last checkpoint retained)")
                raise
            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                metrics.append({"iteration": it, **breakdown})
                log(ls.format_loss_line(it, breakdown))
            if cfg.eval_every and it and it % cfg.eval_every == 0:
                p = evaluate_psnr(model, data.video)
                metrics.append({"iteration": it, "psnr": p})
                log(f"iter={it} psnr={p:.3f}")
                if ckpt_path is not None and cfg.checkpoint_every:
                    save_checkpoint(ckpt_path, model, opt, it, cfg)
    finally:
        if metrics_file:
            metrics_file.close()

    final_psnr = evaluate_psnr(model, data.video)
    metrics.append({"iteration": cfg.iterations, "psnr": final_psnr})
    if out_dir is not None:
        save_checkpoint(ckpt_path, model, opt, cfg.iterations, cfg)
        with (out_dir / "metrics.log").open("a") as f:
            f.write(f"iter={cfg.iterations} psnr={final_psnr:.4f} "
                    f"wall={time.perf_counter() - t_start:.1f}\n")
    return TrainResult(model, metrics, final_psnr, ckpt_path)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_err: dict
    tolerance: float
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = []
        for name, err in self.max_rel_err.items():
            status = "FAIL" if name in dict(self.failures) else "ok"
            lines.append(f"{name}: max_rel_err={err:.3e} [{status}]")
        return "\n".join(lines)


def _pinned_loss(model, batch, weights, iteration, bootstrap_end, vis,
                 pins):
    """total_loss with the residual branch's uv inputs pinned to constants.

    Central differences over mapping parameters would otherwise see the
    loss change through the residual branch, which the analytic gradient
    excludes by the stop-gradient contract; pinning removes the path from
    both sides.
    """
    B = len(batch.points)
    dtype = model.cfg.np_dtype()
    stacked = np.concatenate([batch.points, batch.points_dx, batch.points_dy])
    out = model.forward(stacked.astype(dtype), residual_uv=pins["recon_uv"])
    chat = out["chat"]
    L = model.cfg.num_layers
    terms = []
    terms.append(ls.loss_rgb(chat[0:B], batch.colors.astype(dtype), weights.rgb))
    terms.append(ls.loss_grad(
        ad.sub(chat[B:2 * B], chat[0:B]), batch.grad_x.astype(dtype), batch.grad_x_valid,
        ad.sub(chat[2 * B:3 * B], chat[0:B]), batch.grad_y.astype(dtype), batch.grad_y_valid,
        weights.grad))
    alphas_p = [out["alphas"][n][0:B] for n in range(L)]
    colors_p = [out["colors"][n][0:B] for n in range(L)]
    terms.append(ls.loss_sparsity(alphas_p, colors_p, weights.sparsity))
    flow_pts = np.concatenate([batch.flow_fwd_points, batch.flow_bwd_points])
    uv_q_all = [model.map_uv(n, flow_pts.astype(dtype)) for n in range(L)]
    raw_q = model.alpha_raw(flow_pts.astype(dtype))
    alphas_q_all = hierarchy_alphas_t(raw_q)
    uv_p = [out["uv"][n][0:B] for n in range(L)]
    for sl, valid in ((slice(0, B), batch.flow_fwd_valid),
                      (slice(B, 2 * B), batch.flow_bwd_valid)):
        terms.append(ls.loss_flow_color(
            uv_p, [uv_q_all[n][sl] for n in range(L)], alphas_p, valid,
            weights.flow_color))
        terms.append(ls.loss_flow_alpha(
            alphas_p, [alphas_q_all[n][sl] for n in range(L)], valid,
            weights.flow_alpha))
    terms.append(ls.loss_bootstrap(
        alphas_p[: model.cfg.num_foreground], batch.mask_values,
        batch.mask_valid, weights.bootstrap, iteration, bootstrap_end))
    terms.append(ls.loss_alpha_reg(alphas_p, weights.alpha_reg))
    if model.cfg.residual_mode != "none":
        neutral = 1.0 if model.cfg.residual_mode == "multiplicative" else 0.0
        terms.append(ls.loss_residual_reg(
            [out["residuals"][n][0:B] for n in range(L)], neutral,
            weights.residual_reg))
        terms.append(_pinned_patch_consistency(model, batch.patches, weights,
                                               vis, pins["patch_uv"]))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _pinned_patch_consistency(model, patches, weights, vis, patch_uv):
    if patches is None or patches.count == 0:
        return Tensor(np.zeros(()))
    cfg = model.cfg
    dtype = cfg.np_dtype()
    P, K = patches.count, patches.pixels_per_patch
    T2 = patches.t2_times.shape[1]
    pts = patches.points.reshape(P * K, 3).astype(dtype)
    total = None
    for n in range(cfg.num_layers):
        uv = patch_uv[n]
        with ad.no_grad():
            ref = model.residual_at(
                n, Tensor(uv), Tensor(pts[:, 2:3])
            ).data.reshape(P, K * 3)
        uv_rep = np.repeat(uv.reshape(P, K, 2), T2, axis=0).reshape(-1, 2)
        t2 = np.repeat(
            patches.t2_times.astype(dtype).reshape(P * T2, 1), K, axis=0
        ).reshape(-1, 1)
        probe = ad.reshape(
            model.residual_at(n, Tensor(uv_rep), Tensor(t2)), (P * T2, K * 3)
        )
        ref_rep = np.repeat(ref, T2, axis=0)
        if vis is not None:
            frames = np.repeat(patches.t2_frames.reshape(P * T2), K)
            mask = np.repeat(
                ~vis.visible(n, uv_rep, frames).reshape(P * T2, K), 3, axis=1
            ).astype(dtype)
        else:
            mask = np.ones((P * T2, K * 3), dtype=dtype)
        term, _ = ls.loss_residual_consistency(ref_rep, probe, mask, weights)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / cfg.num_layers)


def _compute_pins(model, batch):
    dtype = model.cfg.np_dtype()
    stacked = np.concatenate([batch.points, batch.points_dx, batch.points_dy])
    with ad.no_grad():
        recon_uv = [
            model.map_uv(n, stacked.astype(dtype)).data.copy()
            for n in range(model.cfg.num_layers)
        ]
        patch_uv = None
        if batch.patches is not None and model.cfg.residual_mode != "none":
            pts = batch.patches.points.reshape(-1, 3).astype(dtype)
            patch_uv = [
                model.map_uv(n, pts).data.copy()
                for n in range(model.cfg.num_layers)
            ]
    return {"recon_uv": recon_uv, "patch_uv": patch_uv}


def gradcheck(model: LayeredModel, batch: TrainingBatch,
              weights: ls.LossWeights, tolerance: float = 1e-3,
              probes_per_group: int = 6, h: float = 1e-5,
              iteration: int = 0, bootstrap_end: int = 10**9,
              vis: ls.VisibilityIndex | None = None, seed: int = 0,
              corrupt_group: str | None = None) -> GradcheckReport:
    """Central finite differences vs analytic for every parameter group.

    Runs in double precision on the given batch. ``corrupt_group`` is a
    fault-injection hook for verifying that the harness catches wrong
    gradients.
    """
    if model.cfg.dtype != "float64":
        raise ConfigError("gradcheck requires a float64 model")
    pins = _compute_pins(model, batch)
    args = (model, batch, weights, iteration, bootstrap_end, vis, pins)
    loss = _pinned_loss(*args)
    model.zero_grad()
    loss.backward()
    params = model.param_groups()
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }
    if corrupt_group is not None:
        analytic[corrupt_group] = analytic[corrupt_group] + 0.05

    rng = np.random.default_rng(np.random.PCG64(seed))
    report_err = {}
    failures = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        k = min(probes_per_group, n)
        idxs = rng.choice(n, size=k, replace=False)
        worst = 0.0
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            with ad.no_grad():
                fp = float(_pinned_loss(*args).data)
            flat[i] = old - h
            with ad.no_grad():
                fm = float(_pinned_loss(*args).data)
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a), abs(fd))
            err = 0.0 if denom < 1e-10 else abs(a - fd) / denom
            worst = max(worst, err)
        report_err[name] = worst
        if worst >= tolerance:
            failures.append((name, worst))
    return GradcheckReport(report_err, tolerance, failures)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _collect_arrays(model: LayeredModel, opt: Adam | None) -> dict:
    arrays = {k: p.data for k, p in model.param_groups().items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    return arrays


def save_checkpoint(path, model: LayeredModel, opt: Adam | None,
                    iteration: int, cfg: TrainConfig | None = None):
    """Versioned little-endian container with a trailing CRC32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _collect_arrays(model, opt)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": cfg.to_dict() if cfg is not None else None,
        "iteration": int(iteration),
        "optimizer_step": int(opt.step_count) if opt is not None else None,
        "arrays": [
            {"name": k, "dtype": str(a.dtype), "shape": list(a.shape)}
            for k, a in arrays.items()
        ],
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(hdr))
    blob += hdr
    for k, a in arrays.items():
        blob += np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    path.write_bytes(bytes(blob))
    return path


def load_checkpoint(path, expect_foregrounds: int | None = None):
    """Returns (model, optimizer_arrays | None, iteration, header)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: too short for a checkpoint")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")
    (hdr_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + hdr_len > len(raw) - 4:
        raise TruncatedFileError(f"{path}: header exceeds the file")
    header = json.loads(raw[16 : 16 + hdr_len].decode())
    model_cfg = ModelConfig.from_dict(header["model_config"])
    if expect_foregrounds is not None and model_cfg.num_foreground != expect_foregrounds:
        raise ShapeMismatchError(
            f"{path}: checkpoint has {model_cfg.num_foreground} foreground "
            f"layers, expected {expect_foregrounds}"
        )
    model = LayeredModel(model_cfg, seed=0)
    ofs = 16 + hdr_len
    arrays = {}
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"])
        shape = tuple(meta["shape"])
        nbytes = dt.itemsize * int(np.prod(shape)) if shape else dt.itemsize
        chunk = raw[ofs : ofs + nbytes]
        if len(chunk) < nbytes:
            raise TruncatedFileError(f"{path}: array payload ends early")
        arrays[meta["name"]] = np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
        ofs += nbytes
    params = model.param_groups()
    for name, p in params.items():
        if name not in arrays:
            raise ShapeMismatchError(f"{path}: missing parameter group {name}")
        if arrays[name].shape != p.data.shape:
            raise ShapeMismatchError(
                f"{path}: group {name} has shape {arrays[name].shape}, "
                f"expected {p.data.shape}"
            )
        p.data = arrays[name]
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return model, (opt_arrays or None), header["iteration"], header
