"""Training objectives.

Reconstruction (color + spatial gradient), foreground sparsity, optical-
flow consistency (mapping + alpha), coarse-mask bootstrap with an
iteration gate, residual consistency across time (normalized cross-
correlation of edge patches plus a variance-smoothness term), residual
regularization toward the neutral element, alpha max-regularization, and
the weighted total with a per-term breakdown.

Conventions: squared norms sum over channels and average over batch
points; the NCC term is minimized as (1 - psi) + beta * var so it is
nonnegative and optimal at perfect positive correlation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError

BCE_CLAMP = 1e-7
NCC_STD_EPS = 1e-6
NCC_MIN_PIXELS = 2  # minimum unmasked patch pixels for usable statistics


@dataclass
class LossWeights:
    rgb: float = 5e-3
    grad: float = 1e-3
    sparsity: float = 1e-3
    flow_color: float = 5e-3
    flow_alpha: float = 2e-3
    bootstrap: float = 2e-3
    residual_consistency: float = 0.1
    residual_reg: float = 0.5
    alpha_reg: float = 0.1
    beta: float = 16.0
    patch_size: int = 3
    t2_samples: int = 15

    def __post_init__(self):
        for name in ("rgb", "grad", "sparsity", "flow_color", "flow_alpha",
                     "bootstrap", "residual_consistency", "residual_reg",
                     "alpha_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.patch_size % 2 != 1:
            raise ValueError("patch_size must be odd")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------


def loss_rgb(chat: Tensor, cbar: np.ndarray, weight: float) -> Tensor:
    d = ad.sub(chat, cbar)
    return ad.mul(ad.tmean(ad.tsum(ad.square(d), axis=1)), weight)


def loss_grad(dhat_x, dbar_x, valid_x, dhat_y, dbar_y, valid_y,
              weight: float) -> Tensor:
    """Forward-difference gradient matching; invalid offsets drop out."""
    total = None
    for dhat, dbar, valid in ((dhat_x, dbar_x, valid_x), (dhat_y, dbar_y, valid_y)):
        nv = float(valid.sum())
        if nv == 0:
            continue
        d = ad.sub(dhat, dbar)
        per_point = ad.tsum(ad.square(d), axis=1)
        term = ad.mul(ad.tsum(ad.mul(per_point, valid.astype(dbar.dtype))), 1.0 / nv)
        total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return ad.mul(total, weight)


def loss_sparsity(alphas: list, colors: list, weight: float) -> Tensor:
    """Invisible foreground should be black: sum_i ||(1-alpha_i) c_i||^2."""
    n_fg = len(colors) - 1
    total = None
    for i in range(n_fg):
        w = ad.reshape(ad.sub(1.0, alphas[i]), (-1, 1))
        term = ad.tmean(ad.tsum(ad.square(ad.mul(w, colors[i])), axis=1))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, weight)


def _euclid(d: Tensor) -> Tensor:
    # tiny floor keeps the sqrt differentiable when both points coincide
    return ad.sqrt(ad.add(ad.tsum(ad.square(d), axis=1), 1e-24))


def loss_flow_color(uv_p: list, uv_q: list, alphas_p: list,
                    valid: np.ndarray, weight: float) -> Tensor:
    """sum_i alpha_i(p) * ||M_i(p) - M_i(p')|| over valid correspondences."""
    nv = float(valid.sum())
    if nv == 0:
        return Tensor(np.zeros(()))
    vmask = valid.astype(uv_p[0].data.dtype)
    total = None
    for i in range(len(uv_p)):
        dist = _euclid(ad.sub(uv_p[i], uv_q[i]))
        term = ad.mul(alphas_p[i], dist)
        total = term if total is None else ad.add(total, term)
    return ad.mul(ad.tsum(ad.mul(total, vmask)), weight / nv)


def loss_flow_alpha(alphas_p: list, alphas_q: list, valid: np.ndarray,
                    weight: float) -> Tensor:
    nv = float(valid.sum())
    if nv == 0:
        return Tensor(np.zeros(()))
    vmask = valid.astype(alphas_p[0].data.dtype)
    total = None
    for i in range(len(alphas_p)):
        term = ad.absolute(ad.sub(alphas_p[i], alphas_q[i]))
        total = term if total is None else ad.add(total, term)
    return ad.mul(ad.tsum(ad.mul(total, vmask)), weight / nv)


def _bce(pred: Tensor, target: np.ndarray) -> Tensor:
    p = ad.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = np.asarray(target, dtype=p.data.dtype)
    return ad.sub(
        ad.mul(ad.mul(ad.log(p), t), -1.0),
        ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - t),
    )


def loss_bootstrap(alphas_fg: list, mask_values: np.ndarray,
                   mask_valid: np.ndarray, weight: float,
                   iteration: int, bootstrap_end: int) -> Tensor:
    """Per-foreground-layer BCE against the coarse mask, gated by iteration."""
    if iteration >= bootstrap_end:
        return Tensor(np.zeros(()))
    nv = float(mask_valid.sum())
    if nv == 0:
        return Tensor(np.zeros(()))
    vmask = mask_valid.astype(alphas_fg[0].data.dtype)
    total = None
    for i, alpha in enumerate(alphas_fg):
        bce = _bce(alpha, mask_values[:, i])
        term = ad.tsum(ad.mul(bce, vmask))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, weight / (nv * len(alphas_fg)))


def loss_residual_reg(residuals: list, neutral: float, weight: float) -> Tensor:
    total = None
    for ell in residuals:
        term = ad.tmean(ad.tsum(ad.square(ad.sub(ell, neutral)), axis=1))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, weight / len(residuals))


def loss_alpha_reg(alphas: list, weight: float) -> Tensor:
    """BCE(max_n alpha_n, 1): each pixel should commit to one layer."""
    stacked = ad.concat([ad.reshape(a, (-1, 1)) for a in alphas], axis=1)
    m = ad.tmax(stacked, axis=1)
    return ad.mul(ad.tmean(_bce(m, 1.0)), weight)


# -- residual consistency -------------------------------------------------------


def masked_ncc(ref: np.ndarray, probe: Tensor, mask: np.ndarray):
    """Normalized cross-correlation over masked patch values.

    ref: (S, K) constants (t1 branch, gradient-detached by construction).
    probe: (S, K) Tensor (t2 branch). mask: (S, K) in {0,1}.
    Returns (psi (S,), var_probe (S,), keep (S,) bool). Samples whose masked
    statistics are degenerate (too few pixels or ~zero spread) are dropped.
    """
    dtype = probe.data.dtype
    m = mask.astype(dtype)
    counts = m.sum(axis=1)
    safe = np.maximum(counts, 1.0)
    inv = (1.0 / safe).reshape(-1, 1)

    mu_ref = (ref * m).sum(axis=1, keepdims=True) * inv
    dref = (ref - mu_ref) * m
    var_ref = (dref * dref).sum(axis=1) / safe
    sd_ref = np.sqrt(var_ref)

    mu_probe = ad.reshape(ad.mul(ad.tsum(ad.mul(probe, m), axis=1), inv[:, 0]), (-1, 1))
    dprobe = ad.mul(ad.sub(probe, mu_probe), m)
    var_probe = ad.mul(ad.tsum(ad.square(dprobe), axis=1), 1.0 / safe)
    # 1e-30 keeps sqrt's backward finite at exactly-constant probes without
    # biasing kept samples (kept variance is > 1e-12 by the guard below)
    sd_probe = ad.sqrt(ad.add(var_probe, 1e-30))

    cov = ad.mul(ad.tsum(ad.mul(dprobe, dref), axis=1), 1.0 / safe)
    denom = ad.mul(sd_probe, sd_ref)
    denom_safe = ad.where(denom.data > 1e-30, denom, Tensor(np.ones_like(denom.data)))
    psi = ad.div(cov, denom_safe)

    keep = (
        (counts >= NCC_MIN_PIXELS * 3)
        & (sd_ref > NCC_STD_EPS)
        & (sd_probe.data > NCC_STD_EPS)
    )
    return psi, var_probe, keep


def loss_residual_consistency(ref: np.ndarray, probe: Tensor, mask: np.ndarray,
                              weights: LossWeights) -> tuple:
    """lambda * mean over kept samples of (1 - psi) + beta * var(probe)."""
    psi, var_probe, keep = masked_ncc(ref, probe, mask)
    nk = float(keep.sum())
    if nk == 0:
        return Tensor(np.zeros(())), 0
    k = keep.astype(probe.data.dtype)
    per = ad.add(ad.sub(1.0, psi), ad.mul(var_probe, weights.beta))
    total = ad.mul(ad.tsum(ad.mul(per, k)), weights.residual_consistency / nk)
    return total, int(nk)


# ---------------------------------------------------------------------------
# visibility index for the t2 masking rule
# ---------------------------------------------------------------------------


class VisibilityIndex:
    """Per-layer, per-frame occupancy of texture space.

    A texture point counts as visible at frame t if some pixel of frame t
    maps within 1.5 texels (at extraction resolution) of it with alpha >
    0.5. Built from cached per-frame uv/alpha maps on a coarse bitmap and
    refreshed periodically during training.
    """

    def __init__(self, num_layers: int, frame_count: int, bins: int = 128,
                 extraction_size: int = 256):
        self.bins = bins
        self.frame_count = frame_count
        self.dilate = max(1, int(np.ceil(1.5 * bins / extraction_size)))
        self.bitmaps = np.zeros(
            (num_layers, frame_count, bins, bins), dtype=bool
        )

    def _bin(self, uv: np.ndarray) -> np.ndarray:
        # uv in [-1,1] -> bin index
        idx = np.floor((uv * 0.5 + 0.5) * self.bins).astype(int)
        return np.clip(idx, 0, self.bins - 1)

    def update_frame(self, layer: int, frame: int, uv: np.ndarray,
                     alpha: np.ndarray):
        bmp = np.zeros((self.bins, self.bins), dtype=bool)
        sel = alpha > 0.5
        if sel.any():
            ij = self._bin(uv[sel])
            bmp[ij[:, 1], ij[:, 0]] = True
            d = self.dilate
            acc = bmp.copy()
            for dy in range(-d, d + 1):
                for dx in range(-d, d + 1):
                    if dx == 0 and dy == 0:
                        continue
                    acc |= np.roll(np.roll(bmp, dy, axis=0), dx, axis=1)
            bmp = acc
        self.bitmaps[layer, frame] = bmp

    def visible(self, layer: int, uv: np.ndarray, frames: np.ndarray) -> np.ndarray:
        ij = self._bin(uv)
        return self.bitmaps[layer, frames, ij[..., 1], ij[..., 0]]


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------


def format_loss_line(iteration: int, breakdown: dict) -> str:
    parts = [f"iter={iteration}"]
    parts += [f"{k}={v:.6g}" for k, v in breakdown.items()]
    return " ".join(parts)


def total_loss(model, batch, weights: LossWeights, iteration: int,
               bootstrap_end: int, vis_index: VisibilityIndex | None = None):
    """Weighted sum of all active terms plus a per-term breakdown.

    ``batch`` is a trainer.TrainingBatch. Non-finite terms abort with the
    term's name.
    """
    cfg = model.cfg
    L = cfg.num_layers
    B = len(batch.points)
    dtype = cfg.np_dtype()

    # one forward over [p, p+dx, p+dy] serves reconstruction and gradients
    stacked = np.concatenate(
        [batch.points, batch.points_dx, batch.points_dy], axis=0
    )
    out = model.forward(stacked.astype(dtype))
    chat = out["chat"]
    chat_p = chat[0:B]
    chat_dx = chat[B : 2 * B]
    chat_dy = chat[2 * B : 3 * B]

    terms = {}
    terms["rgb"] = loss_rgb(chat_p, batch.colors.astype(dtype), weights.rgb)
    terms["grad"] = loss_grad(
        ad.sub(chat_dx, chat_p), batch.grad_x.astype(dtype), batch.grad_x_valid,
        ad.sub(chat_dy, chat_p), batch.grad_y.astype(dtype), batch.grad_y_valid,
        weights.grad,
    )

    alphas_p = [out["alphas"][n][0:B] for n in range(L)]
    colors_p = [out["colors"][n][0:B] for n in range(L)]
    terms["sparsity"] = loss_sparsity(alphas_p, colors_p, weights.sparsity)

    # flow consistency: mapping + alpha at the corresponded points
    flow_pts = np.concatenate([batch.flow_fwd_points, batch.flow_bwd_points])
    uv_q_all = [model.map_uv(n, flow_pts.astype(dtype)) for n in range(L)]
    raw_q = model.alpha_raw(flow_pts.astype(dtype))
    alphas_q_all = _trainer_hierarchy(raw_q)
    uv_p = [out["uv"][n][0:B] for n in range(L)]
    fc = fa = None
    for sl, valid in ((slice(0, B), batch.flow_fwd_valid),
                      (slice(B, 2 * B), batch.flow_bwd_valid)):
        uv_q = [uv_q_all[n][sl] for n in range(L)]
        al_q = [alphas_q_all[n][sl] for n in range(L)]
        c = loss_flow_color(uv_p, uv_q, alphas_p, valid, weights.flow_color)
        a = loss_flow_alpha(alphas_p, al_q, valid, weights.flow_alpha)
        fc = c if fc is None else ad.add(fc, c)
        fa = a if fa is None else ad.add(fa, a)
    terms["flow_color"] = fc
    terms["flow_alpha"] = fa

    terms["bootstrap"] = loss_bootstrap(
        alphas_p[: cfg.num_foreground], batch.mask_values, batch.mask_valid,
        weights.bootstrap, iteration, bootstrap_end,
    )

    terms["alpha_reg"] = loss_alpha_reg(alphas_p, weights.alpha_reg)

    if cfg.residual_mode != "none":
        neutral = 1.0 if cfg.residual_mode == "multiplicative" else 0.0
        residuals_p = [out["residuals"][n][0:B] for n in range(L)]
        terms["residual_reg"] = loss_residual_reg(
            residuals_p, neutral, weights.residual_reg
        )
        rcon, _ = residual_consistency_from_patches(
            model, batch.patches, weights, vis_index
        )
        terms["residual_consistency"] = rcon

    total = None
    breakdown = {}
    for name, t in terms.items():
        v = float(t.data)
        if not np.isfinite(v):
            raise NumericError(f"loss term {name!r} is non-finite at iteration {iteration}")
        breakdown[name] = v
        total = t if total is None else ad.add(total, t)
    breakdown["total"] = float(total.data)
    return total, breakdown


def _trainer_hierarchy(raw: Tensor) -> list:
    from .model import hierarchy_alphas_t

    return hierarchy_alphas_t(raw)


def residual_consistency_from_patches(model, patches, weights: LossWeights,
                                      vis_index: VisibilityIndex | None):
    """Assemble the NCC loss from a sampled edge-patch batch.

    For every layer: map the patch pixels (no grad: the residual branch is
    detached from the mapping), evaluate the t1 reference residuals without
    grad, the t2 probes with grad, mask out texture points visible at t2,
    and correlate.
    """
    if patches is None or patches.count == 0:
        return Tensor(np.zeros(())), 0
    cfg = model.cfg
    dtype = cfg.np_dtype()
    P, K = patches.count, patches.pixels_per_patch
    T2 = patches.t2_times.shape[1]
    total = None
    kept = 0
    pts = patches.points.reshape(P * K, 3).astype(dtype)
    for n in range(cfg.num_layers):
        with ad.no_grad():
            uv = model.map_uv(n, pts).data  # detached by contract
            ref = model.residual_at(
                n, Tensor(uv), Tensor(pts[:, 2:3])
            ).data.reshape(P, K * 3)
        # probes: repeat uv for each t2
        uv_rep = np.repeat(uv.reshape(P, K, 2), T2, axis=0).reshape(-1, 2)
        t2 = np.repeat(
            patches.t2_times.astype(dtype).reshape(P * T2, 1), K, axis=0
        ).reshape(-1, 1)
        probe = model.residual_at(n, Tensor(uv_rep), Tensor(t2))
        probe = ad.reshape(probe, (P * T2, K * 3))
        ref_rep = np.repeat(ref, T2, axis=0)

        if vis_index is not None:
            frames = np.repeat(patches.t2_frames.reshape(P * T2), K)
            vis = vis_index.visible(n, uv_rep, frames).reshape(P * T2, K)
            mask = np.repeat(~vis, 3, axis=1).astype(dtype)
        else:
            mask = np.ones((P * T2, K * 3), dtype=dtype)

        term, nk = loss_residual_consistency(ref_rep, probe, mask, weights)
        kept += nk
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / cfg.num_layers), kept
