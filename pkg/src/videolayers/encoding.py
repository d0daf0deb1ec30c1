"""Input encodings for the coordinate networks.

Two encodings: sinusoidal positional encoding (smooth, used by the mapping
networks) and multi-resolution hash grids (used by texture/residual/alpha
networks). Both are implemented as fused autodiff ops with analytic
gradients to the trainable tables and to the input coordinates.

Levels whose full vertex lattice fits in the table are addressed densely
(row-major, collision-free); finer levels hash vertex coordinates with
fixed per-dimension primes XOR-folded modulo the table size.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError

try:  # optional jit for the interpolation kernels; numpy path is equivalent
    if os.environ.get("VIDEOLAYERS_NO_NUMBA"):
        raise ImportError
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    njit = None
    prange = range
    _HAVE_NUMBA = False

# Fixed per-dimension hashing primes (documented contract: changing them
# invalidates every stored checkpoint).
HASH_PRIMES = (2654435761, 805459861, 3674653429)

TABLE_INIT_SCALE = 1e-4


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PositionalConfig:
    num_frequencies: int
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    def output_dim(self, input_dim: int) -> int:
        base = input_dim if self.include_input else 0
        return base + input_dim * 2 * self.num_frequencies


def positional_encode_array(x: np.ndarray, cfg: PositionalConfig) -> np.ndarray:
    """Forward-only sinusoidal lift: [x?, sin(2^k π x), cos(2^k π x)]_k."""
    x = np.asarray(x)
    if not np.isfinite(x).all():
        raise DomainError("positional_encode: non-finite input")
    parts = [x] if cfg.include_input else []
    for k in range(cfg.num_frequencies):
        arg = (2.0**k) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        return x[..., :0]
    return np.concatenate(parts, axis=-1)


def positional_encode(x, cfg: PositionalConfig) -> Tensor:
    """Autodiff positional encoding (analytic input gradient)."""
    xt = ad.as_tensor(x)
    y = positional_encode_array(xt.data, cfg)
    out = Tensor(y)
    if ad.grad_enabled() and xt.requires_grad:
        d = xt.data.shape[-1]

        def bw(g):
            gx = np.zeros_like(xt.data)
            ofs = 0
            if cfg.include_input:
                gx += g[..., :d]
                ofs = d
            for k in range(cfg.num_frequencies):
                w = (2.0**k) * np.pi
                arg = w * xt.data
                gx += g[..., ofs : ofs + d] * (w * np.cos(arg))
                ofs += d
                gx += g[..., ofs : ofs + d] * (-w * np.sin(arg))
                ofs += d
            xt.accumulate_grad(gx)

        ad._attach(out, (xt,), bw)
    return out


# ---------------------------------------------------------------------------
# hash grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HashGridConfig:
    input_dim: int
    levels: int
    features_per_level: int
    table_size_log2: int
    base_resolution: int
    growth_factor: float

    def __post_init__(self):
        if self.input_dim not in (2, 3):
            raise ValueError("input_dim must be 2 or 3")
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        if self.growth_factor <= 1.0:
            raise ValueError("growth_factor must be > 1")

    @property
    def table_rows(self) -> int:
        return 1 << self.table_size_log2

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth_factor**level))

    @property
    def resolutions(self) -> tuple:
        return tuple(self.level_resolution(l) for l in range(self.levels))

    def level_is_dense(self, level: int) -> bool:
        res = self.level_resolution(level)
        return (res + 1) ** self.input_dim <= self.table_rows


class HashGrid:
    """Trainable multi-resolution feature tables (one stacked Tensor)."""

    def __init__(self, cfg: HashGridConfig, tables: Tensor):
        self.cfg = cfg
        self.tables = tables  # (levels, 2^T, F)

    @classmethod
    def create(cls, cfg: HashGridConfig, rng: np.random.Generator, dtype=np.float64):
        tables = rng.uniform(
            -TABLE_INIT_SCALE,
            TABLE_INIT_SCALE,
            size=(cfg.levels, cfg.table_rows, cfg.features_per_level),
        ).astype(dtype)
        return cls(cfg, ad.parameter(tables))

    def encode(self, x) -> Tensor:
        return hash_grid_encode(self, x)


def hash_index(
    level_resolution: int, vertex: np.ndarray, table_size_log2: int
) -> np.ndarray:
    """Map integer lattice vertices to table slots.

    Dense row-major addressing whenever the whole lattice fits (injective on
    coarse levels); XOR-prime hashing otherwise. ``vertex`` is (..., d).
    """
    vertex = np.asarray(vertex, dtype=np.int64)
    d = vertex.shape[-1]
    rows = 1 << table_size_log2
    if (level_resolution + 1) ** d <= rows:
        idx = vertex[..., 0]
        stride = 1
        for k in range(1, d):
            stride *= level_resolution + 1
            idx = idx + vertex[..., k] * stride
        return idx
    h = vertex[..., 0] * HASH_PRIMES[0]
    for k in range(1, d):
        h = h ^ (vertex[..., k] * HASH_PRIMES[k])
    return h % rows


_CORNER_OFFSETS = {
    d: np.array(
        [[(c >> k) & 1 for k in range(d)] for c in range(1 << d)], dtype=np.int64
    )
    for d in (2, 3)
}


class _GridPlan:
    """Precomputed per-config constants for the fused multi-level kernels."""

    def __init__(self, cfg: HashGridConfig):
        d = cfg.input_dim
        self.resolutions = np.array(cfg.resolutions, dtype=np.int64)  # (L,)
        self.dense = np.array(
            [cfg.level_is_dense(l) for l in range(cfg.levels)]
        )
        # dense row-major strides per level; unused (0) on hashed levels
        strides = np.zeros((cfg.levels, d), dtype=np.int64)
        for l in range(cfg.levels):
            if self.dense[l]:
                r1 = self.resolutions[l] + 1
                strides[l] = [r1**k for k in range(d)]
        self.strides = strides
        self.primes = np.array(HASH_PRIMES[:d], dtype=np.int64)
        self.level_offsets = (
            np.arange(cfg.levels, dtype=np.int64) * cfg.table_rows
        )


_PLANS: dict = {}


def _plan(cfg: HashGridConfig) -> _GridPlan:
    plan = _PLANS.get(cfg)
    if plan is None:
        plan = _PLANS[cfg] = _GridPlan(cfg)
    return plan


if _HAVE_NUMBA:

    @njit(cache=True)
    def _nb_hash_fwd(x, resf, tflat, strides, dense, primes,
                     level_offsets, mask, F, out, glob, w, frac):
        n, d = x.shape
        L = resf.shape[0]
        C = 1 << d
        cell = np.empty(3, np.int64)  # serial kernel: safe scratch
        for i in range(n):
            for l in range(L):
                r = resf[l]
                for k in range(d):
                    fv = x[i, k] * r
                    cv = np.floor(fv)
                    if cv > r - 1.0:
                        cv = r - 1.0
                    cell[k] = np.int64(cv)
                    frac[i, l, k] = fv - cv
                for c in range(C):
                    if dense[l]:
                        idx = np.int64(0)
                        for k in range(d):
                            idx += (cell[k] + ((c >> k) & 1)) * strides[l, k]
                    else:
                        h = np.int64(0)
                        for k in range(d):
                            h ^= (cell[k] + ((c >> k) & 1)) * primes[k]
                        idx = h & mask
                    gidx = idx + level_offsets[l]
                    wc = frac[i, l, 0] if (c & 1) else (1.0 - frac[i, l, 0])
                    for k in range(1, d):
                        fv = frac[i, l, k]
                        wc *= fv if ((c >> k) & 1) else (1.0 - fv)
                    glob[i, l, c] = gidx
                    w[i, l, c] = wc
                    base = gidx * F
                    for q in range(F):
                        out[i, l * F + q] += wc * tflat[base + q]

    @njit(cache=True)
    def _nb_hash_bwd_tables(up, glob, w, F, table_grad):
        # serial scatter: deterministic accumulation order
        n = up.shape[0]
        L = up.shape[1]
        C = glob.shape[2]
        for i in range(n):
            for l in range(L):
                for c in range(C):
                    base = np.int64(glob[i, l, c]) * F
                    wc = w[i, l, c]
                    for q in range(F):
                        table_grad[base + q] += wc * up[i, l, q]

    @njit(cache=True)
    def _nb_hash_bwd_x(up, tflat, glob, frac, resf, F, x_grad):
        n = up.shape[0]
        L = up.shape[1]
        C = glob.shape[2]
        d = frac.shape[2]
        for i in range(n):
            for k in range(d):
                x_grad[i, k] = 0.0
            for l in range(L):
                r = resf[l]
                for c in range(C):
                    base = np.int64(glob[i, l, c]) * F
                    e = 0.0
                    for q in range(F):
                        e += tflat[base + q] * up[i, l, q]
                    for k in range(d):
                        m = e
                        for k2 in range(d):
                            if k2 == k:
                                continue
                            fv = frac[i, l, k2]
                            m *= fv if ((c >> k2) & 1) else (1.0 - fv)
                        if not (c >> k) & 1:
                            m = -m
                        x_grad[i, k] += m * r


def _hash_forward_nb(tables: np.ndarray, cfg: HashGridConfig, x: np.ndarray):
    plan = _plan(cfg)
    dtype = tables.dtype
    n = x.shape[0]
    d = cfg.input_dim
    F = cfg.features_per_level
    L = cfg.levels
    C = 1 << d
    out = np.zeros((n, L * F), dtype=dtype)
    glob = np.empty((n, L, C), dtype=np.int64)
    w = np.empty((n, L, C), dtype=dtype)
    frac = np.empty((n, L, d), dtype=dtype)
    _nb_hash_fwd(
        np.ascontiguousarray(x.astype(dtype, copy=False)),
        plan.resolutions.astype(dtype), tables.reshape(-1), plan.strides,
        plan.dense, plan.primes, plan.level_offsets,
        np.int64(cfg.table_rows - 1), F, out, glob, w, frac,
    )
    return out, (glob, w, frac, None)


def _hash_backward_nb(tables, cfg, upstream, cache, need_x_grad):
    glob, w, frac, _ = cache
    plan = _plan(cfg)
    dtype = tables.dtype
    n = upstream.shape[0]
    F = cfg.features_per_level
    L = cfg.levels
    d = cfg.input_dim
    table_grad = np.zeros(L * cfg.table_rows * F, dtype=dtype)
    up = np.ascontiguousarray(upstream.astype(dtype, copy=False)).reshape(n, L, F)
    _nb_hash_bwd_tables(up, glob, w, F, table_grad)
    x_grad = None
    if need_x_grad:
        x_grad = np.empty((n, d), dtype=dtype)
        _nb_hash_bwd_x(
            up, tables.reshape(-1), glob, frac,
            plan.resolutions.astype(dtype), F, x_grad,
        )
    return table_grad.reshape(tables.shape), x_grad


def _hash_forward_np(tables: np.ndarray, cfg: HashGridConfig, x: np.ndarray):
    """Fused across levels; indices and weights assembled per corner from
    per-dimension (n, L) pieces to keep temporaries small.

    Boundary convention: a coordinate exactly on an interior cell face
    belongs to the cell whose lower corner it is (floor); the domain edge
    x=1 folds into the last cell with frac 1.
    """
    plan = _plan(cfg)
    dtype = tables.dtype
    n = x.shape[0]
    d = cfg.input_dim
    F = cfg.features_per_level
    L = cfg.levels
    C = 1 << d

    resf = plan.resolutions.astype(dtype)
    f = x.astype(dtype, copy=False)[:, None, :] * resf[None, :, None]  # (n,L,d)
    cell = np.floor(f)
    np.minimum(cell, (resf - 1.0)[None, :, None], out=cell)
    frac = f - cell
    celli = cell.astype(np.int64)

    # per-dimension index contributions for the lower/upper corner choices
    dense_mask = plan.dense[None, :]
    rows = cfg.table_rows
    contrib = []  # [k][hi] -> (dense (n,L), hashed (n,L))
    for k in range(d):
        ck = celli[:, :, k]
        lo = (ck * plan.strides[None, :, k], ck * plan.primes[k])
        ck1 = ck + 1
        hi = (ck1 * plan.strides[None, :, k], ck1 * plan.primes[k])
        contrib.append((lo, hi))
    fr = [frac[:, :, k] for k in range(d)]
    om = [1.0 - frac[:, :, k] for k in range(d)]

    glob = np.empty((n, L, C), dtype=np.int32)
    w = np.empty((n, L, C), dtype=dtype)
    for c in range(C):
        dsum = hxor = wc = None
        for k in range(d):
            dk, hk = contrib[k][(c >> k) & 1]
            dsum = dk if dsum is None else dsum + dk
            hxor = hk if hxor is None else hxor ^ hk
            wk = fr[k] if (c >> k) & 1 else om[k]
            wc = wk if wc is None else wc * wk
        glob[:, :, c] = np.where(dense_mask, dsum, hxor & (rows - 1)) + plan.level_offsets[None, :]
        w[:, :, c] = wc

    feat = tables.reshape(-1, F)[glob.reshape(-1)].reshape(n, L, C, F)
    out = np.einsum("nlcf,nlc->nlf", feat, w).reshape(n, L * F)
    return out, (glob, w, frac, feat)


def _hash_backward_np(
    tables: np.ndarray,
    cfg: HashGridConfig,
    upstream: np.ndarray,
    cache,
    need_x_grad: bool,
):
    glob, w, frac, feat = cache
    n = upstream.shape[0]
    d = cfg.input_dim
    F = cfg.features_per_level
    L = cfg.levels
    C = 1 << d
    plan = _plan(cfg)
    rows_total = L * cfg.table_rows

    up = upstream.reshape(n, L, F)
    flat = glob.reshape(-1)
    table_grad = np.empty((rows_total, F), dtype=tables.dtype)
    for k in range(F):
        weights = (up[:, :, k][:, :, None] * w).reshape(-1)
        table_grad[:, k] = np.bincount(
            flat, weights=weights.astype(np.float64, copy=False),
            minlength=rows_total,
        )
    table_grad = table_grad.reshape(tables.shape)

    x_grad = None
    if need_x_grad:
        dtype = tables.dtype
        x_grad = np.empty((n, d), dtype=dtype)
        e = np.einsum("nlcf,nlf->nlc", feat, up)  # (n, L, C)
        resf = plan.resolutions.astype(dtype)
        fr = [frac[:, :, k] for k in range(d)]
        om = [1.0 - frac[:, :, k] for k in range(d)]
        for k in range(d):
            acc = None
            for c in range(C):
                m = None
                for k2 in range(d):
                    if k2 == k:
                        continue
                    wk = fr[k2] if (c >> k2) & 1 else om[k2]
                    m = wk if m is None else m * wk
                term = e[:, :, c] if m is None else e[:, :, c] * m
                if not (c >> k) & 1:
                    term = -term
                acc = term if acc is None else acc + term
            x_grad[:, k] = (acc * resf[None, :]).sum(axis=1)
    return table_grad, x_grad


if _HAVE_NUMBA:
    _hash_forward = _hash_forward_nb
    _hash_backward = _hash_backward_nb
else:
    _hash_forward = _hash_forward_np
    _hash_backward = _hash_backward_np


def _check_domain(x: np.ndarray, d: int):
    if x.ndim != 2 or x.shape[1] != d:
        raise DomainError(f"hash_grid_encode expects (n, {d}) input, got {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DomainError("hash_grid_encode input outside [0,1]; caller must normalize")


def hash_grid_encode(grid: HashGrid, x) -> Tensor:
    """Encode points in [0,1]^d to concatenated per-level interpolations."""
    xt = ad.as_tensor(x)
    _check_domain(xt.data, grid.cfg.input_dim)
    tables = grid.tables
    y, cache = _hash_forward(tables.data, grid.cfg, xt.data)
    out = Tensor(y)
    if ad.grad_enabled() and (tables.requires_grad or xt.requires_grad):

        def bw(g):
            tg, xg = _hash_backward(
                tables.data, grid.cfg, g, cache, xt.requires_grad
            )
            if tables.requires_grad:
                tables.accumulate_grad(tg)
            if xt.requires_grad:
                xt.accumulate_grad(xg)

        ad._attach(out, (tables, xt), bw)
    return out


def hash_grid_encode_array(grid: HashGrid, x: np.ndarray) -> np.ndarray:
    """Forward-only encode (inference paths)."""
    _check_domain(x, grid.cfg.input_dim)
    y, _ = _hash_forward(grid.tables.data, grid.cfg, x)
    return y


def hash_grid_backward(grid: HashGrid, x: np.ndarray, upstream: np.ndarray):
    """Explicit backward: (dense table gradient, gradient w.r.t. x).

    Table gradient is upstream × interpolation weights scattered onto the
    touched corners only (dense (levels, rows, F) array, zero elsewhere).
    """
    _check_domain(x, grid.cfg.input_dim)
    _, cache = _hash_forward(grid.tables.data, grid.cfg, x)
    return _hash_backward(grid.tables.data, grid.cfg, upstream, cache, True)


def from_pm1(x) -> "Tensor | np.ndarray":
    """Affine remap from the [-1,1] convention to the grid domain [0,1]."""
    if isinstance(x, Tensor):
        return ad.add(ad.mul(x, 0.5), 0.5)
    return x * 0.5 + 0.5
