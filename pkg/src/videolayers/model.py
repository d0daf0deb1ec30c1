"""The layered representation.

Per layer: a mapping network (positional-encoded space-time point ->
texture coordinate), a texture network (2D hash grid over uv -> color),
and a residual estimator (3D hash grid over (u,v,t) -> per-channel
lighting coefficient). One shared alpha network (3D hash grid over
(x,y,t)) produces raw per-layer opacities which a strict front-to-back
hierarchy turns into visibility weights that sum to 1.

Layer 0 is the front-most foreground; layer N is the background whose
raw opacity is hard-wired to 1 so it absorbs whatever the foregrounds
leave uncovered.

Gradient contract: the residual branch never backpropagates into the
mapping networks (its uv input is detached).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import encoding as enc
from .autodiff import Tensor
from .errors import DomainError

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class MlpSpec:
    hidden_width: int = 64
    hidden_layers: int = 2
    activation: str = "tanh"
    output_transform: str = "identity"

    def __post_init__(self):
        if self.hidden_width < 1 or self.hidden_layers < 0:
            raise ValueError("invalid MLP dimensions")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp:
    """Plain fully connected net; returns the raw (pre-squash) output."""

    def __init__(self, spec: MlpSpec, in_dim: int, out_dim: int,
                 rng: np.random.Generator, dtype=np.float64, zero_last: bool = True):
        self.spec = spec
        sizes = [in_dim] + [spec.hidden_width] * spec.hidden_layers + [out_dim]
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                w = np.zeros((a, b), dtype=dtype)
            else:
                bound = np.sqrt(6.0 / (a + b))  # Xavier-uniform, suits tanh
                w = rng.uniform(-bound, bound, size=(a, b)).astype(dtype)
            self.weights.append(ad.parameter(w))
            self.biases.append(ad.parameter(np.zeros(b, dtype=dtype)))
        self._act = _ACTIVATIONS[spec.activation]

    def __call__(self, x) -> Tensor:
        return ad.mlp_forward(x, self.weights, self.biases, self.spec.activation)

    def params(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"W{i}", w
            yield f"b{i}", b


@dataclass
class ModelConfig:
    num_foreground: int = 1
    uv_scale: float = 0.6
    residual_mode: str = "multiplicative"  # multiplicative | additive | none
    encoding_mode: str = "hash"  # hash | positional
    mapping_frequencies: int = 6
    mapping_mlp: MlpSpec = field(default_factory=lambda: MlpSpec(128, 4))
    texture_mlp: MlpSpec = field(default_factory=lambda: MlpSpec(64, 2))
    residual_mlp: MlpSpec = field(default_factory=lambda: MlpSpec(64, 2))
    alpha_mlp: MlpSpec = field(default_factory=lambda: MlpSpec(64, 2))
    grid3d: enc.HashGridConfig = field(
        default_factory=lambda: enc.HashGridConfig(3, 8, 2, 15, 8, 1.5)
    )
    grid2d: enc.HashGridConfig = field(
        default_factory=lambda: enc.HashGridConfig(2, 10, 2, 15, 16, 1.5)
    )
    # positional-encoding ablation: frequencies and the deeper MLPs it needs
    positional_frequencies: int = 8
    positional_mlp: MlpSpec = field(default_factory=lambda: MlpSpec(128, 4))
    dtype: str = "float64"

    def __post_init__(self):
        if self.num_foreground < 1:
            raise ValueError("need at least one foreground layer")
        if not 0.0 < self.uv_scale <= 1.0:
            raise ValueError("uv_scale must be in (0, 1]")
        if self.residual_mode not in ("multiplicative", "additive", "none"):
            raise ValueError(f"unknown residual_mode {self.residual_mode!r}")
        if self.encoding_mode not in ("hash", "positional"):
            raise ValueError(f"unknown encoding_mode {self.encoding_mode!r}")

    @property
    def num_layers(self) -> int:
        return self.num_foreground + 1

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("mapping_mlp", "texture_mlp", "residual_mlp", "alpha_mlp",
                    "positional_mlp"):
            if isinstance(d.get(key), dict):
                d[key] = MlpSpec(**d[key])
        for key in ("grid3d", "grid2d"):
            if isinstance(d.get(key), dict):
                d[key] = enc.HashGridConfig(**d[key])
        return cls(**d)


@dataclass
class LayerOutputs:
    """Per-layer inference results at a batch of points (plain arrays)."""

    colors: np.ndarray      # (B, L, 3)
    residuals: np.ndarray   # (B, L, 3); ones when residual_mode == none
    raw_alphas: np.ndarray  # (B, L)
    alphas: np.ndarray      # (B, L)
    uv: np.ndarray          # (B, L, 2)


class _Head:
    """A hash- or positional-encoded MLP head with a fixed output squash."""

    def __init__(self, cfg: ModelConfig, kind: str, in_dim: int, out_dim: int,
                 mlp_spec: MlpSpec, grid_cfg, rng, dtype):
        self.kind = kind
        if cfg.encoding_mode == "hash":
            self.grid = enc.HashGrid.create(grid_cfg, rng, dtype)
            self.mlp = Mlp(mlp_spec, grid_cfg.output_dim, out_dim, rng, dtype)
            self.pos_cfg = None
        else:
            self.grid = None
            self.pos_cfg = enc.PositionalConfig(cfg.positional_frequencies)
            self.mlp = Mlp(cfg.positional_mlp, self.pos_cfg.output_dim(in_dim),
                           out_dim, rng, dtype)

    def raw(self, x01) -> Tensor:
        if self.grid is not None:
            feats = enc.hash_grid_encode(self.grid, x01)
        else:
            # positional encoding expects the symmetric convention
            xt = ad.as_tensor(x01)
            pm1 = ad.sub(ad.mul(xt, 2.0), 1.0)
            feats = enc.positional_encode(pm1, self.pos_cfg)
        return self.mlp(feats)

    def params(self):
        if self.grid is not None:
            yield "grid", self.grid.tables
        for name, p in self.mlp.params():
            yield name, p


class LayeredModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = cfg.np_dtype()
        rng = np.random.default_rng(np.random.PCG64(seed))
        L = cfg.num_layers
        pe_dim = enc.PositionalConfig(cfg.mapping_frequencies).output_dim(3)
        self.mapping_pos = enc.PositionalConfig(cfg.mapping_frequencies)
        self.mapping = [Mlp(cfg.mapping_mlp, pe_dim, 2, rng, dtype) for _ in range(L)]
        self.texture = [
            _Head(cfg, "texture", 2, 3, cfg.texture_mlp, cfg.grid2d, rng, dtype)
            for _ in range(L)
        ]
        if cfg.residual_mode != "none":
            self.residual = [
                _Head(cfg, "residual", 3, 3, cfg.residual_mlp, cfg.grid3d, rng, dtype)
                for _ in range(L)
            ]
        else:
            self.residual = []
        self.alpha = _Head(cfg, "alpha", 3, cfg.num_foreground, cfg.alpha_mlp,
                           cfg.grid3d, rng, dtype)

    # -- parameters ---------------------------------------------------------

    def param_groups(self) -> dict:
        """Ordered name -> Tensor map over every trainable array."""
        groups = {}
        for n, net in enumerate(self.mapping):
            for name, p in net.params():
                groups[f"mapping{n}.{name}"] = p
        for n, head in enumerate(self.texture):
            for name, p in head.params():
                groups[f"texture{n}.{name}"] = p
        for n, head in enumerate(self.residual):
            for name, p in head.params():
                groups[f"residual{n}.{name}"] = p
        for name, p in self.alpha.params():
            groups[f"alpha.{name}"] = p
        return groups

    def randomize(self, seed: int):
        """Re-draw every array (including zero-initialized output layers)."""
        rng = np.random.default_rng(np.random.PCG64(seed))
        for name, p in self.param_groups().items():
            scale = 0.3 if name.endswith(("W0", "W1", "W2", "W3", "W4")) else 0.1
            if name.endswith("grid"):
                scale = 0.05
            p.data = rng.normal(0.0, scale, size=p.data.shape).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.param_groups().values():
            p.grad = None

    # -- forward pieces -------------------------------------------------------

    def _check_points(self, p: np.ndarray):
        if p.ndim != 2 or p.shape[1] != 3:
            raise DomainError(f"expected (B,3) space-time points, got {p.shape}")
        if p.size and (np.abs(p).max() > 1.0 + 1e-9):
            raise DomainError("space-time points must lie in [-1,1]^3")

    def map_uv(self, n: int, p: np.ndarray, pe: np.ndarray | None = None) -> Tensor:
        """Texture coordinate of layer n at points p: s * tanh(MLP(PE(p)))."""
        if pe is None:
            pe = enc.positional_encode_array(p, self.mapping_pos)
        raw = self.mapping[n](Tensor(pe))
        return ad.mul(ad.tanh(raw), self.cfg.uv_scale)

    def map_uv_all(self, p: np.ndarray) -> list:
        """All layers' texture coordinates; encodes p once."""
        pe = enc.positional_encode_array(p, self.mapping_pos)
        return [self.map_uv(n, p, pe) for n in range(self.cfg.num_layers)]

    def texture_rgb(self, n: int, uv) -> Tensor:
        """Layer color at texture points uv in [-1,1]^2 (sigmoid-squashed)."""
        return ad.sigmoid(self.texture[n].raw(enc.from_pm1(uv)))

    def residual_at(self, n: int, uv, t) -> Tensor:
        """Lighting coefficient at (uv, t).

        Multiplicative mode: exp(raw) in (0, inf); additive: tanh(raw) in
        [-1,1]. The uv argument must already be detached by the caller when
        it comes from a mapping network.
        """
        uvt = ad.as_tensor(uv)
        tt = ad.as_tensor(t)
        x = ad.concat([enc.from_pm1(uvt), enc.from_pm1(tt)], axis=1)
        raw = self.residual[n].raw(x)
        if self.cfg.residual_mode == "additive":
            return ad.tanh(raw)
        return ad.exp(raw)

    def alpha_raw(self, p: np.ndarray) -> Tensor:
        """Raw foreground opacities a_0..a_{N-1} (sigmoid) at points p."""
        self._check_points(p)
        return ad.sigmoid(self.alpha.raw(p * 0.5 + 0.5))

    def forward(self, p: np.ndarray, with_residual: bool = True,
                residual_uv=None) -> dict:
        """Full per-layer forward at points p; returns a dict of Tensors.

        Keys: uv (list), colors (list), residuals (list or None), raw_alpha
        (B,N), alphas (list of (B,) Tensors, length N+1), chat (B,3).
        ``residual_uv`` pins the residual branch's uv inputs to fixed arrays
        (used by finite-difference oracles to exclude that path on both sides
        of the stop-gradient comparison).
        """
        self._check_points(p)
        cfg = self.cfg
        L = cfg.num_layers
        uv = self.map_uv_all(p)
        colors = [self.texture_rgb(n, uv[n]) for n in range(L)]
        t = p[:, 2:3]
        use_res = with_residual and cfg.residual_mode != "none"
        residuals = None
        if use_res:
            # stop-gradient: lighting must not steer the mapping
            if residual_uv is None:
                residual_uv = [uv[n].detach() for n in range(L)]
            residuals = [
                self.residual_at(n, ad.as_tensor(residual_uv[n]), t)
                for n in range(L)
            ]
        raw_alpha = self.alpha_raw(p)
        alphas = hierarchy_alphas_t(raw_alpha)
        chat = None
        for n in range(L):
            c = colors[n]
            if use_res:
                if cfg.residual_mode == "multiplicative":
                    c = ad.mul(c, residuals[n])
                else:
                    c = ad.clip(ad.add(c, residuals[n]), 0.0, 1.0)
            term = ad.mul(c, ad.reshape(alphas[n], (-1, 1)))
            chat = term if chat is None else ad.add(chat, term)
        return {
            "uv": uv,
            "colors": colors,
            "residuals": residuals,
            "raw_alpha": raw_alpha,
            "alphas": alphas,
            "chat": chat,
        }


def hierarchy_alphas_t(raw_fg: Tensor) -> list:
    """Front-to-back hierarchy on Tensors: alpha_n = a_n * prod_{i<n}(1-a_i).

    raw_fg is (B, N) foreground opacities; the background raw opacity is the
    constant 1, so the returned N+1 weights sum to 1 exactly.
    """
    n_fg = raw_fg.data.shape[1]
    alphas = []
    transmittance = None
    for n in range(n_fg):
        a_n = raw_fg[:, n]
        alphas.append(a_n if transmittance is None else ad.mul(a_n, transmittance))
        one_minus = ad.sub(1.0, a_n)
        transmittance = one_minus if transmittance is None else ad.mul(
            transmittance, one_minus
        )
    alphas.append(transmittance if transmittance is not None else None)
    return alphas


def layer_alphas(raw: np.ndarray) -> np.ndarray:
    """Hierarchy on plain arrays; raw is (B, N+1) with raw[:, -1] == 1."""
    raw = np.asarray(raw)
    if raw.ndim == 1:
        return layer_alphas(raw[None, :])[0]
    if raw.size and (raw.min() < 0.0 or raw.max() > 1.0):
        raise DomainError("raw alphas must lie in [0,1]")
    if raw.size and not np.all(raw[:, -1] == 1.0):
        raise DomainError("background raw alpha must be fixed at 1")
    out = np.empty_like(raw)
    trans = np.ones(raw.shape[0], dtype=raw.dtype)
    for n in range(raw.shape[1]):
        out[:, n] = raw[:, n] * trans
        trans = trans * (1.0 - raw[:, n])
    return out


# -- inference wrappers (plain arrays in, plain arrays out) -------------------


def params_checksum(model: LayeredModel) -> int:
    """CRC32 over all parameter bytes in group order (cache/version guard)."""
    import zlib

    crc = 0
    for name, p in model.param_groups().items():
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
    return crc


def map_point(model: LayeredModel, n: int, p: np.ndarray) -> np.ndarray:
    model._check_points(np.atleast_2d(p))
    with ad.no_grad():
        return model.map_uv(n, np.atleast_2d(p)).data


def texture_color(model: LayeredModel, n: int, q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(q)
    if q.size and np.abs(q).max() > 1.0:
        raise DomainError("texture points must lie in [-1,1]^2")
    with ad.no_grad():
        return model.texture_rgb(n, Tensor(q)).data


def residual_coeff(model: LayeredModel, n: int, q: np.ndarray, t) -> np.ndarray:
    q = np.atleast_2d(q)
    t = np.atleast_2d(np.asarray(t, dtype=q.dtype)).reshape(-1, 1)
    with ad.no_grad():
        return model.residual_at(n, Tensor(q), Tensor(t)).data


def alpha_at(model: LayeredModel, p: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(p)
    with ad.no_grad():
        raw = model.alpha_raw(p).data
    full = np.concatenate([raw, np.ones((len(raw), 1), dtype=raw.dtype)], axis=1)
    return layer_alphas(full)


def reconstruct_pixel(model: LayeredModel, p: np.ndarray,
                      with_residual: bool = True):
    """Reconstructed color + per-layer breakdown at points p (no grad)."""
    p = np.atleast_2d(p)
    with ad.no_grad():
        out = model.forward(p, with_residual=with_residual)
    L = model.cfg.num_layers
    B = len(p)
    colors = np.stack([out["colors"][n].data for n in range(L)], axis=1)
    if out["residuals"] is not None:
        residuals = np.stack([out["residuals"][n].data for n in range(L)], axis=1)
    else:
        residuals = np.ones_like(colors)
    raw = np.concatenate(
        [out["raw_alpha"].data, np.ones((B, 1), dtype=colors.dtype)], axis=1
    )
    alphas = np.stack([out["alphas"][n].data for n in range(L)], axis=1)
    uv = np.stack([out["uv"][n].data for n in range(L)], axis=1)
    return out["chat"].data, LayerOutputs(colors, residuals, raw, alphas, uv)
