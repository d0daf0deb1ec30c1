"""Texture extraction, decomposition caching, and rendering.

Once trained, the model is baked into a DecompositionCache: per-frame UV,
alpha, and residual maps plus per-layer extracted textures. Rendering a
(possibly edited) frame is then a bilinear texture lookup composited with
the cached maps, with no network inference. Camera-motion manipulation
re-evaluates the networks live at transformed coordinates and transfers
foreground masks through texture space by triangulated interpolation.

Texel convention: a GxG texture spans [-1,1]^2 with texel centers at cell
centers, i.e. texel (i,j) sits at (-1 + (i+0.5) * 2/G).
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    BadMagicError,
    ChecksumError,
    DataError,
    ShapeMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .model import LayeredModel, params_checksum, hierarchy_alphas_t
from .trainer import to_norm

CACHE_MAGIC = b"VLDC"
CACHE_VERSION = 1
DEFAULT_TEXTURE_SIZE = 1000
DESK_TEXTURE_SIZE = 256


# ---------------------------------------------------------------------------
# texture sampling
# ---------------------------------------------------------------------------


def texel_centers(size: int) -> np.ndarray:
    return -1.0 + (np.arange(size) + 0.5) * (2.0 / size)


def uv_to_texel(uv: np.ndarray, size: int) -> np.ndarray:
    """Continuous texel coordinate of uv (texel centers at integers)."""
    return (uv + 1.0) * 0.5 * size - 0.5


def bilinear_sample(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample a (G,G,C) texture at uv in [-1,1]^2, edge-clamped."""
    G = texture.shape[0]
    f = uv_to_texel(uv, G)
    x = f[..., 0]
    y = f[..., 1]
    x0 = np.clip(np.floor(x), 0, G - 1).astype(int)
    y0 = np.clip(np.floor(y), 0, G - 1).astype(int)
    x1 = np.minimum(x0 + 1, G - 1)
    y1 = np.minimum(y0 + 1, G - 1)
    ax = np.clip(x - x0, 0.0, 1.0)[..., None]
    ay = np.clip(y - y0, 0.0, 1.0)[..., None]
    return (
        texture[y0, x0] * (1 - ax) * (1 - ay)
        + texture[y0, x1] * ax * (1 - ay)
        + texture[y1, x0] * (1 - ax) * ay
        + texture[y1, x1] * ax * ay
    )


def extract_texture(model: LayeredModel, layer: int,
                    size: int = DEFAULT_TEXTURE_SIZE,
                    chunk: int = 65536) -> np.ndarray:
    """Evaluate the layer's texture network on a uniform grid over [-1,1]^2."""
    if size < 2:
        raise DataError("texture size must be >= 2")
    cs = texel_centers(size)
    uu, vv = np.meshgrid(cs, cs)  # row = v, col = u
    pts = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(model.cfg.np_dtype())
    out = np.empty((size * size, 3), dtype=np.float64)
    with ad.no_grad():
        for s in range(0, len(pts), chunk):
            out[s : s + chunk] = model.texture_rgb(
                layer, ad.Tensor(pts[s : s + chunk])
            ).data
    return out.reshape(size, size, 3)


# ---------------------------------------------------------------------------
# decomposition cache
# ---------------------------------------------------------------------------


@dataclass
class DecompositionCache:
    width: int
    height: int
    frame_count: int
    num_layers: int
    uv_scale: float
    texture_size: int
    residual_mode: str
    model_checksum: int
    uv_maps: np.ndarray        # (F, L, H, W, 2)
    alpha_maps: np.ndarray     # (F, L, H, W)
    residual_maps: np.ndarray  # (F, L, H, W, 3)
    textures: np.ndarray       # (L, G, G, 3)


def frame_points(width: int, height: int, frame: int, frame_count: int,
                 dtype=np.float64) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    t = to_norm(frame, frame_count)
    return np.stack(
        [to_norm(xs.ravel(), width), to_norm(ys.ravel(), height),
         np.full(width * height, t)],
        axis=1,
    ).astype(dtype)


def build_cache(model: LayeredModel, width: int, height: int,
                frame_count: int, texture_size: int = DESK_TEXTURE_SIZE,
                chunk: int = 32768) -> DecompositionCache:
    cfg = model.cfg
    L = cfg.num_layers
    dtype = cfg.np_dtype()
    uv_maps = np.zeros((frame_count, L, height, width, 2), dtype=np.float32)
    alpha_maps = np.zeros((frame_count, L, height, width), dtype=np.float32)
    residual_maps = np.ones((frame_count, L, height, width, 3), dtype=np.float32)
    with ad.no_grad():
        for f in range(frame_count):
            pts = frame_points(width, height, f, frame_count, dtype)
            for s in range(0, len(pts), chunk):
                seg = pts[s : s + chunk]
                sl = slice(s, s + len(seg))
                raw = model.alpha_raw(seg)
                alphas = hierarchy_alphas_t(raw)
                for n in range(L):
                    uv = model.map_uv(n, seg).data
                    uv_maps[f, n].reshape(-1, 2)[sl] = uv
                    alpha_maps[f, n].reshape(-1)[sl] = alphas[n].data
                    if cfg.residual_mode != "none":
                        res = model.residual_at(
                            n, ad.Tensor(uv), ad.Tensor(seg[:, 2:3])
                        ).data
                        residual_maps[f, n].reshape(-1, 3)[sl] = res
    textures = np.stack(
        [extract_texture(model, n, texture_size) for n in range(L)]
    ).astype(np.float32)
    return DecompositionCache(
        width=width, height=height, frame_count=frame_count, num_layers=L,
        uv_scale=cfg.uv_scale, texture_size=texture_size,
        residual_mode=cfg.residual_mode, model_checksum=params_checksum(model),
        uv_maps=uv_maps, alpha_maps=alpha_maps, residual_maps=residual_maps,
        textures=textures,
    )


def render_frame(cache: DecompositionCache, frame: int,
                 textures: np.ndarray | None = None,
                 residual_on: bool = True) -> np.ndarray:
    """Composite one frame from the cache: bilinear texture lookup at the
    cached UVs, residual-modulated, alpha-weighted, clamped to [0,1]."""
    if not 0 <= frame < cache.frame_count:
        raise DataError(f"frame {frame} outside cache range")
    if textures is None:
        textures = cache.textures
    if textures.shape != cache.textures.shape:
        raise ShapeMismatchError(
            f"textures shape {textures.shape} != cached {cache.textures.shape}"
        )
    acc = np.zeros((cache.height, cache.width, 3))
    for n in range(cache.num_layers):
        color = bilinear_sample(
            np.asarray(textures[n], dtype=np.float64), cache.uv_maps[frame, n]
        )
        if residual_on and cache.residual_mode == "multiplicative":
            color = color * cache.residual_maps[frame, n]
        elif residual_on and cache.residual_mode == "additive":
            color = np.clip(color + cache.residual_maps[frame, n], 0.0, 1.0)
        acc += cache.alpha_maps[frame, n][..., None] * color
    return np.clip(acc, 0.0, 1.0)


def render_video(cache: DecompositionCache, textures=None,
                 residual_on: bool = True) -> np.ndarray:
    return np.stack([
        render_frame(cache, f, textures, residual_on)
        for f in range(cache.frame_count)
    ])


def reconstruct_video(model: LayeredModel, width: int, height: int,
                      frame_count: int, with_residual: bool = True,
                      chunk: int = 32768) -> np.ndarray:
    """Live per-pixel network inference (the slow path the cache replaces)."""
    out = np.zeros((frame_count, height, width, 3))
    dtype = model.cfg.np_dtype()
    with ad.no_grad():
        for f in range(frame_count):
            pts = frame_points(width, height, f, frame_count, dtype)
            flat = out[f].reshape(-1, 3)
            for s in range(0, len(pts), chunk):
                res = model.forward(pts[s : s + chunk], with_residual=with_residual)
                flat[s : s + chunk] = res["chat"].data
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------


def apply_edit(texture: np.ndarray, edit_rgba: np.ndarray) -> np.ndarray:
    """Alpha-over composite of an RGBA edit layer onto an RGB texture."""
    texture = np.asarray(texture, dtype=np.float64)
    edit_rgba = np.asarray(edit_rgba, dtype=np.float64)
    if edit_rgba.shape[:2] != texture.shape[:2] or edit_rgba.shape[2] != 4:
        raise ShapeMismatchError(
            f"edit layer {edit_rgba.shape} does not match texture {texture.shape}"
        )
    a = edit_rgba[..., 3:4]
    return a * edit_rgba[..., :3] + (1.0 - a) * texture


def apply_edit_patch(texture: np.ndarray, patch_rgba: np.ndarray,
                     x: int, y: int) -> np.ndarray:
    """Alpha-over a small RGBA patch at texel offset (x, y)."""
    texture = np.array(texture, dtype=np.float64, copy=True)
    patch_rgba = np.asarray(patch_rgba, dtype=np.float64)
    G = texture.shape[0]
    ph, pw = patch_rgba.shape[:2]
    if x < 0 or y < 0 or x + pw > G or y + ph > G:
        raise ShapeMismatchError("edit patch exceeds the texture bounds")
    region = texture[y : y + ph, x : x + pw]
    a = patch_rgba[..., 3:4]
    texture[y : y + ph, x : x + pw] = a * patch_rgba[..., :3] + (1 - a) * region
    return texture


# ---------------------------------------------------------------------------
# camera-motion manipulation
# ---------------------------------------------------------------------------


@dataclass
class CameraPath:
    transforms: np.ndarray  # (F, 4): scale, rotation_degrees, dx, dy

    def __post_init__(self):
        self.transforms = np.asarray(self.transforms, dtype=np.float64)
        if self.transforms.ndim != 2 or self.transforms.shape[1] != 4:
            raise DataError("camera path must be (F, 4)")
        if (self.transforms[:, 0] <= 0).any():
            raise DataError("camera scale must be > 0 (invertible transform)")

    def apply(self, frame: int, xy: np.ndarray) -> np.ndarray:
        s, deg, dx, dy = self.transforms[frame]
        th = np.deg2rad(deg)
        c, sn = np.cos(th), np.sin(th)
        x = s * (c * xy[:, 0] - sn * xy[:, 1]) + dx
        y = s * (sn * xy[:, 0] + c * xy[:, 1]) + dy
        return np.stack([x, y], axis=1)

    @classmethod
    def identity(cls, frame_count: int) -> "CameraPath":
        t = np.zeros((frame_count, 4))
        t[:, 0] = 1.0
        return cls(t)


def load_camera_path(path) -> CameraPath:
    data = json.loads(Path(path).read_text())
    rows = data["frames"] if isinstance(data, dict) else data
    return CameraPath(np.asarray(rows, dtype=np.float64))


def save_camera_path(path, cam: CameraPath):
    Path(path).write_text(json.dumps({"frames": cam.transforms.tolist()}))


def _interp_alpha(corr_uv: np.ndarray, corr_alpha: np.ndarray,
                  query_uv: np.ndarray) -> np.ndarray:
    """Scattered linear interpolation via Delaunay; 0 outside the hull."""
    from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
    from scipy.spatial import QhullError

    try:
        f = LinearNDInterpolator(corr_uv, corr_alpha, fill_value=0.0)
        return np.nan_to_num(f(query_uv), nan=0.0)
    except QhullError:
        warnings.warn(
            "degenerate triangulation; falling back to nearest-neighbor",
            stacklevel=2,
        )
        f = NearestNDInterpolator(corr_uv, corr_alpha)
        return f(query_uv)


def render_camera(model: LayeredModel, cache: DecompositionCache,
                  path: CameraPath, residual_on: bool = True,
                  sample_stride: int = 4, chunk: int = 32768) -> np.ndarray:
    """Re-render under per-frame similarity transforms of (x, y).

    Colors and residuals are evaluated live at the transformed points;
    foreground visibility is carried over from the original view through
    texture space: original samples give (M_n(p) -> alpha_n(p)) which is
    linearly interpolated (Delaunay) at M_n(p'). Outside the observed
    texture hull the layer is absent (alpha 0) and the background shows.
    """
    if len(path.transforms) != cache.frame_count:
        raise ShapeMismatchError("camera path length != cached frame count")
    W, H, F = cache.width, cache.height, cache.frame_count
    L = cache.num_layers
    dtype = model.cfg.np_dtype()
    out = np.zeros((F, H, W, 3))
    ys, xs = np.mgrid[0:H, 0:W]
    base_xy = np.stack(
        [to_norm(xs.ravel(), W), to_norm(ys.ravel(), H)], axis=1
    )
    for f in range(F):
        xy_p = path.apply(f, base_xy)
        pts = np.concatenate(
            [xy_p, np.full((len(xy_p), 1), to_norm(f, F))], axis=1
        ).astype(dtype)
        colors = np.zeros((L, H * W, 3))
        with ad.no_grad():
            for n in range(L):
                for s in range(0, len(pts), chunk):
                    seg = pts[s : s + chunk]
                    uv = model.map_uv(n, seg).data
                    c = model.texture_rgb(n, ad.Tensor(uv)).data
                    if residual_on and model.cfg.residual_mode == "multiplicative":
                        c = c * model.residual_at(
                            n, ad.Tensor(uv), ad.Tensor(seg[:, 2:3])
                        ).data
                    elif residual_on and model.cfg.residual_mode == "additive":
                        c = np.clip(
                            c + model.residual_at(
                                n, ad.Tensor(uv), ad.Tensor(seg[:, 2:3])
                            ).data,
                            0.0, 1.0,
                        )
                    colors[n, s : s + len(seg)] = c
        # foreground masks transferred through texture space
        fg_alpha = np.zeros((L - 1, H * W))
        for n in range(L - 1):
            corr_uv = cache.uv_maps[f, n][::sample_stride, ::sample_stride]
            corr_a = cache.alpha_maps[f, n][::sample_stride, ::sample_stride]
            with ad.no_grad():
                quv = np.concatenate([
                    model.map_uv(n, pts[s : s + chunk]).data
                    for s in range(0, len(pts), chunk)
                ])
            fg_alpha[n] = np.clip(
                _interp_alpha(
                    corr_uv.reshape(-1, 2).astype(np.float64),
                    corr_a.reshape(-1).astype(np.float64),
                    quv,
                ),
                0.0, 1.0,
            )
        # front-to-back composition with the transferred raw opacities
        raw = np.concatenate([fg_alpha.T, np.ones((H * W, 1))], axis=1)
        alphas = _hierarchy_np(raw)
        frame = np.zeros((H * W, 3))
        for n in range(L):
            frame += alphas[:, n : n + 1] * colors[n]
        out[f] = np.clip(frame.reshape(H, W, 3), 0.0, 1.0)
    return out


def _hierarchy_np(raw: np.ndarray) -> np.ndarray:
    out = np.empty_like(raw)
    trans = np.ones(raw.shape[0])
    for n in range(raw.shape[1]):
        out[:, n] = raw[:, n] * trans
        trans = trans * (1.0 - raw[:, n])
    return out


# ---------------------------------------------------------------------------
# cache file format
# ---------------------------------------------------------------------------

_CACHE_ARRAYS = ("uv_maps", "alpha_maps", "residual_maps", "textures")


def save_cache(path, cache: DecompositionCache) -> Path:
    """Little-endian container; every array section carries its own CRC32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sections = []
    payload = bytearray()
    for name in _CACHE_ARRAYS:
        arr = np.ascontiguousarray(getattr(cache, name)).astype("<f4")
        raw = arr.tobytes()
        sections.append(
            {
                "name": name,
                "dtype": "<f4",
                "shape": list(arr.shape),
                "crc32": zlib.crc32(raw),
                "nbytes": len(raw),
            }
        )
        payload += raw
    header = {
        "format_version": CACHE_VERSION,
        "width": cache.width,
        "height": cache.height,
        "frame_count": cache.frame_count,
        "num_layers": cache.num_layers,
        "uv_scale": cache.uv_scale,
        "texture_size": cache.texture_size,
        "residual_mode": cache.residual_mode,
        "model_checksum": cache.model_checksum,
        "sections": sections,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_VERSION))
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        fh.write(bytes(payload))
    return path


def load_cache(path) -> DecompositionCache:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: too short for a cache file")
    if raw[:4] != CACHE_MAGIC:
        raise BadMagicError(f"{path}: not a decomposition cache")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CACHE_VERSION:
        raise UnsupportedVersionError(f"{path}: cache version {version}")
    (hdr_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + hdr_len > len(raw):
        raise TruncatedFileError(f"{path}: header exceeds the file")
    header = json.loads(raw[16 : 16 + hdr_len].decode())
    ofs = 16 + hdr_len
    arrays = {}
    for sec in header["sections"]:
        n = sec["nbytes"]
        chunk = raw[ofs : ofs + n]
        if len(chunk) < n:
            raise TruncatedFileError(f"{path}: section {sec['name']} ends early")
        if zlib.crc32(chunk) != sec["crc32"]:
            raise ChecksumError(f"{path}: section {sec['name']} fails its checksum")
        arrays[sec["name"]] = (
            np.frombuffer(chunk, dtype=sec["dtype"]).reshape(sec["shape"]).copy()
        )
        ofs += n
    return DecompositionCache(
        width=header["width"], height=header["height"],
        frame_count=header["frame_count"], num_layers=header["num_layers"],
        uv_scale=header["uv_scale"], texture_size=header["texture_size"],
        residual_mode=header["residual_mode"],
        model_checksum=header["model_checksum"],
        **arrays,
    )
