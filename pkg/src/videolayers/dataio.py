"""Data ingestion and synthetic-scene generation.

Real inputs are plain files: 8-bit numbered frames, Middlebury .flo flow
fields (forward/backward subdirectories), and 8-bit grayscale coarse
masks per foreground layer. The synthetic generator produces the same
files plus exact ground truth (flow, masks, gain field, point tracks) so
every training signal has a known oracle at desk scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    ShapeMismatchError,
    TruncatedFileError,
)

FLO_MAGIC = 202021.25
FLOW_VALID_ROUNDTRIP_PX = 1.0


@dataclass
class VideoVolume:
    frames: np.ndarray  # (F, H, W, 3) float in [0,1]

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"video must be (F,H,W,3), got {self.frames.shape}")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class FlowField:
    forward: np.ndarray   # (F-1, H, W, 2) flow t -> t+1, pixel units
    backward: np.ndarray  # (F-1, H, W, 2) flow t+1 -> t
    forward_valid: np.ndarray   # (F-1, H, W) bool
    backward_valid: np.ndarray  # (F-1, H, W) bool


@dataclass
class MaskSequence:
    masks: np.ndarray  # (F, N_fg, H, W) in [0,1]


@dataclass
class SceneSpec:
    width: int = 96
    height: int = 96
    frame_count: int = 24
    bg_velocity: tuple = (1, 0)       # integer px/frame
    sprite_size: int = 28
    sprite_orbit_radius: float = 18.0
    sprite_center: tuple = (48.0, 48.0)
    gain_amplitude: float = 0.5       # g in [1-A, 1+A]
    gain_wavelength: float = 64.0
    gain_speed: float = 1.0           # phase cycles over the clip
    shadow_gain: float = 0.6
    shadow_offset: tuple = (10, 12)
    shadow_radius: float = 10.0
    track_grid: int = 4               # tracks per axis on the sprite

    def to_dict(self):
        d = self.__dict__.copy()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("bg_velocity", "sprite_center", "shadow_offset"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    video: VideoVolume
    flow: FlowField
    masks: MaskSequence
    bg_texture: np.ndarray      # (Hc, Wc, 3) scrolling canvas
    sprite_texture: np.ndarray  # (S, S, 3)
    sprite_mask: np.ndarray     # (S, S) binary
    gain: np.ndarray            # (F, H, W) multiplicative gain incl. shadow
    bg_offsets: np.ndarray      # (F, 2) integer canvas offsets (x, y)
    sprite_positions: np.ndarray  # (F, 2) integer top-left (x, y)
    tracks: "TrackSet"


@dataclass
class TrackSet:
    xy: np.ndarray        # (T, F, 2) pixel coordinates
    visible: np.ndarray   # (T, F) bool
    width: int
    height: int

    def __post_init__(self):
        if self.xy.ndim != 3 or self.xy.shape[-1] != 2:
            raise DataError("tracks must be (T,F,2)")
        if self.visible.shape != self.xy.shape[:2]:
            raise DataError("visibility shape mismatch")


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def _to_u8(img: np.ndarray, warn_clip: bool = True) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if warn_clip and arr.size and (arr.min() < -1e-9 or arr.max() > 1 + 1e-9):
        import warnings

        warnings.warn("image values outside [0,1]; clamping", stacklevel=3)
    arr = np.clip(arr, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def write_texture(path, image: np.ndarray):
    """Write one image (rgb or grayscale float [0,1]) as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(image)).save(path)


def write_frames(dirpath, video) -> list:
    """Write video frames as zero-padded 8-bit PNGs; returns the paths."""
    frames = video.frames if isinstance(video, VideoVolume) else np.asarray(video)
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = dirpath / f"{i:05d}.png"
        Image.fromarray(_to_u8(frame)).save(p)
        paths.append(p)
    return paths


def load_frames(dirpath) -> VideoVolume:
    """Load a directory of equally sized 8-bit images, lexicographic order."""
    dirpath = Path(dirpath)
    if not dirpath.is_dir():
        raise DataError(f"not a directory: {dirpath}")
    files = sorted(
        p for p in dirpath.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not files:
        raise DataError(f"no image files in {dirpath}")
    frames = []
    shape = None
    for f in files:
        try:
            img = np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 255.0
        except Exception as e:  # unreadable file is a distinct failure
            raise DataError(f"unreadable image {f}: {e}") from e
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ShapeMismatchError(
                f"frame {f.name} has size {img.shape[:2]}, expected {shape[:2]}"
            )
        frames.append(img)
    return VideoVolume(np.stack(frames))


def load_masks(dirpath, frame_count: int, num_foreground: int) -> MaskSequence:
    """Masks live in per-layer subdirectories layer0/, layer1/, ..."""
    dirpath = Path(dirpath)
    out = None
    for n in range(num_foreground):
        sub = dirpath / f"layer{n}"
        if not sub.is_dir():
            raise DataError(f"missing mask directory {sub}")
        files = sorted(sub.glob("*.png"))
        if len(files) != frame_count:
            raise ShapeMismatchError(
                f"{sub}: {len(files)} masks for {frame_count} frames"
            )
        for i, f in enumerate(files):
            img = np.asarray(Image.open(f).convert("L"), dtype=np.float64) / 255.0
            if out is None:
                out = np.zeros(
                    (frame_count, num_foreground) + img.shape, dtype=np.float64
                )
            if img.shape != out.shape[2:]:
                raise ShapeMismatchError(f"mask {f} size mismatch")
            out[i, n] = img
    return MaskSequence(out)


def write_masks(dirpath, masks: MaskSequence):
    dirpath = Path(dirpath)
    F, N = masks.masks.shape[:2]
    for n in range(N):
        sub = dirpath / f"layer{n}"
        sub.mkdir(parents=True, exist_ok=True)
        for i in range(F):
            Image.fromarray(_to_u8(masks.masks[i, n])).save(sub / f"{i:05d}.png")


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------


def write_flo(path, flow: np.ndarray):
    """Write one (H, W, 2) float field in the Middlebury layout."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DataError(f"flow must be (H,W,2), got {flow.shape}")
    h, w = flow.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(flow.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise TruncatedFileError(f"{path}: shorter than the magic header")
        (magic,) = struct.unpack("<f", head)
        if magic != np.float32(FLO_MAGIC):
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        dims = f.read(8)
        if len(dims) < 8:
            raise TruncatedFileError(f"{path}: missing dimensions")
        w, h = struct.unpack("<ii", dims)
        if w <= 0 or h <= 0 or w * h > 10**9:
            raise DataError(f"{path}: implausible dimensions {w}x{h}")
        payload = f.read(8 * w * h)
        if len(payload) < 8 * w * h:
            raise TruncatedFileError(f"{path}: payload ends early")
        return np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float64)


def _roundtrip_validity(fwd: np.ndarray, bwd: np.ndarray) -> np.ndarray:
    """Valid where p + fwd(p) stays in bounds and bwd sampled there returns
    within FLOW_VALID_ROUNDTRIP_PX of -fwd(p)."""
    h, w = fwd.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + fwd[..., 0]
    ty = ys + fwd[..., 1]
    inb = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    txc = np.clip(tx, 0, w - 1)
    tyc = np.clip(ty, 0, h - 1)
    x0 = np.floor(txc).astype(int)
    y0 = np.floor(tyc).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (txc - x0)[..., None]
    ay = (tyc - y0)[..., None]
    b = (
        bwd[y0, x0] * (1 - ax) * (1 - ay)
        + bwd[y0, x1] * ax * (1 - ay)
        + bwd[y1, x0] * (1 - ax) * ay
        + bwd[y1, x1] * ax * ay
    )
    err = np.linalg.norm(fwd + b, axis=-1)
    return inb & (err <= FLOW_VALID_ROUNDTRIP_PX)


def build_flow_field(forward: np.ndarray, backward: np.ndarray) -> FlowField:
    if forward.shape != backward.shape:
        raise ShapeMismatchError("forward/backward flow shapes differ")
    fv = np.stack([_roundtrip_validity(f, b) for f, b in zip(forward, backward)])
    bv = np.stack([_roundtrip_validity(b, f) for f, b in zip(forward, backward)])
    return FlowField(forward, backward, fv, bv)


def load_flow(dirpath, video: VideoVolume | None = None) -> FlowField:
    """Load fwd/ and bwd/ subdirectories of per-pair .flo files."""
    dirpath = Path(dirpath)
    fwd_files = sorted((dirpath / "fwd").glob("*.flo"))
    bwd_files = sorted((dirpath / "bwd").glob("*.flo"))
    if not fwd_files or len(fwd_files) != len(bwd_files):
        raise DataError(f"{dirpath}: need matching fwd/ and bwd/ .flo files")
    fwd = np.stack([read_flo(p) for p in fwd_files])
    bwd = np.stack([read_flo(p) for p in bwd_files])
    if video is not None:
        if fwd.shape[1:3] != (video.height, video.width):
            raise ShapeMismatchError("flow dimensions disagree with the video")
        if len(fwd_files) != video.frame_count - 1:
            raise ShapeMismatchError("flow pair count disagrees with frame count")
    return build_flow_field(fwd, bwd)


def write_flow(dirpath, flow: FlowField):
    dirpath = Path(dirpath)
    for i, f in enumerate(flow.forward):
        write_flo(dirpath / "fwd" / f"{i:05d}.flo", f)
    for i, b in enumerate(flow.backward):
        write_flo(dirpath / "bwd" / f"{i:05d}.flo", b)


# ---------------------------------------------------------------------------
# synthetic scene
# ---------------------------------------------------------------------------


def _checker_noise_texture(h, w, rng, square=8, lo=0.08, hi=0.62):
    ys, xs = np.mgrid[0:h, 0:w]
    checker = ((xs // square + ys // square) % 2).astype(np.float64)
    base = lo + (hi - lo) * checker
    tint = rng.uniform(0.75, 1.0, size=3)
    img = base[..., None] * tint[None, None, :]
    img += rng.uniform(-0.05, 0.05, size=(h, w, 3))
    return np.clip(img, 0.02, hi)


def _sprite_texture(s, rng):
    ys, xs = np.mgrid[0:s, 0:s]
    cx = cy = (s - 1) / 2
    r = np.hypot(xs - cx, ys - cy)
    mask = (r <= s / 2 - 1).astype(np.float64)
    rings = 0.25 + 0.35 * (np.sin(r * 1.3) * 0.5 + 0.5)
    img = np.stack(
        [rings * 1.0, rings * 0.55 + 0.1, 0.12 + 0.4 * (np.cos(xs * 0.7) * 0.5 + 0.5)],
        axis=-1,
    )
    img += rng.uniform(-0.04, 0.04, size=img.shape)
    return np.clip(img, 0.02, 0.62), mask


def generate_scene(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Textured translating background + orbiting sprite x smooth gain.

    All motion is integer px/frame so flow, masks, and tracks are exact and
    compositing the stored parts reproduces the video bit-for-bit.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    W, H, F = spec.width, spec.height, spec.frame_count
    if W < 8 or H < 8 or F < 2:
        raise ConfigError("scene too small to generate")
    vx, vy = int(spec.bg_velocity[0]), int(spec.bg_velocity[1])

    span_x = abs(vx) * (F - 1)
    span_y = abs(vy) * (F - 1)
    canvas = _checker_noise_texture(H + span_y, W + span_x, rng)
    # canvas offset of frame t (sampling window top-left); decreasing offset
    # makes on-screen content translate by +v each frame
    offs = np.zeros((F, 2), dtype=int)
    for t in range(F):
        offs[t, 0] = (span_x - vx * t) if vx >= 0 else (-vx * t)
        offs[t, 1] = (span_y - vy * t) if vy >= 0 else (-vy * t)

    sprite, smask = _sprite_texture(spec.sprite_size, rng)
    s = spec.sprite_size
    pos = np.zeros((F, 2), dtype=int)
    for t in range(F):
        ang = 2 * np.pi * t / F
        cx = spec.sprite_center[0] + spec.sprite_orbit_radius * np.cos(ang)
        cy = spec.sprite_center[1] + spec.sprite_orbit_radius * np.sin(ang)
        pos[t] = (int(round(cx - s / 2)), int(round(cy - s / 2)))

    frames = np.zeros((F, H, W, 3))
    masks = np.zeros((F, 1, H, W))
    gain = np.ones((F, H, W))
    ys, xs = np.mgrid[0:H, 0:W]
    for t in range(F):
        ox, oy = offs[t]
        frame = canvas[oy : oy + H, ox : ox + W].copy()
        px, py = pos[t]
        x0, x1 = max(0, px), min(W, px + s)
        y0, y1 = max(0, py), min(H, py + s)
        m = np.zeros((H, W))
        if x0 < x1 and y0 < y1:
            sm = smask[y0 - py : y1 - py, x0 - px : x1 - px]
            st = sprite[y0 - py : y1 - py, x0 - px : x1 - px]
            region = frame[y0:y1, x0:x1]
            frame[y0:y1, x0:x1] = np.where(sm[..., None] > 0, st, region)
            m[y0:y1, x0:x1] = sm
        masks[t, 0] = m
        if spec.gain_amplitude > 0:
            phase = 2 * np.pi * spec.gain_speed * t / F
            g = 1.0 + spec.gain_amplitude * np.sin(
                2 * np.pi * (xs + ys) / spec.gain_wavelength + phase
            )
        else:
            g = np.ones((H, W))
        # cast shadow follows the sprite on the background only
        shx = px + s / 2 + spec.shadow_offset[0]
        shy = py + s / 2 + spec.shadow_offset[1]
        d = np.hypot(xs - shx, ys - shy)
        soft = np.clip((d - spec.shadow_radius) / 3.0 + 1.0, 0.0, 1.0)
        shadow = spec.shadow_gain + (1.0 - spec.shadow_gain) * soft
        shadow = np.where(m > 0, 1.0, shadow)
        g = g * shadow
        gain[t] = g
        frames[t] = frame * g[..., None]

    if frames.max() > 1.0 + 1e-12:
        raise DataError("scene textures too bright for the gain range")

    # exact flow: background moves (vx,vy); sprite pixels move with the sprite
    fwd = np.zeros((F - 1, H, W, 2))
    bwd = np.zeros((F - 1, H, W, 2))
    for t in range(F - 1):
        dv = pos[t + 1] - pos[t]
        fwd[t][..., 0] = vx
        fwd[t][..., 1] = vy
        fwd[t][masks[t, 0] > 0] = dv
        bwd[t][..., 0] = -vx
        bwd[t][..., 1] = -vy
        bwd[t][masks[t + 1, 0] > 0] = -dv
    flow = build_flow_field(fwd, bwd)

    # tracks: grid of points inside the sprite mask, exact integer motion
    g = spec.track_grid
    lin = np.linspace(s * 0.25, s * 0.75, g).round().astype(int)
    pts = [(x, y) for y in lin for x in lin if smask[y, x] > 0]
    T = len(pts)
    xy = np.zeros((T, F, 2))
    vis = np.zeros((T, F), dtype=bool)
    for i, (sx, sy) in enumerate(pts):
        for t in range(F):
            x = pos[t, 0] + sx
            y = pos[t, 1] + sy
            xy[i, t] = (x, y)
            vis[i, t] = 0 <= x < W and 0 <= y < H
    tracks = TrackSet(xy, vis, W, H)

    return SyntheticScene(
        spec=spec,
        video=VideoVolume(frames),
        flow=flow,
        masks=MaskSequence(masks),
        bg_texture=canvas,
        sprite_texture=sprite,
        sprite_mask=smask,
        gain=gain,
        bg_offsets=offs,
        sprite_positions=pos,
        tracks=tracks,
    )


def recompose_scene(scene: SyntheticScene) -> np.ndarray:
    """Rebuild the video from the stored GT parts (self-consistency oracle)."""
    spec = scene.spec
    W, H, F = spec.width, spec.height, spec.frame_count
    s = spec.sprite_size
    out = np.zeros((F, H, W, 3))
    for t in range(F):
        ox, oy = scene.bg_offsets[t]
        frame = scene.bg_texture[oy : oy + H, ox : ox + W].copy()
        px, py = scene.sprite_positions[t]
        x0, x1 = max(0, px), min(W, px + s)
        y0, y1 = max(0, py), min(H, py + s)
        if x0 < x1 and y0 < y1:
            sm = scene.sprite_mask[y0 - py : y1 - py, x0 - px : x1 - px]
            st = scene.sprite_texture[y0 - py : y1 - py, x0 - px : x1 - px]
            frame[y0:y1, x0:x1] = np.where(
                sm[..., None] > 0, st, frame[y0:y1, x0:x1]
            )
        out[t] = frame * scene.gain[t][..., None]
    return out


# -- scene <-> disk ------------------------------------------------------------


def write_tracks(path, tracks: TrackSet):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# width={tracks.width} height={tracks.height}\n")
        f.write("# track_id frame x y visible\n")
        T, F = tracks.visible.shape
        for i in range(T):
            for t in range(F):
                x, y = tracks.xy[i, t]
                f.write(f"{i} {t} {x:.4f} {y:.4f} {int(tracks.visible[i, t])}\n")


def read_tracks(path) -> TrackSet:
    path = Path(path)
    meta = {}
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for part in line[1:].split():
                    if "=" in part:
                        k, v = part.split("=")
                        meta[k] = int(v)
                continue
            tid, fr, x, y, v = line.split()
            rows.append((int(tid), int(fr), float(x), float(y), int(v)))
    if not rows:
        raise DataError(f"{path}: empty track file")
    T = max(r[0] for r in rows) + 1
    F = max(r[1] for r in rows) + 1
    xy = np.zeros((T, F, 2))
    vis = np.zeros((T, F), dtype=bool)
    for tid, fr, x, y, v in rows:
        xy[tid, fr] = (x, y)
        vis[tid, fr] = bool(v)
    return TrackSet(xy, vis, meta.get("width", 0), meta.get("height", 0))


def write_scene(dirpath, scene: SyntheticScene):
    """Persist a scene in the same formats real inputs use, plus gt.npz."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    write_frames(dirpath / "frames", scene.video)
    write_flow(dirpath / "flow", scene.flow)
    write_masks(dirpath / "masks", scene.masks)
    write_tracks(dirpath / "tracks.txt", scene.tracks)
    np.savez_compressed(
        dirpath / "gt.npz",
        bg_texture=scene.bg_texture,
        sprite_texture=scene.sprite_texture,
        sprite_mask=scene.sprite_mask,
        gain=scene.gain,
        bg_offsets=scene.bg_offsets,
        sprite_positions=scene.sprite_positions,
        video=scene.video.frames,
    )
    (dirpath / "meta.json").write_text(
        json.dumps({"format_version": 1, "scene": scene.spec.to_dict()}, indent=2)
    )


def load_scene(dirpath) -> SyntheticScene:
    dirpath = Path(dirpath)
    meta_path = dirpath / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{dirpath}: missing meta.json (not a scene directory)")
    meta = json.loads(meta_path.read_text())
    spec = SceneSpec.from_dict(meta["scene"])
    video = load_frames(dirpath / "frames")
    flow = load_flow(dirpath / "flow", video)
    masks = load_masks(dirpath / "masks", video.frame_count, 1)
    tracks = read_tracks(dirpath / "tracks.txt")
    gt = np.load(dirpath / "gt.npz")
    return SyntheticScene(
        spec=spec,
        video=video,
        flow=flow,
        masks=masks,
        bg_texture=gt["bg_texture"],
        sprite_texture=gt["sprite_texture"],
        sprite_mask=gt["sprite_mask"],
        gain=gt["gain"],
        bg_offsets=gt["bg_offsets"],
        sprite_positions=gt["sprite_positions"],
        tracks=tracks,
    )
