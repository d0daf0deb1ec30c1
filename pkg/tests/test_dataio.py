import struct

import numpy as np
import pytest

from videolayers import dataio as dio
from videolayers.errors import (
    BadMagicError,
    DataError,
    ShapeMismatchError,
    TruncatedFileError,
)


# -- frames ---------------------------------------------------------------------


def test_load_frames_count_and_scaling(tmp_path):
    rng = np.random.default_rng(0)
    video = rng.uniform(0, 1, size=(3, 4, 4, 3))
    video[0, 0, 0] = 1.0  # a pixel that quantizes to 255 exactly
    dio.write_frames(tmp_path, video)
    loaded = dio.load_frames(tmp_path)
    assert loaded.frame_count == 3
    assert loaded.width == 4 and loaded.height == 4
    assert loaded.frames[0, 0, 0, 0] == 1.0


def test_frames_roundtrip_quantization_bound(tmp_path):
    rng = np.random.default_rng(1)
    video = rng.uniform(0, 1, size=(2, 8, 8, 3))
    dio.write_frames(tmp_path, video)
    loaded = dio.load_frames(tmp_path)
    assert np.abs(loaded.frames - video).max() <= 0.5 / 255 + 1e-12


def test_frames_roundtrip_bytes_identical(tmp_path):
    # write -> load -> write again: identical bytes
    rng = np.random.default_rng(2)
    video = rng.uniform(0, 1, size=(2, 6, 6, 3))
    p1 = dio.write_frames(tmp_path / "a", video)
    loaded = dio.load_frames(tmp_path / "a")
    p2 = dio.write_frames(tmp_path / "b", loaded)
    for a, b in zip(p1, p2):
        assert a.read_bytes() == b.read_bytes()


def test_load_frames_distinct_errors(tmp_path):
    with pytest.raises(DataError):
        dio.load_frames(tmp_path / "missing")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError):
        dio.load_frames(empty)
    bad = tmp_path / "bad"
    dio.write_frames(bad, np.zeros((1, 4, 4, 3)))
    dio.write_texture(bad / "00001.png", np.zeros((5, 4, 3)))
    with pytest.raises(ShapeMismatchError):
        dio.load_frames(bad)
    corrupt = tmp_path / "corrupt"
    corrupt.mkdir()
    (corrupt / "00000.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        dio.load_frames(corrupt)


def test_write_texture_clamps_with_warning(tmp_path):
    with pytest.warns(UserWarning):
        dio.write_texture(tmp_path / "t.png", np.full((4, 4, 3), 1.5))
    from PIL import Image

    img = np.asarray(Image.open(tmp_path / "t.png"))
    assert img.max() == 255


# -- flo -------------------------------------------------------------------------


def test_flo_byte_level_fixture(tmp_path):
    # hand-written 2x2 field with known values, read back exactly
    path = tmp_path / "f.flo"
    vals = np.array(
        [[[1.5, -2.25], [0.0, 3.0]], [[-0.5, 0.125], [7.0, -1.0]]], dtype=np.float32
    )
    with open(path, "wb") as f:
        f.write(struct.pack("<f", 202021.25))
        f.write(struct.pack("<ii", 2, 2))
        f.write(vals.tobytes())
    flow = dio.read_flo(path)
    np.testing.assert_array_equal(flow, vals.astype(np.float64))


def test_flo_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    field = rng.normal(size=(5, 7, 2)).astype(np.float32)
    dio.write_flo(tmp_path / "x.flo", field)
    back = dio.read_flo(tmp_path / "x.flo")
    np.testing.assert_array_equal(back.astype(np.float32), field)
    dio.write_flo(tmp_path / "y.flo", back)
    assert (tmp_path / "x.flo").read_bytes() == (tmp_path / "y.flo").read_bytes()


def test_flo_distinct_errors(tmp_path):
    bad = tmp_path / "bad.flo"
    bad.write_bytes(struct.pack("<f", 123.0) + struct.pack("<ii", 2, 2) + b"\0" * 32)
    with pytest.raises(BadMagicError):
        dio.read_flo(bad)
    trunc = tmp_path / "trunc.flo"
    trunc.write_bytes(struct.pack("<f", 202021.25) + struct.pack("<ii", 4, 4))
    with pytest.raises(TruncatedFileError):
        dio.read_flo(trunc)


def test_zero_flow_interior_valid():
    fwd = np.zeros((1, 8, 8, 2))
    bwd = np.zeros((1, 8, 8, 2))
    field = dio.build_flow_field(fwd, bwd)
    assert field.forward_valid.all()
    assert field.backward_valid.all()


def test_out_of_bounds_flow_invalid():
    fwd = np.zeros((1, 8, 8, 2))
    fwd[0, :, -1, 0] = 5.0  # right border points 5 px off frame
    bwd = np.zeros((1, 8, 8, 2))
    field = dio.build_flow_field(fwd, bwd)
    assert not field.forward_valid[0, :, -1].any()
    assert field.forward_valid[0, :, 0].all()


# -- synthetic scene -----------------------------------------------------------------


@pytest.fixture(scope="module")
def scene():
    return dio.generate_scene(dio.SceneSpec(), seed=0)


def test_scene_zero_gain_identity():
    spec = dio.SceneSpec(gain_amplitude=0.0, shadow_gain=1.0)
    s = dio.generate_scene(spec, seed=1)
    assert (s.gain == 1.0).all()
    recomposed = dio.recompose_scene(s)
    np.testing.assert_array_equal(recomposed, s.video.frames)


def test_scene_background_flow_constant(scene):
    vx, vy = scene.spec.bg_velocity
    bg = scene.masks.masks[:-1, 0] == 0
    for t in range(scene.spec.frame_count - 1):
        np.testing.assert_array_equal(scene.flow.forward[t][bg[t], 0], vx)
        np.testing.assert_array_equal(scene.flow.forward[t][bg[t], 1], vy)


def test_scene_self_consistency_exact(scene):
    np.testing.assert_array_equal(dio.recompose_scene(scene), scene.video.frames)


def test_scene_self_consistency_other_seeds():
    for seed in (7, 8):
        s = dio.generate_scene(dio.SceneSpec(frame_count=6), seed=seed)
        np.testing.assert_array_equal(dio.recompose_scene(s), s.video.frames)


def test_scene_values_in_range(scene):
    assert scene.video.frames.min() >= 0.0
    assert scene.video.frames.max() <= 1.0
    assert scene.gain.min() > 0.0


def test_scene_tracks_follow_sprite(scene):
    # track displacement equals sprite displacement on visible spans
    d_pos = np.diff(scene.sprite_positions, axis=0)
    for i in range(scene.tracks.xy.shape[0]):
        d_track = np.diff(scene.tracks.xy[i], axis=0)
        np.testing.assert_array_equal(d_track, d_pos)


def test_scene_flow_validity_symmetric_on_background(scene):
    # both directions derive from the same GT motion: background far from
    # the sprite is valid both ways
    m = scene.masks.masks
    vx, vy = scene.spec.bg_velocity
    H, W = scene.spec.height, scene.spec.width
    for t in range(scene.spec.frame_count - 1):
        # background at t whose flow target is also background at t+1
        # (shift the t+1 mask back by the background motion), away from borders
        src_y, src_x = np.mgrid[0:H, 0:W]
        b = 2 + max(abs(vx), abs(vy))
        border = np.zeros((H, W), dtype=bool)
        border[:, :b] = border[:, -b:] = border[:b, :] = border[-b:, :] = True
        # forward field lives on frame-t pixels; its target is at +v in t+1
        ty = np.clip(src_y + vy, 0, H - 1)
        tx = np.clip(src_x + vx, 0, W - 1)
        quiet_f = (m[t, 0] == 0) & (m[t + 1, 0][ty, tx] == 0) & ~border
        assert scene.flow.forward_valid[t][quiet_f].all()
        # backward field lives on frame-(t+1) pixels; its target is at -v in t
        sy = np.clip(src_y - vy, 0, H - 1)
        sx = np.clip(src_x - vx, 0, W - 1)
        quiet_b = (m[t + 1, 0] == 0) & (m[t, 0][sy, sx] == 0) & ~border
        assert scene.flow.backward_valid[t][quiet_b].all()


def test_scene_disk_roundtrip(tmp_path, scene):
    dio.write_scene(tmp_path / "scene", scene)
    loaded = dio.load_scene(tmp_path / "scene")
    assert loaded.video.frame_count == scene.video.frame_count
    # 8-bit quantization bound on frames; exact on flow and gt arrays
    assert np.abs(loaded.video.frames - scene.video.frames).max() <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(loaded.flow.forward, scene.flow.forward)
    np.testing.assert_array_equal(loaded.gain, scene.gain)
    np.testing.assert_array_equal(loaded.tracks.visible, scene.tracks.visible)
    np.testing.assert_allclose(loaded.tracks.xy, scene.tracks.xy, atol=1e-4)


def test_tracks_file_roundtrip(tmp_path, scene):
    dio.write_tracks(tmp_path / "tr.txt", scene.tracks)
    back = dio.read_tracks(tmp_path / "tr.txt")
    np.testing.assert_allclose(back.xy, scene.tracks.xy, atol=1e-4)
    np.testing.assert_array_equal(back.visible, scene.tracks.visible)
    assert back.width == scene.tracks.width
