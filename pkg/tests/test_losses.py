import numpy as np
import pytest

from videolayers import autodiff as ad
from videolayers import dataio as dio
from videolayers import losses as ls
from videolayers import trainer as tr
from videolayers.autodiff import Tensor
from videolayers.errors import NumericError
from videolayers.model import LayeredModel, MlpSpec, ModelConfig
from videolayers import encoding as enc


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# -- reconstruction -------------------------------------------------------------


def test_rgb_perfect_zero():
    c = np.array([[0.3, 0.4, 0.5]])
    assert ls.loss_rgb(T(c), c, 1.0).item() == 0.0


def test_rgb_derived_value():
    # ||(1,1,1) - (0,0,0)||^2 = 3 at unit weight
    out = ls.loss_rgb(T([[1.0, 1.0, 1.0]]), np.zeros((1, 3)), 1.0)
    assert out.item() == pytest.approx(3.0)


def test_rgb_weight_linearity():
    pred = T([[0.9, 0.1, 0.4]])
    tgt = np.array([[0.2, 0.3, 0.1]])
    assert ls.loss_rgb(pred, tgt, 2.0).item() == pytest.approx(
        2 * ls.loss_rgb(pred, tgt, 1.0).item()
    )


def test_grad_zero_for_constant_video():
    z = np.zeros((4, 3))
    v = np.ones(4, dtype=bool)
    out = ls.loss_grad(T(z), z, v, T(z), z, v, 1.0)
    assert out.item() == 0.0


def test_grad_derived_value():
    # one point, x-difference (0.1,0,0): loss = 0.01
    dx = T([[0.1, 0.0, 0.0]])
    z = np.zeros((1, 3))
    v = np.ones(1, dtype=bool)
    out = ls.loss_grad(dx, z, v, T(z), z, v, 1.0)
    assert out.item() == pytest.approx(0.01)


def test_grad_drops_invalid_offsets():
    dx = T([[0.5, 0.0, 0.0]])
    z = np.zeros((1, 3))
    out = ls.loss_grad(dx, z, np.zeros(1, dtype=bool), T(z), z,
                       np.zeros(1, dtype=bool), 1.0)
    assert out.item() == 0.0


# -- sparsity ----------------------------------------------------------------------


def test_sparsity_fully_visible_layer_free():
    alphas = [T(np.ones(3)), T(np.zeros(3))]
    colors = [T(np.full((3, 3), 0.8)), T(np.full((3, 3), 0.5))]
    assert ls.loss_sparsity(alphas, colors, 1.0).item() == 0.0


def test_sparsity_derived_value():
    # alpha_0 = 0, c_0 = (1,1,1): ||c||^2 = 3
    alphas = [T(np.zeros(1)), T(np.ones(1))]
    colors = [T(np.ones((1, 3))), T(np.full((1, 3), 0.9))]
    assert ls.loss_sparsity(alphas, colors, 1.0).item() == pytest.approx(3.0)


def test_sparsity_background_excluded():
    # only the background (last layer) has color: contributes nothing
    alphas = [T(np.ones(2)), T(np.zeros(2))]
    colors = [T(np.zeros((2, 3))), T(np.ones((2, 3)))]
    assert ls.loss_sparsity(alphas, colors, 1.0).item() == 0.0


# -- flow ---------------------------------------------------------------------------


def test_flow_color_derived_value():
    # ||(0,0)-(0.3,0.4)|| = 0.5 with alpha 1
    uv_p = [T([[0.0, 0.0]])]
    uv_q = [T([[0.3, 0.4]])]
    alphas = [T(np.ones(1))]
    v = np.ones(1, dtype=bool)
    out = ls.loss_flow_color(uv_p, uv_q, alphas, v, 1.0)
    assert out.item() == pytest.approx(0.5, abs=1e-9)


def test_flow_color_zero_when_alpha_zero():
    uv_p = [T([[0.0, 0.0]])]
    uv_q = [T([[0.5, -0.2]])]
    alphas = [T(np.zeros(1))]
    out = ls.loss_flow_color(uv_p, uv_q, alphas, np.ones(1, dtype=bool), 1.0)
    assert out.item() == pytest.approx(0.0, abs=1e-9)


def test_flow_zero_for_consistent_model():
    uv = [T([[0.1, 0.2]])]
    alphas = [T(np.array([0.7]))]
    v = np.ones(1, dtype=bool)
    assert ls.loss_flow_color(uv, uv, alphas, v, 1.0).item() < 1e-9
    assert ls.loss_flow_alpha(alphas, alphas, v, 1.0).item() == 0.0


def test_flow_invalid_contributes_zero():
    uv_p = [T([[0.0, 0.0]])]
    uv_q = [T([[0.9, 0.9]])]
    alphas = [T(np.ones(1))]
    v = np.zeros(1, dtype=bool)
    assert ls.loss_flow_color(uv_p, uv_q, alphas, v, 1.0).item() == 0.0
    assert ls.loss_flow_alpha(alphas, alphas, v, 1.0).item() == 0.0


# -- bootstrap -------------------------------------------------------------------------


def test_bootstrap_matched_prediction_small():
    a = [T(np.full(8, 1.0 - 1e-7))]
    m = np.ones((8, 1))
    out = ls.loss_bootstrap(a, m, np.ones(8, dtype=bool), 1.0, 0, 100)
    assert out.item() <= -np.log(1 - ls.BCE_CLAMP) + 1e-9


def test_bootstrap_derived_ln2():
    a = [T(np.array([0.5]))]
    m = np.ones((1, 1))
    out = ls.loss_bootstrap(a, m, np.ones(1, dtype=bool), 1.0, 0, 100)
    assert out.item() == pytest.approx(np.log(2.0))


def test_bootstrap_gate_exact_zero():
    a = [T(np.array([0.5]))]
    m = np.ones((1, 1))
    out = ls.loss_bootstrap(a, m, np.ones(1, dtype=bool), 1.0, 100, 100)
    assert out.item() == 0.0


# -- residual NCC ----------------------------------------------------------------------


def test_ncc_affine_invariance():
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(5, 27))
    probe = T(2.5 * ref + 0.7)
    psi, var, keep = ls.masked_ncc(ref, probe, np.ones((5, 27)))
    assert keep.all()
    np.testing.assert_allclose(psi.data, 1.0, atol=1e-6)


def test_ncc_anticorrelation():
    rng = np.random.default_rng(1)
    ref = rng.normal(size=(3, 27))
    probe = T(-ref + 0.2)
    psi, _, keep = ls.masked_ncc(ref, probe, np.ones((3, 27)))
    assert keep.all()
    np.testing.assert_allclose(psi.data, -1.0, atol=1e-6)


def test_ncc_matches_reference_statistics():
    # independent oracle: np.corrcoef on a permuted pattern
    ref = np.arange(1.0, 28.0)[None, :]
    rng = np.random.default_rng(2)
    probe = ref[:, rng.permutation(27)]
    psi, _, keep = ls.masked_ncc(ref, T(probe), np.ones((1, 27)))
    expect = np.corrcoef(ref[0], probe[0])[0, 1]
    assert keep.all()
    assert abs(psi.item() - expect) < 1e-10


def test_ncc_degenerate_skipped():
    ref = np.full((1, 27), 0.5)
    probe = T(np.random.default_rng(3).normal(size=(1, 27)))
    _, _, keep = ls.masked_ncc(ref, probe, np.ones((1, 27)))
    assert not keep.any()


def test_ncc_respects_mask():
    rng = np.random.default_rng(4)
    ref = rng.normal(size=(1, 27))
    probe_vals = ref.copy()
    probe_vals[0, :6] = 99.0  # corrupted but masked out
    mask = np.ones((1, 27))
    mask[0, :6] = 0.0
    psi, _, keep = ls.masked_ncc(ref, T(probe_vals), mask)
    assert keep.all()
    assert psi.item() == pytest.approx(1.0, abs=1e-6)


def test_residual_consistency_derived_value():
    # probe: positive affine map of ref with sd 0.01
    # loss = 0.1 * ((1 - 1) + 16 * 1e-4) = 1.6e-4
    rng = np.random.default_rng(5)
    ref = rng.normal(size=(1, 27))
    z = (ref - ref.mean()) / ref.std()
    probe = T(z * 0.01 + 3.0)
    w = ls.LossWeights()
    out, kept = ls.loss_residual_consistency(ref, probe, np.ones((1, 27)), w)
    assert kept == 1
    assert out.item() == pytest.approx(1.6e-4, rel=1e-5)


def test_residual_consistency_anticorrelated_bound():
    rng = np.random.default_rng(6)
    ref = rng.normal(size=(2, 27))
    z = (ref - ref.mean(axis=1, keepdims=True)) / ref.std(axis=1, keepdims=True)
    probe = T(-z * 0.001 + 1.0)
    w = ls.LossWeights()
    out, _ = ls.loss_residual_consistency(ref, probe, np.ones((2, 27)), w)
    assert out.item() >= 2 * w.residual_consistency * 0.999


def test_residual_consistency_all_skipped_zero():
    ref = np.full((2, 27), 1.0)
    probe = T(np.full((2, 27), 2.0))
    out, kept = ls.loss_residual_consistency(ref, probe, np.ones((2, 27)),
                                             ls.LossWeights())
    assert kept == 0
    assert out.item() == 0.0


# -- regularizers --------------------------------------------------------------------------


def test_residual_reg_neutral_zero():
    out = ls.loss_residual_reg([T(np.ones((4, 3)))], 1.0, 1.0)
    assert out.item() == 0.0


def test_residual_reg_derived_value():
    out = ls.loss_residual_reg([T([[2.0, 1.0, 1.0]])], 1.0, 0.5)
    assert out.item() == pytest.approx(0.5)


def test_residual_reg_channel_permutation_invariant():
    a = ls.loss_residual_reg([T([[2.0, 1.3, 0.7]])], 1.0, 1.0).item()
    b = ls.loss_residual_reg([T([[0.7, 2.0, 1.3]])], 1.0, 1.0).item()
    assert a == pytest.approx(b)


def test_alpha_reg_one_hot_negligible():
    alphas = [T(np.array([1.0 - 1e-7])), T(np.array([1e-7]))]
    out = ls.loss_alpha_reg(alphas, 1.0)
    assert out.item() <= -np.log(1 - ls.BCE_CLAMP) + 1e-12


def test_alpha_reg_derived_ln2():
    alphas = [T(np.array([0.5])), T(np.array([0.5]))]
    assert ls.loss_alpha_reg(alphas, 1.0).item() == pytest.approx(np.log(2.0))


def test_alpha_reg_monotone_in_max():
    vals = [0.5, 0.7, 0.9, 0.99]
    losses = [
        ls.loss_alpha_reg([T(np.array([v])), T(np.array([1 - v]))], 1.0).item()
        for v in vals
    ]
    assert all(a > b for a, b in zip(losses, losses[1:]))


# -- total ----------------------------------------------------------------------------------


def tiny_model_and_batch(residual_mode="multiplicative", seed=0):
    cfg = ModelConfig(
        mapping_frequencies=2,
        mapping_mlp=MlpSpec(16, 2),
        texture_mlp=MlpSpec(16, 1),
        residual_mlp=MlpSpec(16, 1),
        alpha_mlp=MlpSpec(16, 1),
        grid3d=enc.HashGridConfig(3, 2, 2, 8, 3, 1.6),
        grid2d=enc.HashGridConfig(2, 2, 2, 8, 4, 1.6),
        residual_mode=residual_mode,
    )
    model = LayeredModel(cfg, seed=seed)
    model.randomize(seed + 50)
    scene = dio.generate_scene(
        dio.SceneSpec(width=32, height=32, frame_count=5, sprite_size=12,
                      sprite_orbit_radius=5, sprite_center=(16, 16)),
        seed=seed,
    )
    data = tr.TrainData.from_scene(scene)
    rng = np.random.default_rng(seed)
    batch = tr.sample_batch(data, rng, 64, 1)
    edge_index = tr.EdgeIndex(data.video, 3)
    batch.patches = tr.sample_edge_patches(data.video, rng, edge_index, 4, 3)
    return model, batch


def test_total_all_weights_zero():
    model, batch = tiny_model_and_batch()
    w = ls.LossWeights(rgb=0, grad=0, sparsity=0, flow_color=0, flow_alpha=0,
                       bootstrap=0, residual_consistency=0, residual_reg=0,
                       alpha_reg=0)
    total, breakdown = ls.total_loss(model, batch, w, 0, 100, None)
    assert total.item() == 0.0


def test_total_breakdown_sums():
    model, batch = tiny_model_and_batch()
    total, breakdown = ls.total_loss(model, batch, ls.LossWeights(), 0, 100, None)
    parts = sum(v for k, v in breakdown.items() if k != "total")
    assert abs(parts - breakdown["total"]) < 1e-9
    assert abs(total.item() - breakdown["total"]) < 1e-12


def test_total_single_term_matches_unit_op():
    model, batch = tiny_model_and_batch()
    w = ls.LossWeights(rgb=1.0, grad=0, sparsity=0, flow_color=0, flow_alpha=0,
                       bootstrap=0, residual_consistency=0, residual_reg=0,
                       alpha_reg=0)
    total, _ = ls.total_loss(model, batch, w, 0, 100, None)
    out = model.forward(batch.points)
    expect = ls.loss_rgb(out["chat"], batch.colors, 1.0)
    assert total.item() == pytest.approx(expect.item(), rel=1e-12)


def test_total_nonfinite_aborts_with_name():
    model, batch = tiny_model_and_batch()
    batch.colors[0, 0] = np.nan
    with pytest.raises(NumericError, match="rgb"):
        ls.total_loss(model, batch, ls.LossWeights(), 0, 100, None)


def test_every_term_nonnegative_random_models():
    for seed in range(3):
        model, batch = tiny_model_and_batch(seed=seed)
        _, breakdown = ls.total_loss(model, batch, ls.LossWeights(), 0, 100, None)
        for name, v in breakdown.items():
            assert v >= 0.0, name


def test_stop_gradient_neutral_residual_equivalence():
    # mapping gradients identical with residual nets absent vs present with
    # neutral output, when the residual losses are off
    w = ls.LossWeights(residual_consistency=0, residual_reg=0)
    model_a, batch = tiny_model_and_batch(seed=3)
    # force residual output exactly neutral (zero all residual-net params)
    for name, p in model_a.param_groups().items():
        if name.startswith("residual"):
            p.data[:] = 0.0
    total_a, _ = ls.total_loss(model_a, batch, w, 0, 100, None)
    model_a.zero_grad()
    total_a.backward()
    grads_a = {
        k: p.grad.copy() for k, p in model_a.param_groups().items()
        if k.startswith("mapping") and p.grad is not None
    }

    model_b, _ = tiny_model_and_batch(seed=3)
    cfg_none = ModelConfig(**{**model_b.cfg.__dict__, "residual_mode": "none"})
    model_none = LayeredModel(cfg_none, seed=3)
    # copy the shared parameter groups so both models start identically
    src = model_b.param_groups()
    for name, p in model_none.param_groups().items():
        p.data = src[name].data.copy()
    total_b, _ = ls.total_loss(model_none, batch, w, 0, 100, None)
    model_none.zero_grad()
    total_b.backward()
    for k, ga in grads_a.items():
        gb = model_none.param_groups()[k].grad
        np.testing.assert_allclose(ga, gb, atol=1e-12)


def test_visibility_index_masking():
    idx = ls.VisibilityIndex(1, 4, bins=64, extraction_size=256)
    uv = np.array([[0.0, 0.0], [0.5, 0.5]])
    alpha = np.array([1.0, 0.0])
    idx.update_frame(0, 2, uv, alpha)
    vis = idx.visible(0, np.array([[0.0, 0.0], [0.5, 0.5]]), np.array([2, 2]))
    assert vis[0] and not vis[1]
    # frame without update: nothing visible
    assert not idx.visible(0, uv, np.array([1, 1])).any()


def test_format_loss_line():
    line = ls.format_loss_line(42, {"rgb": 0.25, "total": 1.0})
    assert line.startswith("iter=42")
    assert "rgb=0.25" in line and "total=1" in line
