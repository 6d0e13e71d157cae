import numpy as np
import pytest
import torch

from fantasyid.conditioning import (FaceAbstractor, FusionConfig, FusionTransformer, IdEncoder,
                                    QueryResampler, ResConv1dHead, ToyVisualEncoder,
                                    build_id_descriptor, grid_tokens)
from fantasyid.mesh3d import ConfigError, MeshHierarchy, icosphere
from fantasyid.numerics import Rng, grad_check, init_parameters

MICRO = FusionConfig(layers=1, heads=2, c_vert=8, res_blocks=1, abstractor_factor=4, c_vis=8, c_out=16,
                     n_tokens=10, resampler_depth=1)


@pytest.fixture(scope="module")
def small_hierarchy():
    return MeshHierarchy.build(icosphere(1), [10], 5)


def init(module, seed=0, dtype=torch.float64):
    init_parameters(module, Rng(seed))
    return module.to(dtype)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def test_visual_encoder_stride_algebra(f64):
    enc = init(ToyVisualEncoder(8))
    assert enc(torch.randn(2, 3, 64, 64)).shape == (2, 8, 16, 16)
    zero_bias = init(ToyVisualEncoder(8))
    assert torch.count_nonzero(zero_bias(torch.zeros(1, 3, 64, 64))) == 0


def test_visual_encoder_gradient(f64):
    enc = init(ToyVisualEncoder(4, hidden=4))
    x = torch.randn(1, 3, 16, 16)
    probe = torch.randn(1, 4, 4, 4)
    assert grad_check(lambda x: (enc(x) * probe).sum(), x, max_elems=60) < 1e-5


def test_abstractor_shapes_and_constant_grid(f64):
    ab = init(FaceAbstractor(8, 4))
    assert ab(torch.randn(1, 8, 16, 16)).shape == (1, 8, 4, 4)
    zero_(ab)  # zero residual branches are identity blocks
    const = torch.full((1, 8, 16, 16), 0.7)
    torch.testing.assert_close(ab(const), torch.full((1, 8, 4, 4), 0.7))
    with pytest.raises(ConfigError):
        ab(torch.randn(1, 8, 10, 10))


def test_abstractor_locality(f64):
    ab = init(FaceAbstractor(8, 4))
    x = torch.randn(1, 8, 16, 16)
    y = x.clone()
    y[..., :8, :8] = 0
    d = (ab(x) - ab(y)).pow(2).sum(1)[0]
    assert d[:2, :2].sum() > d[2:, 2:].sum()


def test_resampler_single_cell_and_shape(f64):
    rs = init(QueryResampler(8, 1, heads=1, depth=1))
    cell = torch.randn(1, 8, 1, 1)
    torch.testing.assert_close(rs(cell)[0, 0], rs.wv(cell[:, :, 0, 0])[0])
    rs5 = init(QueryResampler(8, 5, heads=2))
    assert rs5(torch.randn(2, 8, 3, 7)).shape == (2, 5, 8)
    assert rs5(torch.randn(2, 8, 6, 2)).shape == (2, 5, 8)


def test_resampler_ignores_cell_order_but_abstractor_does_not(f64):
    rs = init(QueryResampler(8, 4, heads=2))
    ab = init(FaceAbstractor(8, 4))
    grid = torch.randn(1, 8, 16, 16)
    perm = torch.randperm(256, generator=torch.Generator().manual_seed(0))
    shuffled = grid.reshape(1, 8, 256)[..., perm].reshape(1, 8, 16, 16)
    torch.testing.assert_close(rs(shuffled), rs(grid))
    assert (ab(shuffled) - ab(grid)).abs().max() > 1e-3


def test_fusion_token_count_and_residual_identity(f64):
    fus = init(FusionTransformer(32, 32, layers=6, heads=4))
    x_v = torch.randn(1, 314, 32)
    x_f = torch.randn(1, 16, 32)
    assert fus(x_v, x_f).shape == (1, 330, 32)
    for layer in fus.layers:
        zero_(layer)
    out = fus(x_v, x_f)
    torch.testing.assert_close(out, torch.cat([x_v, fus.align(x_f)], 1))


def test_fusion_mixes_modalities(f64):
    fus = init(FusionTransformer(8, 8, layers=1, heads=2))
    x_v = torch.randn(1, 5, 8)
    x_f = torch.randn(1, 4, 8, requires_grad=True)
    out = fus(x_v, x_f)[:, :5].sum()
    (g,) = torch.autograd.grad(out, x_f)
    assert g[0, 2].abs().sum() > 0


def test_head_zero_projection_and_slicing(f64):
    head = init(ResConv1dHead(8, 16, 10, blocks=4))
    fused = torch.randn(2, 14, 8)
    assert head(fused).shape == (2, 10, 16)
    fused2 = fused.clone()
    fused2[:, 10:] += 1.0  # tokens past N' are sliced off
    torch.testing.assert_close(head(fused), head(fused2))
    zero_(head.proj)
    assert torch.count_nonzero(head(fused)) == 0
    # fewer tokens than N' are zero-padded
    assert head(torch.randn(1, 3, 8)).shape == (1, 10, 16)


def micro_encoder(hier, **flags):
    return init(IdEncoder(MICRO, hier, **flags))


def test_descriptor_shape_all_flags(f64, small_hierarchy):
    img = torch.randn(2, 3, 64, 64)
    verts = torch.as_tensor(small_hierarchy.meshes[0].vertices).unsqueeze(0).expand(2, -1, -1)
    for flags in ({}, {"drop_3d": True}, {"use_query_resampler": True}):
        enc = micro_encoder(small_hierarchy, **flags)
        assert enc(img, verts).shape == (2, 10, 16)


def test_drop_3d_ignores_mesh(f64, small_hierarchy):
    enc = micro_encoder(small_hierarchy, drop_3d=True)
    img = torch.randn(1, 3, 64, 64)
    v = torch.as_tensor(small_hierarchy.meshes[0].vertices).unsqueeze(0)
    a = enc(img, v)
    b = enc(img, v * 1.3 + 0.2)
    assert torch.equal(a, b)
    assert torch.equal(a, enc(img, None))


def test_gradients_reach_both_paths(f64, small_hierarchy):
    enc = micro_encoder(small_hierarchy)
    img = torch.randn(1, 3, 64, 64)
    v = torch.as_tensor(small_hierarchy.meshes[0].vertices).unsqueeze(0)
    (enc(img, v) * torch.randn(1, 10, 16)).sum().backward()
    assert enc.visual.conv1.weight.grad.abs().sum() > 0
    assert enc.vertex.convs[0].lin.weight.grad.abs().sum() > 0


def test_descriptor_micro_gradient(f64, small_hierarchy):
    enc = micro_encoder(small_hierarchy)
    img = torch.randn(1, 3, 64, 64) * 0.5
    v = torch.as_tensor(small_hierarchy.meshes[0].vertices).unsqueeze(0)
    probe = torch.randn(1, 10, 16)
    err = grad_check(lambda i, vv: (enc(i, vv) * probe).sum(), [img, v], max_elems=40, rng=Rng(1))
    assert err < 1e-4


def test_build_id_descriptor_deterministic(f64, small_hierarchy):
    enc = micro_encoder(small_hierarchy)
    ref = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    verts = small_hierarchy.meshes[0].vertices
    a = build_id_descriptor(enc, ref, verts, identity="id0", frame_index=3)
    b = build_id_descriptor(enc, ref, verts)
    assert a.tokens.shape == (10, 16) and a.identity == "id0" and a.frame_index == 3
    assert torch.equal(a.tokens, b.tokens)
    other = build_id_descriptor(enc, 255 - ref, verts)
    assert (other.tokens - a.tokens).norm() > 0


def test_grid_tokens_row_major():
    g = torch.arange(2 * 2 * 3).reshape(1, 2, 2, 3)
    t = grid_tokens(g)
    assert t.shape == (1, 6, 2)
    assert t[0, 1].tolist() == [1, 7]


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(c_vert=30, heads=4)
    with pytest.raises(ConfigError):
        FusionConfig(layers=0)


def test_encoder_rejects_wrong_hierarchy(small_hierarchy):
    with pytest.raises(ConfigError):
        IdEncoder(FusionConfig(n_tokens=12, c_vert=8, heads=2), small_hierarchy)
