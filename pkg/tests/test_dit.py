import pytest
import torch

from fantasyid.conditioning import attend
from fantasyid.dit import (Denoiser, DenoiserConfig, MMDiTBlock, NULL_ID, PatchCodec, null_tokens,
                           patchify, timestep_sinusoid, tokenize, unpatchify, TimestepEmbedder)
from fantasyid.mesh3d import ConfigError
from fantasyid.numerics import (DimensionError, Rng, grad_check, init_parameters, named_parameters,
                                read_tensor_file, write_tensor_file)

MICRO = dict(blocks=2, hidden=16, heads=2, patch=(1, 2, 2), frames=4, height=8, width=8, id_tokens=10)


def make(seed=0, **kw):
    torch.manual_seed(seed)
    model = Denoiser(DenoiserConfig(**{**MICRO, **kw}))
    init_parameters(model, Rng(seed))
    return model.double()


def inputs(b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(b, 4, 8, 8, 3, generator=g, dtype=torch.float64)
    t = torch.tensor([10, 500][:b])
    text = torch.tensor([tokenize("a person turns to the left")] * b)
    v_f = torch.randn(b, 10, 16, generator=g, dtype=torch.float64)
    return z, t, text, v_f


def wake_adapters(model, scale=0.3):
    gen = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("inject") and name.endswith("proj.weight") or ".ada." in name:
                p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def test_patch_count_and_round_trip():
    video = torch.randn(1, 8, 32, 32, 3)
    tok = patchify(video, (1, 4, 4))
    assert tok.shape == (1, 512, 48)
    assert torch.equal(unpatchify(tok, (1, 4, 4), (8, 32, 32, 3)), video)
    with pytest.raises(DimensionError):
        patchify(torch.randn(1, 8, 30, 32, 3), (1, 4, 4))


def test_patch_codec_identity_and_gradient(f64):
    codec = PatchCodec((1, 2, 2), 3, 12)
    with torch.no_grad():
        codec.weight.copy_(torch.eye(12))
    video = torch.randn(1, 2, 4, 4, 3)
    assert torch.equal(codec.decode(codec.encode(video), (2, 4, 4, 3)), video)
    probe = torch.randn(1, 8, 12)
    assert grad_check(lambda v: (codec.encode(v) * probe).sum(), video) < 1e-6


def test_timestep_embedding():
    s = timestep_sinusoid(torch.tensor(0), 16)
    assert torch.equal(s[:8], torch.zeros(8, dtype=s.dtype))
    assert torch.equal(s[8:], torch.ones(8, dtype=s.dtype))
    emb = TimestepEmbedder(64)
    init_parameters(emb, Rng(0))
    e = emb(torch.arange(1000)).double()
    assert e.shape == (1000, 64)
    d = torch.cdist(e, e)
    d.fill_diagonal_(float("inf"))
    assert d.min() > 0


def test_tokenizer():
    ids = tokenize("A person nods slowly", 8, 256)
    assert len(ids) == 8 and ids[4:] == [0] * 4 and all(2 <= i < 256 for i in ids[:4])
    assert tokenize("a b c d e f g h i j", 8) == tokenize("a b c d e f g h", 8)
    assert null_tokens(8) == [NULL_ID] * 8


def test_zero_gate_block_is_identity(f64):
    blk = MMDiTBlock(16, 2)
    init_parameters(blk, Rng(0))
    txt, vid, t_emb = torch.randn(1, 3, 16), torch.randn(1, 5, 16), torch.randn(1, 16)
    t2, v2 = blk(txt, vid, t_emb)
    assert torch.equal(t2, txt) and torch.equal(v2, vid)


def test_text_influences_video(f64):
    model = make()
    wake_adapters(model)
    z, t, _, v_f = inputs()
    a = model(z, t, torch.tensor([tokenize("turns left")] * 2), v_f)
    b = model(z, t, torch.tensor([tokenize("nods slowly")] * 2), v_f)
    assert (a - b).abs().max() > 0


def test_output_shape_all_modes(f64):
    z, t, text, v_f = inputs()
    for mode in ("layer_aware", "shared", "none"):
        assert make(injection=mode)(z, t, text, v_f).shape == z.shape


def test_warm_start_ignores_descriptor(f64):
    model = make()
    z, t, text, v_f = inputs()
    a = model(z, t, text, v_f)
    b = model(z, t, text, v_f * 10 + 3)
    assert torch.equal(a, b)


def test_none_mode_ignores_descriptor(f64):
    model = make(injection="none")
    wake_adapters(model)
    z, t, text, v_f = inputs()
    assert torch.equal(model(z, t, text, v_f), model(z, t, text, -v_f))


def test_single_token_descriptor_is_uniform(f64):
    model = make(id_tokens=1)
    ad = model.adapter(0)
    z = torch.randn(1, 6, 16)
    v_f = torch.randn(1, 1, 16)
    a = attend(ad.wq(z), ad.wk(v_f), ad.wv(v_f), ad.heads)
    torch.testing.assert_close(a, a[:, :1].expand_as(a))


def test_shared_has_fewer_parameters():
    count = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
    assert count(make(injection="shared")) < count(make(injection="layer_aware"))
    assert count(make(injection="none")) < count(make(injection="shared"))


def test_descriptor_shape_mismatch(f64):
    model = make()
    z, t, text, _ = inputs()
    with pytest.raises(DimensionError):
        model(z, t, text, torch.randn(2, 9, 16))


def test_adapters_are_independent_per_layer(f64):
    model = make()
    wake_adapters(model)
    z, t, text, v_f = inputs()
    model(z, t, text, v_f, detach_layers=frozenset({1})).pow(2).sum().backward()
    g0 = model.inject[0].wq.weight.grad
    g1 = model.inject[1].wq.weight.grad
    assert g0 is not None and g0.abs().sum() > 0
    assert g1 is None or torch.count_nonzero(g1) == 0


def test_denoise_micro_gradient(f64):
    model = make()
    wake_adapters(model)
    z, t, text, v_f = inputs(b=1)
    probe = torch.randn_like(z)
    err = grad_check(lambda zz, vv: (model(zz, t, text, vv) * probe).sum(), [z, v_f], max_elems=40, rng=Rng(2))
    assert err < 1e-4


def test_checkpoint_round_trip(tmp_path, f64):
    model = make(seed=3)
    wake_adapters(model)
    params = {k: v.detach() for k, v in named_parameters(model).items()}
    write_tensor_file(tmp_path / "m.fid", params, {"injection": "layer_aware"})
    tensors, header = read_tensor_file(tmp_path / "m.fid")
    fresh = make(seed=9)
    with torch.no_grad():
        for k, p in named_parameters(fresh).items():
            p.copy_(tensors[k])
    z, t, text, v_f = inputs()
    assert header["injection"] == "layer_aware"
    assert torch.equal(model(z, t, text, v_f), fresh(z, t, text, v_f))


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(hidden=10, heads=4)
    with pytest.raises(ConfigError):
        DenoiserConfig(injection="cross")
    with pytest.raises(ConfigError):
        DenoiserConfig(height=30)
