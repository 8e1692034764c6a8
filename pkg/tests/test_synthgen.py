import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradutil import relative_gradient_error
from mrsynth.checkpoint import load_checkpoint, save_checkpoint
from mrsynth.corpus import build_corpus
from mrsynth.encoders import CnnEncoderConfig, TextEncoderConfig
from mrsynth.phantom import SequenceParams
from mrsynth.prompt import ScanMetadata
from mrsynth.synthgen import (
    SynthConfig, SynthesisModel, SynthPair, SynthTrainConfig, adapt_text, cross_attend,
    downsample_area, grid_centers, liif_decode, load_frozen_text, make_pair, mae, multistep_lr,
    output_shape, sample_patch, synth_checkpoint, synthesize, tile_starts, train_synthesis,
)
from mrsynth.volume import Volume

TINY_TEXT = TextEncoderConfig(layers=1, heads=2, width=16, embed_dim=8)
TINY_CNN = CnnEncoderConfig(n_res_layers=2, hidden=8, out_dim=8, patch_edge=8)
META_80 = ScanMetadata(50, "F", 3.0, "Siemens Prisma", (1, 1, 1), 4000.0, 80.0, None, 90.0, "T2w")
META_140 = ScanMetadata(50, "F", 3.0, "Siemens Prisma", (1, 1, 1), 4000.0, 140.0, None, 90.0, "T2w")


def tiny_model(conditioning="text", seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    cats = (("Siemens Prisma", "T2w"), ("GE Signa", "T2w")) if conditioning == "one_hot" else ()
    cfg = SynthConfig(cnn=TINY_CNN, heads=2, liif_hidden=(8, 8), conditioning=conditioning,
                      categories=cats, text_embed_dim=8)
    model = SynthesisModel(cfg, TINY_TEXT if conditioning == "text" else None)
    return model.to(dtype).eval()


def constant_decoder(model, beta):
    with torch.no_grad():
        for layer in model.liif.mlp:
            if isinstance(layer, torch.nn.Linear):
                layer.weight.zero_()
                layer.bias.zero_()
        model.liif.mlp[-1].bias.fill_(beta)


# -- decoder and coordinates ---------------------------------------------------

def test_grid_centre_queries_have_zero_offset():
    model = tiny_model()
    feat = torch.randn(1, 8, 5, 6, 7, dtype=torch.float64)
    coords = torch.as_tensor(grid_centers((5, 6, 7)))[None]
    cell = torch.tensor([[2 / 5, 2 / 6, 2 / 7]], dtype=torch.float64)
    f, offset, rel = model.liif.query_inputs(feat, coords, cell)
    assert torch.all(offset.abs() < 1e-12)
    assert torch.allclose(rel, torch.ones_like(rel))
    # the picked feature at each centre is that voxel's own feature
    assert torch.equal(f[0], feat.flatten(2)[0].T)


def test_identical_queries_identical_outputs():
    model = tiny_model()
    feat = np.random.default_rng(0).standard_normal((8, 4, 4, 4))
    coords = np.array([[0.1, -0.3, 0.7], [0.1, -0.3, 0.7], [1.0, -1.0, 0.0]])
    out = liif_decode(feat, coords, [0.5, 0.5, 0.5], model)
    assert out[0] == out[1]


def test_query_outside_domain_rejected():
    model = tiny_model()
    with pytest.raises(ValueError, match=r"\[-1, 1\]"):
        liif_decode(np.zeros((8, 4, 4, 4)), [[0, 0, 1.5]], [0.5] * 3, model)


def test_constant_decoder_outputs_beta():
    model = tiny_model()
    constant_decoder(model, 0.37)
    out = liif_decode(np.random.default_rng(0).standard_normal((8, 4, 4, 4)),
                      np.random.default_rng(1).uniform(-1, 1, (50, 3)), [0.5] * 3, model)
    assert np.all(out == 0.37)


@pytest.mark.parametrize("dims,scale,overlap", [
    ((16, 16, 16), (1, 1, 1), None), ((19, 13, 8), (1.7, 2.0, 1.25), 2), ((12, 9, 10), (3, 1, 1.5), 0),
    ((20, 20, 20), (1.5, 1.5, 1.5), 7),
])
def test_stitching_is_exact_for_constant_decoder(dims, scale, overlap):
    model = tiny_model()
    beta = 0.1 + 0.2 + 0.3  # deliberately not exactly representable
    constant_decoder(model, beta)
    vol = Volume(np.random.default_rng(2).random(dims), (1.0, 1.2, 2.0))
    out = synthesize(vol, META_80, scale, model, overlap=overlap)
    assert out.shape == output_shape(dims, scale)
    assert np.all(out.data == np.float64(torch.tensor(beta, dtype=torch.float64).item()))
    assert out.spacing_mm == pytest.approx(tuple(s / k for s, k in zip((1.0, 1.2, 2.0), scale)))


def test_output_shape_examples():
    assert output_shape((16, 16, 16), (2, 1.5, 1)) == (32, 24, 16)
    assert output_shape((10, 10, 10), (1.1, 1.1, 1.1)) == (11, 11, 11)
    assert output_shape((3, 7, 9), (1.0001, 1, 1)) == (4, 7, 9)


@given(dims=st.tuples(*[st.integers(1, 64)] * 3), scale=st.tuples(*[st.floats(1, 4)] * 3))
@settings(max_examples=200, deadline=None)
def test_output_shape_is_ceil(dims, scale):
    out = output_shape(dims, scale)
    for n, s, m in zip(dims, scale, out):
        assert m >= n * s - 1e-9 and m - 1 < n * s


def test_twenty_random_non_integer_scales_through_synthesize():
    model = tiny_model()
    rng = np.random.default_rng(5)
    vol = Volume(rng.random((10, 9, 8)))
    for _ in range(20):
        scale = tuple(rng.uniform(1, 3, 3))
        out = synthesize(vol, META_80, scale, model)
        assert out.shape == tuple(math.ceil(n * s) for n, s in zip(vol.shape, scale))


def test_tile_starts_cover_axis():
    for n in range(8, 40):
        for overlap in (0, 2, 4):
            starts = tile_starts(n, 8, overlap)
            assert starts[0] == 0 and starts[-1] == n - 8
            assert all(b - a <= 8 for a, b in zip(starts, starts[1:]))
    with pytest.raises(ValueError, match="exceeds"):
        tile_starts(7, 8, 2)


def test_synthesize_errors():
    model = tiny_model()
    with pytest.raises(ValueError, match=">= 1"):
        synthesize(Volume(np.ones((8, 8, 8))), META_80, 0.5, model)


def test_synthesize_volume_smaller_than_patch():
    model = tiny_model()
    vol = Volume(np.random.default_rng(1).random((8, 5, 6)), (1.0, 1.0, 2.0))
    out = synthesize(vol, META_80, (1.5, 2.0, 1.25), model)
    assert out.shape == (12, 10, 8)
    assert np.all(np.isfinite(out.data))
    assert out.spacing_mm == pytest.approx((1 / 1.5, 0.5, 1.6))


def test_conditioning_sensitivity_to_te():
    model = tiny_model()
    vol = Volume(np.random.default_rng(0).random((8, 8, 8)))
    a = synthesize(vol, META_80, 1, model).data
    b = synthesize(vol, META_140, 1, model).data
    assert np.max(np.abs(a - b)) > 0


def test_one_hot_condition():
    model = tiny_model("one_hot")
    v = model.condition(META_80)
    assert v.tolist() == [1.0, 0.0]
    # TE is invisible to one-hot labels
    assert torch.equal(model.condition(META_140), v)
    with pytest.raises(ValueError, match="no one-hot label"):
        model.condition(ScanMetadata(50, "F", 1.5, "Philips", (1, 1, 1), 4000, 80, None, 90, "T2w"))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError, match="conditioning"):
        SynthConfig(conditioning="clip")
    with pytest.raises(ValueError, match="category"):
        SynthConfig(conditioning="one_hot")
    with pytest.raises(ValueError, match="divisible"):
        SynthConfig(cnn=CnnEncoderConfig(out_dim=10), heads=4)
    cfg = tiny_model("one_hot").cfg
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


# -- gradients -------------------------------------------------------------------

def test_adapter_gradient():
    model = tiny_model()
    x = torch.randn(3, 8, dtype=torch.float64)
    target = torch.randn(3, 8, dtype=torch.float64)
    params = list(model.adapter.parameters())
    assert relative_gradient_error(lambda: ((model.adapter(x) - target) ** 2).sum(), params) < 1e-4


def test_cross_attention_gradient():
    model = tiny_model()
    text = torch.randn(2, 8, dtype=torch.float64, requires_grad=True)
    grid = torch.randn(2, 8, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 8, 3, 3, 3, dtype=torch.float64)
    params = [text, grid, *model.xattn.parameters()]
    assert relative_gradient_error(lambda: (model.xattn(text, grid) * w).sum(), params) < 1e-4


def test_liif_decoder_gradient():
    model = tiny_model()
    feat = torch.randn(1, 8, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    coords = torch.rand(1, 20, 3, dtype=torch.float64) * 2 - 1
    cell = torch.full((1, 1, 3), 0.5, dtype=torch.float64)
    w = torch.randn(1, 20, dtype=torch.float64)
    params = [feat, *model.liif.parameters()]
    assert relative_gradient_error(lambda: (model.liif(feat, coords, cell) * w).sum(), params) < 1e-4


def test_end_to_end_mae_gradient():
    model = tiny_model()
    model.train()
    patch = torch.rand(2, 1, 8, 8, 8, dtype=torch.float64)
    cond = torch.stack([model.condition(META_80), model.condition(META_140)])
    coords = torch.rand(2, 30, 3, dtype=torch.float64) * 2 - 1
    cell = torch.full((2, 1, 3), 0.25, dtype=torch.float64)
    target = torch.rand(2, 30, dtype=torch.float64)
    params = model.trainable_parameters()
    err = relative_gradient_error(lambda: (model(patch, cond, coords, cell) - target).abs().mean(),
                             params, n_coords=10)
    assert err < 1e-4


def test_wrappers_match_modules():
    model = tiny_model()
    emb = np.random.default_rng(0).standard_normal(8)
    adapted = adapt_text(emb, model)
    assert adapted.shape == (8,) and np.all(adapted >= 0)
    grid = np.random.default_rng(1).standard_normal((8, 3, 3, 3))
    out = cross_attend(adapted, grid, model)
    # a single vector is broadcast-added over the grid
    delta = out - grid
    assert np.allclose(delta, delta[:, :1, :1, :1])


# -- training --------------------------------------------------------------------

def test_mae_and_schedule():
    x = np.random.default_rng(0).random(10)
    assert mae(x, x) == 0
    cfg = SynthTrainConfig()
    assert [multistep_lr(e, cfg) for e in (0, 99, 100, 149, 150, 200)] == [1e-4, 1e-4, 5e-5, 5e-5, 2.5e-5, 1.25e-5]


def test_misaligned_pair_rejected():
    with pytest.raises(ValueError, match="misaligned"):
        SynthPair(np.zeros((8, 8, 8)), np.zeros((8, 8, 9)), META_80)


def test_sample_patch_scale():
    pair = SynthPair(np.random.default_rng(0).random((20, 20, 20)), np.zeros((20, 20, 20)), META_80)
    src, coords, tgt, cell = sample_patch(pair, 8, (2.0, 2.0), 0, np.random.default_rng(0))
    assert src.shape == (1, 8, 8, 8)
    assert coords.shape == (16**3, 3) and tgt.shape == (16**3,)
    assert np.allclose(cell, 2 / 16)


def test_downsample_area_round_trip_scale():
    vol = Volume(np.full((30, 32, 17), 2.5), (1.0, 1.0, 2.0))
    low, scale = downsample_area(vol, 1.5)
    assert low.shape == (20, 21, 11)
    assert output_shape(low.shape, scale) == vol.shape
    assert np.allclose(low.data, 2.5)


@pytest.fixture(scope="module")
def phantom_pairs():
    seqs = [SequenceParams("T1w", 500.0, 10.0), SequenceParams("T2w", 4000.0, 80.0)]
    items = build_corpus(4, seqs, size=(12, 12, 12), seed=1)
    return [make_pair(items[i].volume, items[i + 1].volume, items[i + 1].meta)
            for i in range(0, len(items), 2)]


def test_smoke_training_keeps_text_encoder_frozen(phantom_pairs, tmp_path):
    model = tiny_model(dtype=torch.float32)
    load_frozen_text(model, {k: v.numpy() * 1.0 for k, v in model.text_encoder.state_dict().items()})
    before = {k: v.clone() for k, v in model.text_encoder.state_dict().items()}
    cfg = SynthTrainConfig(epochs=2, batch_size=2, lr=1e-3, queries_per_patch=64, seed=3)
    res = train_synthesis(phantom_pairs, model, cfg)
    assert all(math.isfinite(h["mean_loss"]) for h in res.history)
    for k, v in model.text_encoder.state_dict().items():
        assert torch.equal(v, before[k]), k
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, synth_checkpoint(res, cfg))
    ckpt = load_checkpoint(path)
    again = SynthesisModel.from_checkpoint(ckpt)
    vol = Volume(phantom_pairs[0].source)
    assert np.array_equal(synthesize(vol, META_80, 1, again).data, synthesize(vol, META_80, 1, model).data)
    resumed = train_synthesis(phantom_pairs, again, SynthTrainConfig(
        epochs=3, batch_size=2, lr=1e-3, queries_per_patch=64, seed=3), resume=ckpt)
    assert [h["epoch"] for h in resumed.history] == [3]


def test_training_reduces_loss(phantom_pairs):
    model = tiny_model("one_hot", dtype=torch.float32)
    cfg = SynthTrainConfig(epochs=50, batch_size=4, lr=3e-3, hold_epochs=50, queries_per_patch=256,
                           patches_per_pair=2, seed=0)
    res = train_synthesis(phantom_pairs, model, cfg)
    assert res.history[-1]["mean_loss"] < res.history[0]["mean_loss"]


def test_no_pairs_rejected():
    with pytest.raises(ValueError, match="no training pairs"):
        train_synthesis([], tiny_model(), SynthTrainConfig(epochs=1))
