import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradutil import relative_gradient_error
from mrsynth.encoders import (
    FULL_CNN, FULL_TEXT, FULL_VIT, CnnEncoder, CnnEncoderConfig, TextEncoder, TextEncoderConfig,
    ViT3D, ViTConfig, cnn_params, count_parameters, encode_image_cnn, encode_image_vit, encode_text,
    text_encoder_params, vit_params,
)
from mrsynth.prompt import tokenize

TINY_TEXT = TextEncoderConfig(layers=1, heads=2, width=16, embed_dim=8)
TINY_VIT = ViTConfig(token_size=4, layers=1, heads=2, width=16, mlp_dim=32, input_edge=8, embed_dim=8)


def test_full_scale_parameter_counts():
    assert text_encoder_params(FULL_TEXT) == 63_434_752
    assert vit_params(FULL_VIT) == 88_764_672
    assert cnn_params(FULL_CNN) == 42_690_304


@pytest.mark.parametrize("cfg", [TINY_TEXT, TextEncoderConfig(), TextEncoderConfig(layers=2, heads=4, width=64)])
def test_text_param_formula_matches_module(cfg):
    assert text_encoder_params(cfg) == count_parameters(TextEncoder(cfg))


@pytest.mark.parametrize("cfg", [TINY_VIT, ViTConfig()])
def test_vit_param_formula_matches_module(cfg):
    assert vit_params(cfg) == count_parameters(ViT3D(cfg))


@pytest.mark.parametrize("cfg", [CnnEncoderConfig(), CnnEncoderConfig(n_res_layers=2, hidden=12, out_dim=5)])
def test_cnn_param_formula_matches_module(cfg):
    assert cnn_params(cfg) == count_parameters(CnnEncoder(cfg))


@given(
    n_res=st.integers(1, 6), hidden=st.integers(1, 24), out_dim=st.integers(1, 16),
    patch=st.integers(2, 10), batch=st.integers(1, 2),
)
@settings(max_examples=25, deadline=None)
def test_cnn_preserves_spatial_dims(n_res, hidden, out_dim, patch, batch):
    cfg = CnnEncoderConfig(n_res_layers=n_res, hidden=hidden, out_dim=out_dim, patch_edge=patch)
    out = CnnEncoder(cfg).eval()(torch.zeros(batch, 1, patch, patch, patch))
    assert out.shape == (batch, out_dim, patch, patch, patch)


def test_cnn_rejects_wrong_patch():
    with pytest.raises(ValueError, match="CNN input"):
        CnnEncoder(CnnEncoderConfig(patch_edge=8))(torch.zeros(1, 1, 8, 8, 9))


def test_text_encoder_unit_norm_and_pooling():
    torch.manual_seed(0)
    enc = TextEncoder(TINY_TEXT).eval()
    ids = np.stack([tokenize("target T1w."), tokenize("target FLAIR.")])
    emb = encode_text(ids, enc)
    assert emb.shape == (2, 8)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1, atol=1e-6)
    # tokens after the end token are masked out by causality
    tampered = ids.copy()
    tampered[:, -1] = 320
    np.testing.assert_allclose(encode_text(tampered, enc), emb, atol=1e-6)


def test_text_encoder_validation():
    enc = TextEncoder(TINY_TEXT)
    ids = torch.as_tensor(tokenize("target T1w."))[None]
    with pytest.raises(ValueError, match="tokens"):
        enc(ids[:, :10])
    bad = ids.clone()
    bad[0, 1] = 49408
    with pytest.raises(ValueError, match="outside"):
        enc(bad)
    with pytest.raises(ValueError, match="end token"):
        enc(torch.zeros_like(ids))


def test_vit_output_and_validation():
    torch.manual_seed(0)
    enc = ViT3D(TINY_VIT).eval()
    emb = encode_image_vit(np.random.default_rng(0).random((8, 8, 8)), enc)
    assert emb.shape == (8,)
    assert abs(np.linalg.norm(emb) - 1) < 1e-6
    with pytest.raises(ValueError, match="ViT input"):
        enc(torch.zeros(1, 1, 8, 8, 4))
    assert TINY_VIT.n_tokens == 8


def test_encode_image_cnn_shape():
    enc = CnnEncoder(CnnEncoderConfig(n_res_layers=2, hidden=8, out_dim=4, patch_edge=6))
    assert encode_image_cnn(np.zeros((6, 6, 6)), enc).shape == (4, 6, 6, 6)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        TextEncoderConfig(width=10, heads=4)
    with pytest.raises(ValueError, match="input_edge"):
        ViTConfig(input_edge=30, token_size=8)
    with pytest.raises(ValueError, match="positive"):
        CnnEncoderConfig(hidden=0)
    with pytest.raises(ValueError, match="patch_edge"):
        CnnEncoderConfig(patch_edge=1)


def _scalar_loss(out, seed=0):
    w = torch.as_tensor(np.random.default_rng(seed).standard_normal(tuple(out.shape)))
    return (out * w).sum()


def test_text_encoder_gradient():
    torch.manual_seed(1)
    enc = TextEncoder(TINY_TEXT).double()
    ids = torch.as_tensor(np.stack([tokenize("target T1w."), tokenize("target SWI.")]))
    assert relative_gradient_error(lambda: _scalar_loss(enc(ids)), list(enc.parameters()), n_coords=8) < 1e-4


def test_vit_gradient():
    torch.manual_seed(2)
    enc = ViT3D(TINY_VIT).double()
    x = torch.rand(2, 1, 8, 8, 8, dtype=torch.float64)
    assert relative_gradient_error(lambda: _scalar_loss(enc(x)), list(enc.parameters()), n_coords=8) < 1e-4


def test_cnn_gradient():
    torch.manual_seed(3)
    enc = CnnEncoder(CnnEncoderConfig(n_res_layers=2, hidden=8, out_dim=4, patch_edge=5)).double()
    x = torch.rand(2, 1, 5, 5, 5, dtype=torch.float64)
    assert relative_gradient_error(lambda: _scalar_loss(enc(x)), list(enc.parameters()), n_coords=8) < 1e-4
