"""Text transformer, 3D ViT and no-downsampling residual CNN encoders.

Default configs are desk-scale so that both training stages run on a
CPU; the ``FULL_*`` constants hold the full-scale shapes used for the
parameter-count report.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .prompt import CONTEXT_LENGTH, default_tokenizer

VOCAB_SIZE = 49408


def _check_positive(cfg):
    for k, v in asdict(cfg).items():
        if not (isinstance(v, int) and v > 0):
            raise ValueError(f"{type(cfg).__name__}.{k} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class TextEncoderConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128
    context_length: int = CONTEXT_LENGTH
    vocab_size: int = VOCAB_SIZE
    embed_dim: int = 64

    def __post_init__(self):
        _check_positive(self)
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ViTConfig:
    token_size: int = 8
    layers: int = 4
    heads: int = 4
    width: int = 128
    mlp_dim: int = 256
    input_edge: int = 32
    embed_dim: int = 64

    def __post_init__(self):
        _check_positive(self)
        if self.input_edge % self.token_size:
            raise ValueError("input_edge must be divisible by token_size")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def n_tokens(self) -> int:
        return (self.input_edge // self.token_size) ** 3


@dataclass(frozen=True)
class CnnEncoderConfig:
    n_res_layers: int = 6
    hidden: int = 32
    out_dim: int = 64
    patch_edge: int = 16

    def __post_init__(self):
        _check_positive(self)
        if self.patch_edge < 2:
            # a 1-voxel patch leaves GroupNorm a single value per group
            raise ValueError("patch_edge must be >= 2")


# CLIP base text tower; the text depth/width are not published for this model.
FULL_TEXT = TextEncoderConfig(layers=12, heads=8, width=512, embed_dim=512)
FULL_VIT = ViTConfig(token_size=16, layers=12, heads=12, width=768, mlp_dim=3072,
                     input_edge=96, embed_dim=512)
FULL_CNN = CnnEncoderConfig(n_res_layers=24, hidden=256, out_dim=768, patch_edge=64)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; queries and keys/values may differ."""

    def __init__(self, width: int, heads: int, kv_width: int | None = None):
        super().__init__()
        kv_width = kv_width or width
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(kv_width, width)
        self.v = nn.Linear(kv_width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x_q, x_kv, mask=None):
        b, nq, w = x_q.shape
        nk = x_kv.shape[1]
        h, d = self.heads, w // self.heads
        q = self.q(x_q).view(b, nq, h, d).transpose(1, 2)
        k = self.k(x_kv).view(b, nk, h, d).transpose(1, 2)
        v = self.v(x_kv).view(b, nk, h, d).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, nq, w))


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, width))

    def forward(self, x, mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.mlp(self.ln2(x))


class TextEncoder(nn.Module):
    """Causal transformer; the end-token feature is projected and L2-normalised."""

    def __init__(self, cfg: TextEncoderConfig = TextEncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.width)
        self.positional_embedding = nn.Parameter(torch.empty(cfg.context_length, cfg.width))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, 4 * cfg.width) for _ in range(cfg.layers)
        )
        self.ln_final = nn.LayerNorm(cfg.width)
        self.projection = nn.Linear(cfg.width, cfg.embed_dim, bias=False)
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)
        causal = torch.ones(cfg.context_length, cfg.context_length, dtype=torch.bool).triu(1)
        self.register_buffer("causal_mask", causal, persistent=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] != self.cfg.context_length:
            raise ValueError(f"expected {self.cfg.context_length} tokens, got {tokens.shape[1]}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id outside [0, {self.cfg.vocab_size})")
        end_id = default_tokenizer().end_id
        is_end = tokens == end_id
        if not bool(is_end.any(dim=1).all()):
            raise ValueError("every token row needs an end token")
        x = self.token_embedding(tokens) + self.positional_embedding
        for blk in self.blocks:
            x = blk(x, self.causal_mask)
        x = self.ln_final(x)
        end = is_end.int().argmax(dim=1)
        pooled = x[torch.arange(x.shape[0]), end]
        return F.normalize(self.projection(pooled), dim=-1)


class ViT3D(nn.Module):
    """Cubic non-overlapping tokens + class token; class feature -> unit embedding."""

    def __init__(self, cfg: ViTConfig = ViTConfig()):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv3d(1, cfg.width, cfg.token_size, stride=cfg.token_size)
        self.class_token = nn.Parameter(torch.randn(cfg.width) * cfg.width ** -0.5)
        self.positional_embedding = nn.Parameter(
            torch.randn(cfg.n_tokens + 1, cfg.width) * cfg.width ** -0.5
        )
        self.ln_pre = nn.LayerNorm(cfg.width)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, cfg.mlp_dim) for _ in range(cfg.layers)
        )
        self.ln_post = nn.LayerNorm(cfg.width)
        self.projection = nn.Linear(cfg.width, cfg.embed_dim, bias=False)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, E, E, E) -> (B, n_tokens + 1, width) before the transformer."""
        e = self.cfg.input_edge
        if x.ndim == 4:
            x = x[:, None]
        if tuple(x.shape[1:]) != (1, e, e, e):
            raise ValueError(f"ViT input must be (B, 1, {e}, {e}, {e}), got {tuple(x.shape)}")
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.class_token.expand(t.shape[0], 1, -1)
        return torch.cat([cls, t], dim=1) + self.positional_embedding

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln_pre(self.tokens(x))
        for blk in self.blocks:
            h = blk(h)
        return F.normalize(self.projection(self.ln_post(h[:, 0])), dim=-1)


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


class ResBlock3d(nn.Module):
    """Pre-activation residual block: (GN, ReLU, conv3) x 2 plus identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.GroupNorm(_groups(channels), channels), nn.ReLU(),
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.GroupNorm(_groups(channels), channels), nn.ReLU(),
            nn.Conv3d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class CnnEncoder(nn.Module):
    """Residual conv stack with no downsampling, then a 1x1x1 projection.

    ``n_res_layers`` counts the 3x3x3 convolutions inside the residual
    blocks (two per block).
    """

    def __init__(self, cfg: CnnEncoderConfig = CnnEncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.head = nn.Conv3d(1, cfg.hidden, 3, padding=1)
        self.blocks = nn.Sequential(*(ResBlock3d(cfg.hidden) for _ in range(max(1, cfg.n_res_layers // 2))))
        self.tail = nn.Conv3d(cfg.hidden, cfg.out_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_edge
        if x.ndim == 4:
            x = x[:, None]
        if tuple(x.shape[1:]) != (1, p, p, p):
            raise ValueError(f"CNN input must be (B, 1, {p}, {p}, {p}), got {tuple(x.shape)}")
        return self.tail(self.blocks(self.head(x)))


def text_encoder_params(cfg: TextEncoderConfig) -> int:
    w = cfg.width
    block = 4 * (w * w + w) + 2 * 2 * w + (w * 4 * w + 4 * w) + (4 * w * w + w)
    return (cfg.vocab_size * w + cfg.context_length * w + cfg.layers * block
            + 2 * w + w * cfg.embed_dim)


def vit_params(cfg: ViTConfig) -> int:
    w = cfg.width
    block = 4 * (w * w + w) + 2 * 2 * w + (w * cfg.mlp_dim + cfg.mlp_dim) + (cfg.mlp_dim * w + w)
    patch = cfg.token_size ** 3 * w + w
    return (patch + w + (cfg.n_tokens + 1) * w + 2 * w + cfg.layers * block
            + 2 * w + w * cfg.embed_dim)


def cnn_params(cfg: CnnEncoderConfig) -> int:
    h = cfg.hidden
    conv = 27 * h * h + h
    block = 2 * conv + 2 * 2 * h
    return (27 * h + h) + max(1, cfg.n_res_layers // 2) * block + (h * cfg.out_dim + cfg.out_dim)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _as_batch(volume) -> torch.Tensor:
    data = getattr(volume, "data", volume)
    return torch.as_tensor(np.asarray(data))[None, None]


@torch.no_grad()
def encode_text(tokens, encoder: TextEncoder) -> np.ndarray:
    """Embedding of one ``(L,)`` token row, or one per row of a ``(B, L)`` batch."""
    tokens = np.asarray(tokens)
    out = encoder(torch.as_tensor(np.atleast_2d(tokens))).numpy()
    return out[0] if tokens.ndim == 1 else out


@torch.no_grad()
def encode_image_vit(volume, encoder: ViT3D) -> np.ndarray:
    dtype = next(encoder.parameters()).dtype
    return encoder(_as_batch(volume).to(dtype)).numpy()[0]


@torch.no_grad()
def encode_image_cnn(patch, encoder: CnnEncoder) -> np.ndarray:
    """FeatureGrid of shape ``(out_dim, *patch.shape)``."""
    dtype = next(encoder.parameters()).dtype
    return encoder(_as_batch(patch).to(dtype)).numpy()[0]
