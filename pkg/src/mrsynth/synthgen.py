"""Stage 2: text-conditioned, arbitrary-scale synthesis.

Pipeline per patch: CNN features (no downsampling) -> text adapter ->
cross-attention (adapted text is the query, voxel features are keys and
values; the attended vector is added back onto every voxel) -> implicit
decoder queried at arbitrary coordinates.

Volumes enter the model after :func:`~mrsynth.volume.normalize_intensity`
and outputs are in that normalised range.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, load_module_tensors, module_tensors
from .encoders import CnnEncoder, CnnEncoderConfig, MultiHeadAttention, TextEncoder, TextEncoderConfig
from .pretrain import (TrainResult, optimizer_steps, optimizer_tensors, restore_optimizer)
from .prompt import ScanMetadata, build_prompt, default_tokenizer
from .volume import Volume, normalize_intensity

log = logging.getLogger(__name__)

FULL_LIIF_HIDDEN = (3072, 3072, 768, 256)
CONDITIONING_MODES = ("text", "one_hot")


@dataclass(frozen=True)
class SynthConfig:
    cnn: CnnEncoderConfig = CnnEncoderConfig()
    heads: int = 4
    liif_hidden: tuple[int, ...] = (128, 128, 64, 32)
    conditioning: str = "text"
    # one-hot labels, one per (scanner, modality); empty in text mode
    categories: tuple[tuple[str, str], ...] = ()
    text_embed_dim: int = 64

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.conditioning == "one_hot" and not self.categories:
            raise ValueError("one_hot conditioning needs a category list")
        if self.cnn.out_dim % self.heads:
            raise ValueError("cnn.out_dim must be divisible by heads")
        object.__setattr__(self, "liif_hidden", tuple(self.liif_hidden))
        object.__setattr__(self, "categories", tuple(tuple(c) for c in self.categories))

    @property
    def cond_dim(self) -> int:
        return self.text_embed_dim if self.conditioning == "text" else len(self.categories)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = [list(c) for c in self.categories]
        d["liif_hidden"] = list(self.liif_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["cnn"] = CnnEncoderConfig(**d["cnn"])
        d["categories"] = tuple(tuple(c) for c in d.get("categories", ()))
        d["liif_hidden"] = tuple(d["liif_hidden"])
        return cls(**d)


class TextAdapter(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)

    def forward(self, x):
        return F.relu(self.fc(x))


class CrossAttention(nn.Module):
    """Text query attends over voxel features; result is added to every voxel."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, text: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
        # text (B, d) or (B, T, d); grid (B, d, X, Y, Z)
        if text.ndim == 2:
            text = text[:, None]
        b, d = grid.shape[:2]
        if text.shape[-1] != d:
            raise ValueError(f"text dim {text.shape[-1]} != feature channels {d}")
        kv = grid.flatten(2).transpose(1, 2)
        attended = self.attn(text, kv).mean(dim=1)
        return grid + attended[:, :, None, None, None]


class LiifDecoder(nn.Module):
    def __init__(self, feat_dim: int, hidden=(128, 128, 64, 32)):
        super().__init__()
        layers, last = [], feat_dim + 6
        for h in hidden:
            layers += [nn.Linear(last, h), nn.ReLU()]
            last = h
        layers.append(nn.Linear(last, 1))
        self.mlp = nn.Sequential(*layers)

    def query_inputs(self, feat: torch.Tensor, coords: torch.Tensor, cell: torch.Tensor):
        """Nearest-feature lookup; returns ``(features, offsets, rel_cell)`` per query."""
        b, c = feat.shape[:2]
        dims = feat.shape[2:]
        if coords.abs().max() > 1:
            raise ValueError("query coordinates must lie in [-1, 1]^3")
        n = torch.tensor(dims, dtype=coords.dtype)
        pos = (coords + 1) * n / 2
        idx = torch.minimum(pos.floor(), n - 1).long()
        offset = pos - idx - 0.5
        flat = (idx[..., 0] * dims[1] + idx[..., 1]) * dims[2] + idx[..., 2]
        f = feat.flatten(2).gather(2, flat[:, None, :].expand(b, c, flat.shape[1]))
        rel_cell = cell * n / 2
        return f.transpose(1, 2), offset, rel_cell.expand_as(offset)

    def forward(self, feat, coords, cell):
        f, offset, rel_cell = self.query_inputs(feat, coords, cell)
        return self.mlp(torch.cat([f, offset, rel_cell], dim=-1))[..., 0]


class SynthesisModel(nn.Module):
    def __init__(self, cfg: SynthConfig, text_cfg: TextEncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.cnn.out_dim
        self.cnn = CnnEncoder(cfg.cnn)
        self.adapter = TextAdapter(cfg.cond_dim, d)
        self.xattn = CrossAttention(d, cfg.heads)
        self.liif = LiifDecoder(d, cfg.liif_hidden)
        self.text_encoder = None
        if cfg.conditioning == "text":
            text_cfg = text_cfg or TextEncoderConfig(embed_dim=cfg.text_embed_dim)
            if text_cfg.embed_dim != cfg.text_embed_dim:
                raise ValueError("text encoder embed_dim does not match text_embed_dim")
            self.text_encoder = TextEncoder(text_cfg)
            self.text_encoder.requires_grad_(False)
        self._cond_cache: dict = {}

    @property
    def dtype(self):
        return self.liif.mlp[0].weight.dtype

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("text_encoder.")]

    def train(self, mode: bool = True):
        super().train(mode)
        if self.text_encoder is not None:
            self.text_encoder.eval()
        return self

    @torch.no_grad()
    def condition(self, meta: ScanMetadata) -> torch.Tensor:
        """Conditioning vector for a target: frozen text embedding or one-hot label."""
        if self.cfg.conditioning == "one_hot":
            key = (meta.scanner, meta.modality)
            if key not in self.cfg.categories:
                raise ValueError(f"no one-hot label for {key}")
            v = torch.zeros(len(self.cfg.categories), dtype=self.dtype)
            v[self.cfg.categories.index(key)] = 1
            return v
        prompt = build_prompt(meta)
        if prompt not in self._cond_cache:
            tokens = default_tokenizer().tokenize(prompt)
            self._cond_cache[prompt] = self.text_encoder(torch.as_tensor(tokens)[None])[0].to(self.dtype)
        return self._cond_cache[prompt]

    def features(self, patch: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return self.xattn(self.adapter(cond), self.cnn(patch))

    def forward(self, patch, cond, coords, cell):
        return self.liif(self.features(patch, cond), coords, cell)

    def config(self) -> dict:
        out = {"synth": self.cfg.to_dict()}
        if self.text_encoder is not None:
            out["text"] = asdict(self.text_encoder.cfg)
        return out

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, float64: bool = False) -> "SynthesisModel":
        if ckpt.stage != "synth":
            raise ValueError(f"expected a synth checkpoint, got stage {ckpt.stage!r}")
        cfg = SynthConfig.from_dict(ckpt.config["model"]["synth"])
        text_cfg = TextEncoderConfig(**ckpt.config["model"]["text"]) if "text" in ckpt.config["model"] else None
        model = cls(cfg, text_cfg)
        if float64:
            model.double()
        load_module_tensors(model, ckpt.tensors, "model.")
        model.eval()
        return model


def adapt_text(text_emb, model: SynthesisModel) -> np.ndarray:
    with torch.no_grad():
        return model.adapter(torch.as_tensor(np.asarray(text_emb)).to(model.dtype)).numpy()


def cross_attend(adapted_text, features, model: SynthesisModel) -> np.ndarray:
    with torch.no_grad():
        t = torch.as_tensor(np.asarray(adapted_text)).to(model.dtype)
        g = torch.as_tensor(np.asarray(features)).to(model.dtype)
        return model.xattn(t[None], g[None])[0].numpy()


def liif_decode(features, coords, cell, model: SynthesisModel) -> np.ndarray:
    with torch.no_grad():
        g = torch.as_tensor(np.asarray(features)).to(model.dtype)[None]
        c = torch.as_tensor(np.asarray(coords)).to(model.dtype)[None]
        s = torch.as_tensor(np.asarray(cell)).to(model.dtype).reshape(1, -1, 3)
        return model.liif(g, c, s)[0].numpy()


def grid_centers(shape) -> np.ndarray:
    """Cell-centre coordinates in [-1, 1]^3, shape ``(prod(shape), 3)``."""
    axes = [(2 * np.arange(n) + 1) / n - 1 for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def output_shape(dims, scale) -> tuple[int, int, int]:
    """``ceil(dims * scale)``; products within 1e-9 of an integer count as that integer."""
    return tuple(int(math.ceil(n * s - 1e-9)) for n, s in zip(dims, scale))


def tile_starts(n: int, patch: int, overlap: int) -> list[int]:
    if n < patch:
        raise ValueError(f"patch edge {patch} exceeds volume edge {n}")
    if n == patch:
        return [0]
    stride = max(1, patch - overlap)
    starts = list(range(0, n - patch, stride))
    return starts + [n - patch]


def _ramp(x: np.ndarray, a: int, patch: int, n: int, overlap: int) -> np.ndarray:
    """Linear feathering weight along one axis for a tile starting at ``a``."""
    w = np.ones_like(x)
    if overlap > 0:
        if a > 0:
            w = np.minimum(w, (x - a) / overlap)
        if a + patch < n:
            w = np.minimum(w, (a + patch - x) / overlap)
    inside = (x >= a) & (x <= a + patch)
    return np.where(inside, np.clip(w, 0, 1), 0.0)


@torch.no_grad()
def synthesize(volume: Volume, meta_target: ScanMetadata, scale, model: SynthesisModel,
               overlap: int | None = None, chunk: int = 32768,
               normalize: bool = True) -> Volume:
    """Whole-volume synthesis by overlapping patches blended with linear feathering.

    Output dims are ``ceil(dims * scale)`` and spacing is
    ``spacing / scale``. Where several patches cover a voxel the blend is
    written as ``first + sum(w * (v - first)) / sum(w)``, which is exact
    when all contributions agree.
    """
    scale = tuple(float(s) for s in (scale if np.ndim(scale) else (scale,) * 3))
    if len(scale) != 3 or min(scale) < 1:
        raise ValueError(f"scale components must be >= 1, got {scale}")
    p = model.cfg.cnn.patch_edge
    overlap = p // 4 if overlap is None else overlap
    data = np.asarray(volume.data, dtype=np.float64)
    if normalize:
        data = normalize_intensity(data)
    dims = data.shape
    # axes shorter than one patch are edge-padded; output stays on the original lattice
    data = np.pad(data, [(0, max(0, p - n)) for n in dims], mode="edge")
    padded = data.shape
    starts = [tile_starts(n, p, overlap) for n in padded]
    out_dims = output_shape(dims, scale)
    pos = [(np.arange(m) + 0.5) * n / m for n, m in zip(dims, out_dims)]
    cell = torch.tensor([2.0 * n / m / p for n, m in zip(dims, out_dims)], dtype=model.dtype)
    cond = model.condition(meta_target)[None]

    ref = np.full(out_dims, np.nan)
    acc = np.zeros(out_dims)
    wsum = np.zeros(out_dims)
    src = torch.as_tensor(data).to(model.dtype)
    model.eval()
    for ax in starts[0]:
        for ay in starts[1]:
            for az in starts[2]:
                corner = (ax, ay, az)
                weights = [_ramp(pos[d], corner[d], p, padded[d], overlap) for d in range(3)]
                sel = [np.flatnonzero(w > 0) for w in weights]
                if any(len(s) == 0 for s in sel):
                    continue
                patch = src[ax : ax + p, ay : ay + p, az : az + p][None, None]
                feat = model.features(patch, cond)
                local = [2 * (pos[d][sel[d]] - corner[d]) / p - 1 for d in range(3)]
                coords = np.stack(np.meshgrid(*local, indexing="ij"), -1).reshape(-1, 3)
                coords = torch.as_tensor(np.clip(coords, -1, 1)).to(model.dtype)
                vals = torch.cat([
                    model.liif(feat, coords[i : i + chunk][None], cell)[0]
                    for i in range(0, len(coords), chunk)
                ]).double().numpy().reshape([len(s) for s in sel])
                w = (weights[0][sel[0]][:, None, None] * weights[1][sel[1]][None, :, None]
                     * weights[2][sel[2]][None, None, :])
                region = np.ix_(*sel)
                r = ref[region]
                r = np.where(np.isnan(r), vals, r)
                ref[region] = r
                acc[region] += w * (vals - r)
                wsum[region] += w
    if np.any(wsum <= 0):
        raise RuntimeError("stitching left uncovered voxels")
    out = ref + acc / wsum
    spacing = tuple(s / k for s, k in zip(volume.spacing_mm, scale))
    return Volume(out, spacing)


@dataclass
class SynthTrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    hold_epochs: int = 100
    step_epochs: int = 50
    gamma: float = 0.5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    patches_per_pair: int = 1
    queries_per_patch: int = 2048
    # LR-side scale sampled per patch; (1, 1) trains plain translation
    scale_range: tuple[float, float] = (1.0, 1.0)
    float64: bool = False

    def __post_init__(self):
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if not 1 <= self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("scale_range must satisfy 1 <= lo <= hi")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.step_epochs < 1 or not 0 < self.gamma <= 1:
            raise ValueError("step_epochs >= 1 and gamma in (0, 1] required")


def multistep_lr(epoch: int, cfg: SynthTrainConfig) -> float:
    """Constant for ``hold_epochs``, then multiplied by ``gamma`` every ``step_epochs``."""
    if epoch < cfg.hold_epochs:
        return cfg.lr
    return cfg.lr * cfg.gamma ** ((epoch - cfg.hold_epochs) // cfg.step_epochs + 1)


@dataclass
class SynthPair:
    source: np.ndarray  # normalised input intensities
    target: np.ndarray  # normalised target intensities, same grid
    meta: ScanMetadata  # target metadata

    def __post_init__(self):
        if np.shape(self.source) != np.shape(self.target):
            raise ValueError(f"misaligned pair: {np.shape(self.source)} vs {np.shape(self.target)}")


def make_pair(source: Volume, target: Volume, meta: ScanMetadata) -> SynthPair:
    return SynthPair(normalize_intensity(source.data), normalize_intensity(target.data), meta)


def sample_patch(pair: SynthPair, patch: int, scale_range, n_queries: int,
                 rng: np.random.Generator):
    """One training example: LR input patch plus target queries on the HR crop."""
    dims = pair.source.shape
    if min(dims) < patch:
        raise ValueError(f"volume {dims} smaller than patch edge {patch}")
    s = rng.uniform(*scale_range) if scale_range[1] > scale_range[0] else scale_range[0]
    edge = min(int(round(patch * s)), min(dims))
    corner = [int(rng.integers(0, n - edge + 1)) for n in dims]
    crop = tuple(slice(c, c + edge) for c in corner)
    src = torch.as_tensor(pair.source[crop])[None, None]
    if edge != patch:
        src = F.adaptive_avg_pool3d(src, patch)
    tgt = pair.target[crop].reshape(-1)
    coords = grid_centers((edge,) * 3)
    if n_queries and n_queries < len(coords):
        pick = rng.choice(len(coords), size=n_queries, replace=False)
        coords, tgt = coords[pick], tgt[pick]
    cell = np.full(3, 2.0 / edge)
    return src[0], coords, tgt, cell


def downsample_area(volume: Volume, factor) -> tuple[Volume, tuple[float, float, float]]:
    """Area-average ``volume`` to ``round(n / factor)`` voxels per axis.

    Returns the low-resolution volume and the exact per-axis scale
    ``n / round(n / factor)`` that maps it back onto the original grid.
    This is the same operator that builds low-resolution training inputs.
    """
    factor = tuple(float(f) for f in (factor if np.ndim(factor) else (factor,) * 3))
    if min(factor) < 1:
        raise ValueError(f"downsampling factors must be >= 1, got {factor}")
    dims = volume.shape
    small = tuple(max(1, int(round(n / f))) for n, f in zip(dims, factor))
    data = F.adaptive_avg_pool3d(torch.as_tensor(np.asarray(volume.data, dtype=np.float64))[None, None],
                                 small)[0, 0].numpy()
    scale = tuple(n / m for n, m in zip(dims, small))
    spacing = tuple(s * k for s, k in zip(volume.spacing_mm, scale))
    return Volume(data, spacing, dict(volume.meta)), scale


def mae(a, b) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def train_synthesis(pairs: list[SynthPair], model: SynthesisModel, cfg: SynthTrainConfig,
                    resume: Checkpoint | None = None, epochs: int | None = None) -> TrainResult:
    """Patch-sampled MAE training; the text encoder stays frozen."""
    if not pairs:
        raise ValueError("no training pairs")
    if cfg.float64:
        model.double()
    model._cond_cache.clear()
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr,
                           betas=(cfg.adam_beta1, cfg.adam_beta2))
    start = 0
    if resume is not None:
        load_module_tensors(model, resume.tensors, "model.")
        restore_optimizer(opt, resume.tensors, resume.state.get("optimizer_steps", {}))
        start = int(resume.state.get("epoch", 0))
    stop = cfg.epochs if epochs is None else min(cfg.epochs, start + epochs)
    p = model.cfg.cnn.patch_edge
    conds = [model.condition(pr.meta) for pr in pairs]
    history = []
    for epoch in range(start, stop):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = multistep_lr(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(np.repeat(np.arange(len(pairs)), cfg.patches_per_pair))
        model.train()
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            items = [sample_patch(pairs[j], p, cfg.scale_range, cfg.queries_per_patch, rng) for j in idx]
            dtype = model.dtype
            src = torch.stack([it[0] for it in items]).to(dtype)
            coords = torch.as_tensor(np.stack([it[1] for it in items])).to(dtype)
            tgt = torch.as_tensor(np.stack([it[2] for it in items])).to(dtype)
            cell = torch.as_tensor(np.stack([it[3] for it in items])).to(dtype)[:, None, :]
            cond = torch.stack([conds[j] for j in idx]).to(dtype)
            pred = model(src, cond, coords, cell)
            loss = (pred - tgt).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses)), "lr": lr}
        history.append(row)
        log.info("synth epoch %d loss %.5f lr %.3g", row["epoch"], row["mean_loss"], lr)
    model.eval()
    return TrainResult(model, history, opt, stop)


def synth_checkpoint(result: TrainResult, cfg: SynthTrainConfig) -> Checkpoint:
    tensors = module_tensors(result.model, "model.")
    tensors.update(optimizer_tensors(result.optimizer))
    train = asdict(cfg)
    train["scale_range"] = list(cfg.scale_range)
    return Checkpoint(
        "synth",
        {"model": result.model.config(), "train": train},
        tensors,
        {"epoch": result.epochs_done, "optimizer_steps": optimizer_steps(result.optimizer)},
    )


def text_encoder_from_clip(ckpt: Checkpoint) -> tuple[TextEncoderConfig, dict]:
    """Text-encoder config and tensors (prefix ``text.``) out of a stage-1 checkpoint."""
    if ckpt.stage != "clip":
        raise ValueError(f"expected a clip checkpoint, got stage {ckpt.stage!r}")
    cfg = TextEncoderConfig(**ckpt.config["model"]["text"])
    tensors = {k[len("model.text."):]: v for k, v in ckpt.tensors.items()
               if k.startswith("model.text.")}
    return cfg, tensors


def load_frozen_text(model: SynthesisModel, tensors: dict) -> None:
    load_module_tensors(model.text_encoder, tensors)
    model.text_encoder.requires_grad_(False)
    model._cond_cache.clear()
