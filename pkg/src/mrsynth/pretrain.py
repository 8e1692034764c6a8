"""Stage 1: contrastive image-text pretraining and retrieval."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, load_module_tensors, module_tensors
from .encoders import TextEncoder, TextEncoderConfig, ViT3D, ViTConfig
from .phantom import MODALITIES, resample_linear
from .prompt import default_tokenizer, modality_prompt
from .volume import normalize_intensity

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.07


def _loss_and_grads(v, t, tau):
    """Symmetric InfoNCE over cosine similarities, with hand-derived gradients.

    ``v`` and ``t`` are ``(N, d)`` tensors (not necessarily unit-norm).
    Returns ``(loss, dL/dv, dL/dt)``.
    """
    n = v.shape[0]
    vn = v.norm(dim=1, keepdim=True)
    tn = t.norm(dim=1, keepdim=True)
    vh, th = v / vn, t / tn
    logits = vh @ th.T / tau
    eye = torch.eye(n, dtype=v.dtype)
    lse_rows = torch.logsumexp(logits, dim=1)
    lse_cols = torch.logsumexp(logits, dim=0)
    diag = logits.diagonal()
    loss = ((lse_rows - diag).sum() + (lse_cols - diag).sum()) / (2 * n)

    p_rows = torch.softmax(logits, dim=1)
    p_cols = torch.softmax(logits, dim=0)
    g = (p_rows + p_cols - 2 * eye) / (2 * n * tau)  # dL/dcos
    g_vh = g @ th
    g_th = g.T @ vh
    g_v = (g_vh - (g_vh * vh).sum(1, keepdim=True) * vh) / vn
    g_t = (g_th - (g_th * th).sum(1, keepdim=True) * th) / tn
    return loss, g_v, g_t


class _ContrastiveFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v, t, tau):
        loss, g_v, g_t = _loss_and_grads(v, t, tau)
        ctx.save_for_backward(g_v, g_t)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        g_v, g_t = ctx.saved_tensors
        return grad_out * g_v, grad_out * g_t, None


def _check_batch(v, t, tau):
    if v.ndim != 2 or v.shape != t.shape or v.shape[0] < 1:
        raise ValueError(f"need matching (N, d) embeddings, got {tuple(v.shape)} and {tuple(t.shape)}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not (torch.isfinite(v).all() and torch.isfinite(t).all()):
        raise ValueError("embeddings must be finite")


def contrastive_loss_torch(image_embs: torch.Tensor, text_embs: torch.Tensor,
                           tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Differentiable loss whose backward uses the closed-form gradients."""
    _check_batch(image_embs, text_embs, tau)
    return _ContrastiveFn.apply(image_embs, text_embs, tau)


def contrastive_loss(image_embs, text_embs, tau: float = DEFAULT_TAU):
    """Loss and gradients for numpy ``(N, d)`` embedding matrices.

    Returns ``(loss, grad_image_embs, grad_text_embs)`` in float64.
    """
    v = torch.as_tensor(np.asarray(image_embs, dtype=np.float64))
    t = torch.as_tensor(np.asarray(text_embs, dtype=np.float64))
    _check_batch(v, t, tau)
    loss, g_v, g_t = _loss_and_grads(v, t, tau)
    return float(loss), g_v.numpy(), g_t.numpy()


@dataclass
class ClipTrainConfig:
    epochs: int = 100
    warmup_epochs: int = 20
    peak_lr: float = 5e-5
    batch_size: int = 27
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    tau: float = DEFAULT_TAU
    seed: int = 0
    # chance of swapping a caption for its modality-only prompt
    modality_prompt_prob: float = 0.0
    float64: bool = False

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 1 or self.peak_lr <= 0 or self.tau <= 0:
            raise ValueError("batch_size, peak_lr and tau must be positive")


def warmup_linear_lr(epoch_progress: float, cfg: ClipTrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup epochs, then linear decay to 0."""
    e, w, total = epoch_progress, cfg.warmup_epochs, cfg.epochs
    if w > 0 and e <= w:
        return cfg.peak_lr * e / w
    return cfg.peak_lr * max(0.0, (total - e) / (total - w))


@dataclass
class ClipSample:
    image: np.ndarray  # already prepared to the ViT input edge
    tokens: np.ndarray
    category: tuple
    modality: str


class ClipModel(nn.Module):
    def __init__(self, text_cfg: TextEncoderConfig, vit_cfg: ViTConfig):
        super().__init__()
        if text_cfg.embed_dim != vit_cfg.embed_dim:
            raise ValueError("text and image embed_dim must agree")
        self.text = TextEncoder(text_cfg)
        self.image = ViT3D(vit_cfg)

    @property
    def dtype(self):
        return self.image.projection.weight.dtype

    def encode_images(self, images) -> torch.Tensor:
        return self.image(torch.as_tensor(np.asarray(images)).to(self.dtype))

    def encode_tokens(self, tokens) -> torch.Tensor:
        return self.text(torch.as_tensor(np.asarray(tokens)))

    def config(self) -> dict:
        return {"text": asdict(self.text.cfg), "vit": asdict(self.image.cfg)}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, float64: bool = False) -> "ClipModel":
        if ckpt.stage != "clip":
            raise ValueError(f"expected a clip checkpoint, got stage {ckpt.stage!r}")
        model = cls(TextEncoderConfig(**ckpt.config["model"]["text"]),
                    ViTConfig(**ckpt.config["model"]["vit"]))
        if float64:
            model.double()
        load_module_tensors(model, ckpt.tensors, "model.")
        model.eval()
        return model


def prepare_vit_input(volume, input_edge: int, downscale: int = 2) -> np.ndarray:
    """Normalise, shrink by ``downscale`` per axis, centre-crop/pad to ``input_edge``³."""
    data = normalize_intensity(np.asarray(getattr(volume, "data", volume), dtype=np.float64))
    if downscale > 1:
        shape = tuple(max(1, n // downscale) for n in data.shape)
        if all(n % downscale == 0 for n in data.shape):
            d = downscale
            data = data.reshape(shape[0], d, shape[1], d, shape[2], d).mean(axis=(1, 3, 5))
        else:
            data = resample_linear(data, shape)
    out = np.zeros((input_edge,) * 3)
    src, dst = [], []
    for n in data.shape:
        if n >= input_edge:
            a = (n - input_edge) // 2
            src.append(slice(a, a + input_edge))
            dst.append(slice(0, input_edge))
        else:
            a = (input_edge - n) // 2
            src.append(slice(0, n))
            dst.append(slice(a, a + n))
    out[tuple(dst)] = data[tuple(src)]
    return out


def make_batches(categories: list, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches for one epoch.

    When the batch size equals the number of distinct categories every
    batch holds exactly one sample per category; otherwise batches are
    chunks of a random permutation (the remainder is dropped).
    """
    n = len(categories)
    if n < batch_size:
        raise ValueError(f"dataset of {n} pairs is smaller than one batch ({batch_size})")
    keys = sorted(set(categories), key=repr)
    if len(keys) == batch_size:
        groups = [np.flatnonzero([c == k for c in categories]) for k in keys]
        groups = [rng.permutation(g) for g in groups]
        rounds = n // batch_size
        return [np.array([g[r % len(g)] for g in groups]) for r in range(rounds)]
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict] = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    epochs_done: int = 0


def optimizer_tensors(opt: torch.optim.Optimizer) -> dict:
    out = {}
    for i, st in opt.state_dict()["state"].items():
        for k in ("exp_avg", "exp_avg_sq"):
            if k in st:
                out[f"optim.{i}.{k}"] = st[k]
    return out


def restore_optimizer(opt: torch.optim.Optimizer, tensors: dict, steps: dict) -> None:
    sd = opt.state_dict()
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        key = f"optim.{i}.exp_avg"
        if key in tensors:
            sd["state"][i] = {
                "step": torch.tensor(float(steps[str(i)])),
                "exp_avg": torch.as_tensor(tensors[key]).to(p.dtype),
                "exp_avg_sq": torch.as_tensor(tensors[f"optim.{i}.exp_avg_sq"]).to(p.dtype),
            }
    opt.load_state_dict(sd)


def optimizer_steps(opt: torch.optim.Optimizer) -> dict:
    return {str(i): float(st["step"]) for i, st in opt.state_dict()["state"].items()}


def train_clip(samples: list[ClipSample], cfg: ClipTrainConfig,
               text_cfg: TextEncoderConfig = TextEncoderConfig(),
               vit_cfg: ViTConfig = ViTConfig(),
               resume: Checkpoint | None = None,
               epochs: int | None = None) -> TrainResult:
    """Train both encoders with the symmetric contrastive loss.

    ``epochs`` caps how many epochs run in this call (default: all
    remaining); resuming from a checkpoint continues the epoch count and
    the schedule where they stopped.
    """
    torch.manual_seed(cfg.seed)
    model = ClipModel(text_cfg, vit_cfg)
    if cfg.float64:
        model.double()
    opt = torch.optim.Adam(model.parameters(), lr=0.0, betas=(cfg.adam_beta1, cfg.adam_beta2))
    start = 0
    if resume is not None:
        load_module_tensors(model, resume.tensors, "model.")
        restore_optimizer(opt, resume.tensors, resume.state.get("optimizer_steps", {}))
        start = int(resume.state.get("epoch", 0))
    stop = cfg.epochs if epochs is None else min(cfg.epochs, start + epochs)

    tok = default_tokenizer()
    modality_tokens = {m: tok.tokenize(modality_prompt(m)) for m in MODALITIES}
    images = np.stack([s.image for s in samples])
    tokens = np.stack([s.tokens for s in samples])
    categories = [s.category for s in samples]
    history = []
    for epoch in range(start, stop):
        # per-epoch generator keeps resumed runs on the same sample stream
        rng = np.random.default_rng([cfg.seed, epoch])
        batches = make_batches(categories, cfg.batch_size, rng)
        model.train()
        losses, lr = [], 0.0
        for b, idx in enumerate(batches):
            lr = warmup_linear_lr(epoch + (b + 1) / len(batches), cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            batch_tokens = tokens[idx].copy()
            if cfg.modality_prompt_prob > 0:
                swap = rng.random(len(idx)) < cfg.modality_prompt_prob
                for j in np.flatnonzero(swap):
                    batch_tokens[j] = modality_tokens[samples[idx[j]].modality]
            v = model.encode_images(images[idx][:, None])
            t = model.encode_tokens(batch_tokens)
            loss = contrastive_loss_torch(v, t, cfg.tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses)), "lr": lr}
        history.append(row)
        log.info("clip epoch %d loss %.5f lr %.3g", row["epoch"], row["mean_loss"], lr)
    model.eval()
    return TrainResult(model, history, opt, stop)


def clip_checkpoint(result: TrainResult, cfg: ClipTrainConfig) -> Checkpoint:
    tensors = module_tensors(result.model, "model.")
    tensors.update(optimizer_tensors(result.optimizer))
    return Checkpoint(
        "clip",
        {"model": result.model.config(), "train": asdict(cfg)},
        tensors,
        {"epoch": result.epochs_done, "optimizer_steps": optimizer_steps(result.optimizer)},
    )


@dataclass
class RetrievalResult:
    ranking: np.ndarray
    probabilities: np.ndarray  # aligned with ``ranking``
    similarities: np.ndarray  # in candidate order


@torch.no_grad()
def retrieve_text(image, candidates, model: ClipModel, tau: float = DEFAULT_TAU,
                  prepared: bool = False) -> RetrievalResult:
    """Rank candidate token sequences by cosine similarity to ``image``."""
    candidates = np.atleast_2d(np.asarray(candidates))
    if candidates.shape[0] == 0 or candidates.size == 0:
        raise ValueError("candidate list is empty")
    if model is None:
        raise ValueError("a trained clip model is required")
    img = image if prepared else prepare_vit_input(image, model.image.cfg.input_edge)
    v = model.encode_images(img[None, None])
    t = model.encode_tokens(candidates)
    sims = (t @ v[0]).double().numpy()
    return _rank(sims, tau)


def _rank(sims: np.ndarray, tau: float) -> RetrievalResult:
    order = np.argsort(-sims, kind="stable")
    z = sims / tau
    p = np.exp(z - z.max())
    p /= p.sum()
    return RetrievalResult(order, p[order], sims)


@torch.no_grad()
def modality_text_embeddings(model: ClipModel) -> torch.Tensor:
    tok = default_tokenizer()
    return model.encode_tokens(np.stack([tok.tokenize(modality_prompt(m)) for m in MODALITIES]))


@torch.no_grad()
def retrieve_modality(image, model: ClipModel, prepared: bool = False) -> str:
    if model is None:
        raise ValueError("a trained clip model is required")
    img = image if prepared else prepare_vit_input(image, model.image.cfg.input_edge)
    v = model.encode_images(img[None, None])
    sims = (modality_text_embeddings(model) @ v[0]).double().numpy()
    return MODALITIES[int(np.argmax(sims))]


@torch.no_grad()
def _embed_images(model: ClipModel, images: np.ndarray, chunk: int = 32) -> torch.Tensor:
    out = [model.encode_images(images[i : i + chunk][:, None]) for i in range(0, len(images), chunk)]
    return torch.cat(out)


@torch.no_grad()
def modality_retrieval_accuracy(model: ClipModel, images: np.ndarray, modalities: list[str]):
    """Top-1 accuracy over the seven modality prompts, overall and per modality."""
    v = _embed_images(model, images)
    pred = (v @ modality_text_embeddings(model).T).argmax(dim=1).numpy()
    truth = np.array([MODALITIES.index(m) for m in modalities])
    per = {m: float(np.mean(pred[truth == k] == k)) if np.any(truth == k) else math.nan
           for k, m in enumerate(MODALITIES)}
    return float(np.mean(pred == truth)), per


@torch.no_grad()
def text_retrieval_hits(model: ClipModel, images: np.ndarray, tokens: np.ndarray,
                        categories: list, n_candidates: int = 10, seed: int = 0) -> np.ndarray:
    """Per-image top-1 hit against the true prompt plus random distractors.

    Distractors are prompts of *other* imaging-parameter categories drawn
    from the same pool, since prompts of one category differ only in
    subject fields the image does not determine.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    rng = np.random.default_rng(seed)
    v = _embed_images(model, images)
    t = torch.cat([model.encode_tokens(tokens[i : i + 64]) for i in range(0, len(tokens), 64)])
    hits = np.zeros(len(images), dtype=bool)
    for i in range(len(images)):
        pool = [j for j in range(len(tokens)) if categories[j] != categories[i]]
        k = min(n_candidates - 1, len(pool))
        cand = [i, *rng.choice(pool, size=k, replace=False).tolist()] if k else [i]
        sims = (t[cand] @ v[i]).numpy()
        hits[i] = np.argmax(sims) == 0
    return hits


def text_retrieval_accuracy(model: ClipModel, images: np.ndarray, tokens: np.ndarray,
                            categories: list, n_candidates: int = 10, seed: int = 0) -> float:
    """Top-1 image-to-text accuracy; see :func:`text_retrieval_hits`."""
    return float(np.mean(text_retrieval_hits(model, images, tokens, categories, n_candidates, seed)))
