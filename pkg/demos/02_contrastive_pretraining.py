#!/usr/bin/env python3
"""Stage 1: align image and text embeddings with a symmetric contrastive loss.

Run from the repository root:
    python3 demos/02_contrastive_pretraining.py            # ~1 min, 20 atlases
    python3 demos/02_contrastive_pretraining.py --full     # ~8 min, 80 atlases
The trained model is saved to demos/out/clip.ckpt for the next demo.
"""
import argparse
import math
import time
from pathlib import Path

import numpy as np
import torch

from mrsynth.checkpoint import save_checkpoint
from mrsynth.corpus import build_corpus, preset_sequences
from mrsynth.encoders import TextEncoderConfig, ViTConfig
from mrsynth.pretrain import (
    ClipSample, ClipTrainConfig, clip_checkpoint, contrastive_loss, modality_retrieval_accuracy,
    prepare_vit_input, retrieve_text, text_retrieval_accuracy, train_clip,
)
from mrsynth.prompt import build_prompt, tokenize

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true", help="the 80-atlas, 50-epoch toy run")
args = parser.parse_args()
torch.set_num_threads(1)
out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

# The loss has closed forms on tiny batches, a quick sanity check.
print("one pair:", contrastive_loss([[1.0, 0.0]], [[0.0, 1.0]])[0])
print("two identical pairs:", contrastive_loss(np.ones((2, 2)), np.ones((2, 2)))[0], "log 2 =", math.log(2))

# 7 modalities x 2 sequence settings per atlas; each volume is paired with
# the prompt built from its own metadata.
n_atlases, epochs = (80, 50) if args.full else (20, 30)
sequences = preset_sequences()
train_items = build_corpus(n_atlases, sequences, noise_sigma=0.005, seed=0)
test_items = build_corpus(8, sequences, noise_sigma=0.005, seed=0, first_atlas=1000)


def samples(items):
    return [ClipSample(prepare_vit_input(it.volume, 16, downscale=2), tokenize(build_prompt(it.meta)),
                       it.params.category, it.params.modality) for it in items]


train, test = samples(train_items), samples(test_items)
print(f"\n{len(train)} training pairs, {len(test)} held-out pairs, ViT input {train[0].image.shape}")

text_cfg = TextEncoderConfig(layers=2, heads=4, width=64, embed_dim=32)
vit_cfg = ViTConfig(token_size=4, layers=2, heads=4, width=64, mlp_dim=128, input_edge=16, embed_dim=32)
cfg = ClipTrainConfig(epochs=epochs, warmup_epochs=max(1, epochs // 10), peak_lr=2e-3, batch_size=14,
                      modality_prompt_prob=0.2, seed=0)
t0 = time.perf_counter()
result = train_clip(train, cfg, text_cfg, vit_cfg)
print(f"trained {epochs} epochs in {time.perf_counter() - t0:.0f}s")
for row in result.history[:: max(1, epochs // 5)] + result.history[-1:]:
    print(f"  epoch {row['epoch']:3d}  loss {row['mean_loss']:.4f}  lr {row['lr']:.2e}")

# Which of the seven modality prompts is closest to each held-out image?
images = np.stack([s.image for s in test])
overall, per_modality = modality_retrieval_accuracy(result.model, images, [s.modality for s in test])
print(f"\nimage -> modality top-1: {overall:.3f} (chance {1 / 7:.3f})")
for m, acc in per_modality.items():
    print(f"  {m:<7} {acc:.2f}")

# Pick the true prompt out of ten (nine from other categories).
tokens = np.stack([s.tokens for s in test])
text_acc = text_retrieval_accuracy(result.model, images, tokens, [s.category for s in test], n_candidates=10)
print(f"image -> text top-1 among 10: {text_acc:.3f} (chance 0.100)")

# One ranking in detail.
item = test_items[3]
cands = np.stack([tokenize(build_prompt(x.meta)) for x in test_items[:14]])
ranked = retrieve_text(test[3].image, cands, result.model, prepared=True)
print(f"\nquery is a {item.params.modality} on {item.meta.scanner}; top three candidates:")
for idx, p in zip(ranked.ranking[:3], ranked.probabilities[:3]):
    print(f"  p={p:.2f}  {build_prompt(test_items[idx].meta)[:70]}...")

save_checkpoint(out_dir / "clip.ckpt", clip_checkpoint(result, cfg))
print(f"\nsaved {out_dir / 'clip.ckpt'}")
