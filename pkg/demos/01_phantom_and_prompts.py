#!/usr/bin/env python3
"""Walk through the synthetic data: one atlas, seven contrasts, one prompt.

Run from the repository root:  python3 demos/01_phantom_and_prompts.py
A montage is written to demos/out/phantom_montage.png.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mrsynth.corpus import preset_sequences
from mrsynth.phantom import degrade, generate_atlas, sample_degradation, signal_equation, simulate_acquisition
from mrsynth.prompt import ScanMetadata, build_prompt, detokenize, tokenize

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

# A tissue atlas is a label grid: background, nested shells, one lesion blob.
atlas = generate_atlas(seed=3, size=(32, 32, 32))
labels, counts = np.unique(atlas.labels, return_counts=True)
print("labels and voxel counts:", dict(zip(labels.tolist(), counts.tolist())))

# Each sequence maps tissue properties to a steady-state signal.
# The first preset per modality is the 3 T Siemens setting.
sequences = preset_sequences(settings_per_modality=1)
print("\nsignal per tissue class")
print("modality  " + "  ".join(f"class{k}" for k in sorted(atlas.properties)))
for seq in sequences:
    row = [signal_equation(atlas.properties[k], seq) for k in sorted(atlas.properties)]
    print(f"{seq.modality:<9} " + "  ".join(f"{v:6.3f}" for v in row))

# Simulate the volumes; T1CE brightens only the lesion.
volumes = {seq.modality: simulate_acquisition(atlas, seq, noise_sigma=0.005, seed=1) for seq in sequences}
lesion = atlas.labels == atlas.lesion_label
gain = volumes["T1CE"].data[lesion].mean() / volumes["T1w"].data[lesion].mean()
print(f"\nmean lesion intensity T1CE / T1w: {gain:.2f}")

# Degradation: Gaussian blur, then coarser sampling.
rng = np.random.default_rng(0)
factors, fwhm = sample_degradation(rng)
low = degrade(volumes["T2w"], factors, fwhm)
print(f"degrade factors {np.round(factors, 2)} fwhm {np.round(fwhm, 2)}: "
      f"{volumes['T2w'].shape} -> {low.shape}, spacing {np.round(low.spacing_mm, 2)}")

# Every volume carries metadata that becomes its text prompt.
meta = ScanMetadata.from_sequence(sequences[1], age_years=63.5, sex="M")
prompt = build_prompt(meta)
tokens = tokenize(prompt)
used = int(np.count_nonzero(tokens))
print(f"\nprompt: {prompt}")
print(f"tokens: {used} of {len(tokens)} slots, first ids {tokens[:8].tolist()}")
print(f"round trip: {detokenize(tokens)!r}")

fig, axes = plt.subplots(1, len(volumes) + 1, figsize=(2.2 * (len(volumes) + 1), 2.4))
mid = atlas.labels.shape[2] // 2
axes[0].imshow(atlas.labels[:, :, mid].T, cmap="tab10", origin="lower")
axes[0].set_title("labels")
for ax, (name, vol) in zip(axes[1:], volumes.items()):
    ax.imshow(vol.data[:, :, mid].T, cmap="gray", origin="lower")
    ax.set_title(name)
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out_dir / "phantom_montage.png", dpi=100)
print(f"\nwrote {out_dir / 'phantom_montage.png'}")
