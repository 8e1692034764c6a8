"""Paired phantom corpora: many atlases, each simulated under many sequences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import SEQUENCE_PRESETS, SequenceParams, generate_atlas, simulate_acquisition
from .prompt import ScanMetadata
from .volume import Volume


@dataclass
class CorpusItem:
    pair_id: str
    params: SequenceParams
    meta: ScanMetadata
    volume: Volume


def preset_sequences(modalities=None, settings_per_modality: int = 2) -> list[SequenceParams]:
    mods = modalities or list(SEQUENCE_PRESETS)
    return [p for m in mods for p in SEQUENCE_PRESETS[m][:settings_per_modality]]


def subject_demographics(seed: int, atlas_index: int) -> tuple[float, str]:
    rng = np.random.default_rng([seed, atlas_index, 7])
    return float(np.round(rng.uniform(20, 85), 1)), ("M" if rng.random() < 0.5 else "F")


def build_corpus(n_atlases: int, sequences: list[SequenceParams], size=(32, 32, 32),
                 n_classes: int = 4, noise_sigma: float = 0.0, seed: int = 0,
                 first_atlas: int = 0) -> list[CorpusItem]:
    """Simulate every sequence on atlases ``first_atlas .. first_atlas + n_atlases - 1``."""
    if n_atlases < 1:
        raise ValueError("n_atlases must be >= 1")
    if not sequences:
        raise ValueError("need at least one sequence")
    items = []
    for a in range(first_atlas, first_atlas + n_atlases):
        atlas = generate_atlas(seed * 100003 + a, size, n_classes)
        age, sex = subject_demographics(seed, a)
        for k, params in enumerate(sequences):
            vol = simulate_acquisition(atlas, params, noise_sigma, seed=seed * 7919 + a * 131 + k)
            items.append(CorpusItem(f"atlas{a:04d}", params,
                                    ScanMetadata.from_sequence(params, age, sex), vol))
    return items
