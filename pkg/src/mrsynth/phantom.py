"""Brain-like phantoms and MR signal simulation.

A :class:`TissueAtlas` holds a label grid and per-class relaxation
properties. :func:`simulate_acquisition` turns an atlas into a contrast
image with the classical closed-form signal equations, so that volumes
simulated from one atlas are voxelwise aligned across sequences.
:func:`degrade` reproduces the heterogeneous low-resolution inputs
(Gaussian blur followed by subsampling).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .volume import Volume

MODALITIES = ("T1w", "T2w", "FLAIR", "PD", "T1CE", "SWI", "T2star")
SPIN_ECHO = frozenset({"T1w", "T2w", "PD", "T1CE"})
GRADIENT_ECHO = frozenset({"SWI", "T2star"})
T1CE_ENHANCEMENT = 1.8
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class TissueProperties:
    t1_ms: float
    t2_ms: float
    t2star_ms: float
    pd_au: float


# background, then shells from the outside in, then the lesion blob
BACKGROUND = TissueProperties(1.0, 1.0, 1.0, 0.0)
_SHELL_PRESETS = (
    TissueProperties(4000.0, 2000.0, 1500.0, 1.00),  # CSF-like rim
    TissueProperties(1400.0, 110.0, 60.0, 0.80),  # cortex-like
    TissueProperties(830.0, 80.0, 50.0, 0.70),  # white-matter-like
    TissueProperties(1200.0, 95.0, 40.0, 0.76),  # deep grey-like
)
LESION = TissueProperties(1600.0, 160.0, 90.0, 0.85)


@dataclass
class TissueAtlas:
    labels: np.ndarray
    spacing_mm: tuple[float, float, float]
    properties: dict[int, TissueProperties]
    seed: int
    lesion_label: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3 or min(self.labels.shape) < 8:
            raise ValueError(f"atlas grid must be >= 8 per axis, got {self.labels.shape}")
        missing = set(np.unique(self.labels).tolist()) - set(self.properties)
        if missing:
            raise ValueError(f"labels without tissue properties: {sorted(missing)}")
        if 0 in self.properties and self.properties[0].pd_au != 0:
            raise ValueError("background class 0 must have pd_au = 0")

    @property
    def brain_mask(self) -> np.ndarray:
        return self.labels > 0


@dataclass(frozen=True)
class SequenceParams:
    modality: str
    tr_ms: float
    te_ms: float
    ti_ms: float | None = None
    fa_deg: float = 90.0
    field_strength_T: float = 3.0
    scanner: str = "Siemens Prisma"
    voxel_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        if not self.tr_ms > 0:
            raise ValueError("tr_ms must be positive")
        if not 0 <= self.te_ms < self.tr_ms:
            raise ValueError(f"need 0 <= TE < TR, got TE={self.te_ms}, TR={self.tr_ms}")
        if (self.modality == "FLAIR") != (self.ti_ms is not None):
            raise ValueError("ti_ms must be given for FLAIR and only for FLAIR")
        if self.ti_ms is not None and not self.ti_ms > 0:
            raise ValueError("ti_ms must be positive")
        if not 0 < self.fa_deg <= 180:
            raise ValueError(f"fa_deg must lie in (0, 180], got {self.fa_deg}")
        if not self.field_strength_T > 0:
            raise ValueError("field_strength_T must be positive")
        if len(self.voxel_mm) != 3 or min(self.voxel_mm) <= 0:
            raise ValueError(f"voxel_mm must be 3 positive reals, got {self.voxel_mm}")
        object.__setattr__(self, "voxel_mm", tuple(float(v) for v in self.voxel_mm))

    @property
    def category(self) -> tuple:
        """Key identifying the imaging-parameter setup (ignores subject data)."""
        return (self.modality, self.tr_ms, self.te_ms, self.ti_ms, self.fa_deg,
                self.field_strength_T, self.scanner, self.voxel_mm)


# Two parameter setups per modality; the second differs in the contrast-setting
# parameter (TE, TI or TR) so that the prompt carries information.
SEQUENCE_PRESETS: dict[str, tuple[SequenceParams, ...]] = {
    "T1w": (SequenceParams("T1w", 500.0, 10.0),
            SequenceParams("T1w", 800.0, 12.0, scanner="GE Signa", field_strength_T=1.5)),
    "T2w": (SequenceParams("T2w", 4000.0, 80.0),
            SequenceParams("T2w", 4000.0, 140.0, scanner="GE Signa", field_strength_T=1.5)),
    "FLAIR": (SequenceParams("FLAIR", 9000.0, 100.0, ti_ms=2500.0),
              SequenceParams("FLAIR", 9000.0, 100.0, ti_ms=1800.0, scanner="GE Signa",
                             field_strength_T=1.5)),
    "PD": (SequenceParams("PD", 3000.0, 15.0),
           SequenceParams("PD", 2000.0, 30.0, scanner="GE Signa", field_strength_T=1.5)),
    "T1CE": (SequenceParams("T1CE", 500.0, 10.0),
             SequenceParams("T1CE", 700.0, 15.0, scanner="GE Signa", field_strength_T=1.5)),
    "SWI": (SequenceParams("SWI", 30.0, 20.0, fa_deg=15.0),
            SequenceParams("SWI", 50.0, 40.0, fa_deg=30.0, scanner="GE Signa",
                           field_strength_T=1.5)),
    "T2star": (SequenceParams("T2star", 600.0, 15.0, fa_deg=20.0),
               SequenceParams("T2star", 600.0, 35.0, fa_deg=20.0, scanner="GE Signa",
                              field_strength_T=1.5)),
}


def _shell_properties(n_shells: int) -> list[TissueProperties]:
    if n_shells <= len(_SHELL_PRESETS):
        return list(_SHELL_PRESETS[:n_shells])
    # interpolate through the presets for finer parcellations
    pos = np.linspace(0, len(_SHELL_PRESETS) - 1, n_shells)
    idx = np.arange(len(_SHELL_PRESETS))
    cols = {
        name: np.interp(pos, idx, [getattr(p, name) for p in _SHELL_PRESETS])
        for name in ("t1_ms", "t2_ms", "t2star_ms", "pd_au")
    }
    return [TissueProperties(*(float(cols[n][k]) for n in ("t1_ms", "t2_ms", "t2star_ms", "pd_au")))
            for k in range(n_shells)]


def _smooth_field(rng: np.random.Generator, size, coarse: int = 4) -> np.ndarray:
    """Low-frequency random field with unit-ish amplitude on a grid of ``size``."""
    base = rng.standard_normal((coarse,) * 3)
    zoom = [s / coarse for s in size]
    out = ndimage.zoom(base, zoom, order=3, mode="nearest", grid_mode=True)
    return out[: size[0], : size[1], : size[2]]


def generate_atlas(seed: int, size=(32, 32, 32), n_classes: int = 4,
                   spacing_mm=(1.0, 1.0, 1.0)) -> TissueAtlas:
    """Random ellipsoidal head with nested tissue shells and one lesion blob.

    Labels ``1 .. n_classes - 1`` are shells ordered from the outside in,
    label ``n_classes`` is a small ellipsoidal lesion. Every class is
    guaranteed at least one voxel.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 8:
        raise ValueError(f"atlas size must be >= 8 along every axis, got {size}")
    if n_classes < 3:
        raise ValueError(f"n_classes must be >= 3, got {n_classes}")
    rng = np.random.default_rng(seed)
    axes = [np.linspace(-1 + 1 / n, 1 - 1 / n, n) for n in size]
    x, y, z = np.meshgrid(*axes, indexing="ij")

    semi = rng.uniform(0.70, 0.88, 3)
    center = rng.uniform(-0.05, 0.05, 3)
    r = np.sqrt(((x - center[0]) / semi[0]) ** 2
                + ((y - center[1]) / semi[1]) ** 2
                + ((z - center[2]) / semi[2]) ** 2)
    r = r + 0.06 * _smooth_field(rng, size)
    mask = r < 1.0
    if mask.sum() < n_classes:
        raise ValueError("grid too coarse to host every tissue class")

    labels = np.zeros(size, dtype=np.int32)
    n_shells = n_classes - 1
    # equal-volume shells; an independent smooth field bends each inner boundary
    r_inner = r + 0.04 * _smooth_field(rng, size)
    ranks = np.empty(mask.sum(), dtype=np.int64)
    ranks[np.argsort(-r_inner[mask], kind="stable")] = np.arange(mask.sum())
    labels[mask] = 1 + (ranks * n_shells) // mask.sum()

    lesion = n_classes
    inner = np.argwhere(labels >= max(2, n_shells))
    anchor = inner[rng.integers(len(inner))]
    lc = np.array([axes[d][anchor[d]] for d in range(3)])
    lr = rng.uniform(0.18, 0.28, 3)
    blob = (((x - lc[0]) / lr[0]) ** 2 + ((y - lc[1]) / lr[1]) ** 2
            + ((z - lc[2]) / lr[2]) ** 2) < 1.0
    blob &= mask
    blob[tuple(anchor)] = True
    labels[blob] = lesion
    for k in range(1, n_shells + 1):
        if not np.any(labels == k):
            raise ValueError(f"class {k} vanished; use a larger grid")

    props = {0: BACKGROUND, lesion: LESION}
    props.update({k + 1: p for k, p in enumerate(_shell_properties(n_shells))})
    return TissueAtlas(labels, tuple(float(s) for s in spacing_mm), props, seed, lesion)


def signal_equation(props: TissueProperties, params: SequenceParams) -> float:
    """Noiseless steady-state signal of one tissue under ``params``."""
    pd, t1, t2, t2s = props.pd_au, props.t1_ms, props.t2_ms, props.t2star_ms
    tr, te = params.tr_ms, params.te_ms
    e1 = math.exp(-tr / t1)
    if params.modality in SPIN_ECHO:
        return pd * (1.0 - e1) * math.exp(-te / t2)
    if params.modality == "FLAIR":
        return pd * abs(1.0 - 2.0 * math.exp(-params.ti_ms / t1) + e1) * math.exp(-te / t2)
    fa = math.radians(params.fa_deg)
    return pd * math.sin(fa) * (1.0 - e1) / (1.0 - math.cos(fa) * e1) * math.exp(-te / t2s)


def resample_linear(data: np.ndarray, out_shape) -> np.ndarray:
    """Cell-centred linear resampling of a 3D grid onto ``out_shape``."""
    out_shape = tuple(int(n) for n in out_shape)
    if out_shape == data.shape:
        return data.copy()
    coords = [(np.arange(m) + 0.5) * n / m - 0.5 for n, m in zip(data.shape, out_shape)]
    grid = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(data, grid, order=1, mode="nearest")


def simulate_acquisition(atlas: TissueAtlas, params: SequenceParams,
                         noise_sigma: float = 0.0, seed: int = 0) -> Volume:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    lut = np.zeros(int(atlas.labels.max()) + 1)
    for label, props in atlas.properties.items():
        if params.modality == "T1CE" and label == atlas.lesion_label:
            props = replace(props, pd_au=props.pd_au * T1CE_ENHANCEMENT)
        lut[label] = signal_equation(props, params)
    data = lut[atlas.labels]
    shape = tuple(
        max(1, int(round(n * s / v)))
        for n, s, v in zip(data.shape, atlas.spacing_mm, params.voxel_mm)
    )
    data = resample_linear(data, shape)
    if noise_sigma > 0:
        data = data + np.random.default_rng(seed).normal(0.0, noise_sigma, shape)
    return Volume(data, params.voxel_mm)


def _check_range(name, values, lo, hi):
    values = tuple(float(v) for v in values)
    if len(values) != 3 or any(not lo <= v <= hi for v in values):
        raise ValueError(f"{name} must be 3 values in [{lo}, {hi}], got {values}")
    return values


def degrade(volume: Volume, factors=(1.0, 1.0, 1.0), fwhm=(1.0, 1.0, 1.0)) -> Volume:
    """Blur with a Gaussian of the given FWHM (voxels), then subsample.

    The simulation protocol draws both ``factors`` and ``fwhm`` from
    ``[1, 3]``; ``fwhm = 0`` on an axis skips blurring along it. Output
    dims are ``round(dims / factors)``.
    """
    factors = _check_range("factors", factors, 1.0, 3.0)
    fwhm = _check_range("fwhm", fwhm, 0.0, 3.0)
    data = np.asarray(volume.data, dtype=np.float64)
    for axis, w in enumerate(fwhm):
        if w > 0:
            data = ndimage.gaussian_filter1d(data, w * FWHM_TO_SIGMA, axis=axis, mode="nearest")
    shape = tuple(max(1, int(round(n / f))) for n, f in zip(data.shape, factors))
    data = resample_linear(data, shape)
    spacing = tuple(s * f for s, f in zip(volume.spacing_mm, factors))
    return Volume(data, spacing)


def sample_degradation(rng: np.random.Generator):
    """Random (factors, fwhm) drawn uniformly from [1, 3] per axis."""
    return tuple(rng.uniform(1, 3, 3)), tuple(rng.uniform(1, 3, 3))
