"""Run configuration and dataset manifests.

A run config is one JSON object. Missing keys take the values in
:data:`DEFAULTS`; the merged result is validated against
:data:`SCHEMA` and frozen next to the run outputs so that re-running
the frozen file reproduces the run.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import jsonschema

from .encoders import CnnEncoderConfig, TextEncoderConfig, ViTConfig
from .phantom import MODALITIES, SEQUENCE_PRESETS, SequenceParams
from .pretrain import ClipTrainConfig
from .synthgen import SynthConfig, SynthTrainConfig


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


SPLITS = ("train", "val", "test")


def _fields(obj, drop=()) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(obj).items()
            if k not in drop}


_SEED_FIELDS = ("seed", "float64")

DEFAULTS: dict = {
    "stage": "clip",
    "seed": 0,
    "output_dir": "run",
    "manifest": None,
    "float64": False,
    "data": {
        "n_atlases": 5,
        "size": [32, 32, 32],
        "n_classes": 4,
        "noise_sigma": 0.005,
        "modalities": list(MODALITIES),
        "settings_per_modality": 2,
        "sequences": None,  # explicit list overrides the presets
        "split_fractions": [0.6, 0.2, 0.2],
    },
    "text_encoder": _fields(TextEncoderConfig(), drop=("context_length", "vocab_size")),
    "vit": {**_fields(ViTConfig()), "downscale": 1},
    "clip_train": _fields(ClipTrainConfig(), drop=_SEED_FIELDS),
    "cnn": _fields(CnnEncoderConfig()),
    "synth": {"heads": 4, "liif_hidden": list(SynthConfig().liif_hidden), "conditioning": "text",
              "source_modality": "T1w", "target_modalities": ["T2w"], "clip_checkpoint": None},
    "synth_train": _fields(SynthTrainConfig(), drop=_SEED_FIELDS),
    "eval": {"metrics": ["psnr", "ssim", "pearson", "mae"], "normalization": "percentile_995",
             "scale": 1.0, "overlap": None},
    "retrieve": {"n_candidates": 10},
}

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_triple = {"type": "array", "items": _pos_num, "minItems": 3, "maxItems": 3}

_SEQUENCE = {
    "type": "object",
    "required": ["modality", "tr_ms", "te_ms"],
    "additionalProperties": False,
    "properties": {
        "modality": {"enum": list(MODALITIES)},
        "tr_ms": _pos_num,
        "te_ms": {"type": "number", "minimum": 0},
        "ti_ms": {"anyOf": [_pos_num, {"type": "null"}]},
        "fa_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 180},
        "field_strength_T": _pos_num,
        "scanner": {"type": "string", "minLength": 1},
        "voxel_mm": _triple,
    },
}


def _obj(props: dict, required=None) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required if required is not None else props)}


SCHEMA = _obj({
    "stage": {"enum": ["clip", "synth"]},
    "seed": {"type": "integer", "minimum": 0},
    "output_dir": {"type": "string", "minLength": 1},
    "manifest": {"type": ["string", "null"]},
    "float64": {"type": "boolean"},
    "data": _obj({
        "n_atlases": {"type": "integer"},
        "size": {"type": "array", "items": {"type": "integer", "minimum": 8}, "minItems": 3, "maxItems": 3},
        "n_classes": {"type": "integer", "minimum": 2},
        "noise_sigma": {"type": "number", "minimum": 0},
        "modalities": {"type": "array", "items": {"enum": list(MODALITIES)}, "minItems": 1,
                       "uniqueItems": True},
        "settings_per_modality": {"type": "integer", "minimum": 1, "maximum": 2},
        "sequences": {"anyOf": [{"type": "null"},
                                {"type": "array", "items": _SEQUENCE, "minItems": 1}]},
        "split_fractions": {"type": "array", "items": {"type": "number", "minimum": 0},
                            "minItems": 3, "maxItems": 3},
    }),
    "text_encoder": _obj({k: _pos_int for k in ("layers", "heads", "width", "embed_dim")}),
    "vit": _obj({k: _pos_int for k in ("token_size", "layers", "heads", "width", "mlp_dim",
                                       "input_edge", "embed_dim", "downscale")}),
    "clip_train": _obj({
        "epochs": _pos_int, "warmup_epochs": {"type": "integer", "minimum": 0},
        "peak_lr": _pos_num, "batch_size": _pos_int,
        "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "tau": _pos_num, "modality_prompt_prob": {"type": "number", "minimum": 0, "maximum": 1},
    }),
    "cnn": _obj({"n_res_layers": _pos_int, "hidden": _pos_int, "out_dim": _pos_int,
                 "patch_edge": {"type": "integer", "minimum": 2}}),
    "synth": _obj({
        "heads": _pos_int,
        "liif_hidden": {"type": "array", "items": _pos_int},
        "conditioning": {"enum": ["text", "one_hot"]},
        "source_modality": {"enum": list(MODALITIES)},
        "target_modalities": {"type": "array", "items": {"enum": list(MODALITIES)}, "minItems": 1},
        "clip_checkpoint": {"type": ["string", "null"]},
    }),
    "synth_train": _obj({
        "epochs": _pos_int, "batch_size": _pos_int, "lr": _pos_num,
        "hold_epochs": {"type": "integer", "minimum": 0}, "step_epochs": _pos_int,
        "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "patches_per_pair": _pos_int, "queries_per_patch": _pos_int,
        "scale_range": {"type": "array", "items": {"type": "number", "minimum": 1},
                        "minItems": 2, "maxItems": 2},
    }),
    "eval": _obj({
        "metrics": {"type": "array", "items": {"enum": ["psnr", "ssim", "pearson", "mae"]},
                    "minItems": 1, "uniqueItems": True},
        "normalization": {"enum": ["percentile_995", "minmax", "none"]},
        "scale": {"type": "number", "minimum": 1},
        "overlap": {"anyOf": [{"type": "null"}, {"type": "integer", "minimum": 0}]},
    }),
    "retrieve": _obj({"n_candidates": _pos_int}),
})


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(error) -> str:
    return "/".join(str(p) for p in error.absolute_path) or "<root>"


def resolve(raw: dict) -> dict:
    """Merge ``raw`` over the defaults and validate; errors name the field path."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(cfg), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        raise ConfigError("; ".join(f"{_path(e)}: {e.message}" for e in errors))
    build_objects(cfg)
    return cfg


def load_config(path=None, seed: int | None = None, out: str | None = None) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if seed is not None:
        raw = {**raw, "seed": seed}
    if out is not None:
        raw = {**raw, "output_dir": out}
    return resolve(raw)


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class RunObjects:
    text: TextEncoderConfig
    vit: ViTConfig
    vit_downscale: int
    clip_train: ClipTrainConfig
    cnn: CnnEncoderConfig
    synth: SynthConfig
    synth_train: SynthTrainConfig


def _section(name: str, factory):
    try:
        return factory()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def sequences(cfg: dict) -> list[SequenceParams]:
    data = cfg["data"]
    if data["sequences"] is not None:
        return [_section(f"data/sequences/{i}", lambda s=s: SequenceParams(
                    **{**s, "voxel_mm": tuple(s.get("voxel_mm", (1.0, 1.0, 1.0)))}))
                for i, s in enumerate(data["sequences"])]
    return [p for m in data["modalities"] for p in SEQUENCE_PRESETS[m][: data["settings_per_modality"]]]


def build_objects(cfg: dict) -> RunObjects:
    """Typed configs for every stage; raises :class:`ConfigError` with the section path."""
    vit = dict(cfg["vit"])
    downscale = vit.pop("downscale")
    sequences(cfg)
    cnn = _section("cnn", lambda: CnnEncoderConfig(**cfg["cnn"]))
    text = _section("text_encoder", lambda: TextEncoderConfig(**cfg["text_encoder"]))
    s = cfg["synth"]
    return RunObjects(
        text=text,
        vit=_section("vit", lambda: ViTConfig(**vit)),
        vit_downscale=downscale,
        clip_train=_section("clip_train", lambda: ClipTrainConfig(
            **cfg["clip_train"], seed=cfg["seed"], float64=cfg["float64"])),
        cnn=cnn,
        synth=_section("synth", lambda: SynthConfig(
            cnn=cnn, heads=s["heads"], liif_hidden=tuple(s["liif_hidden"]),
            conditioning=s["conditioning"],
            # one-hot labels are filled in from the training data
            categories=(("", ""),) if s["conditioning"] == "one_hot" else (),
            text_embed_dim=text.embed_dim)),
        synth_train=_section("synth_train", lambda: SynthTrainConfig(
            **cfg["synth_train"], seed=cfg["seed"], float64=cfg["float64"])),
    )


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    volume_path: str
    metadata_path: str
    pair_id: str
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __post_init__(self):
        split_of: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"entry {e.volume_path}: split must be one of {SPLITS}")
            if split_of.setdefault(e.pair_id, e.split) != e.split:
                raise DataError(f"pair {e.pair_id} appears in more than one split")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        return {"entries": [e.__dict__ for e in self.entries]}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"manifest not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        try:
            entries = [ManifestEntry(**e) for e in raw["entries"]]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from exc
        return cls(entries, path.parent)


def assign_splits(pair_ids: list[str], fractions, seed: int) -> dict[str, str]:
    """Deterministic pair-level split; every pair lands in exactly one split."""
    import numpy as np

    total = float(sum(fractions))
    if total <= 0:
        raise ConfigError("data/split_fractions: must not all be zero")
    ids = sorted(pair_ids)
    order = np.random.default_rng([seed, 1]).permutation(len(ids))
    counts = np.floor(np.array(fractions) / total * len(ids)).astype(int)
    # hand leftovers to the largest fractions first
    for k in np.argsort(-np.array(fractions), kind="stable")[: len(ids) - counts.sum()]:
        counts[k] += 1
    out, pos = {}, 0
    for name, c in zip(SPLITS, counts):
        for i in order[pos : pos + c]:
            out[ids[i]] = name
        pos += c
    return out
