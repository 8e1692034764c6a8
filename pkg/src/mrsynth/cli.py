"""Command-line entry point: ``mrsynth {gen-data,train,synth,eval,retrieve}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import subject_demographics
from .metrics import normalize_pair, pearson, psnr, ssim, summarize, write_report
from .phantom import MODALITIES, generate_atlas, resample_linear, simulate_acquisition
from .pretrain import (
    ClipModel, ClipSample, clip_checkpoint, modality_retrieval_accuracy, prepare_vit_input,
    text_retrieval_hits, train_clip,
)
from .prompt import ScanMetadata, TokenOverflowError, build_prompt, read_sidecar, tokenize, write_sidecar
from .synthgen import (
    SynthConfig, SynthesisModel, downsample_area, load_frozen_text, make_pair, mae, synth_checkpoint,
    synthesize, text_encoder_from_clip, train_synthesis,
)
from .volume import Volume, VolumeFormatError, normalize_intensity, read_rvol, write_rvol

log = logging.getLogger("mrsynth")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
IDENTITY = "identity"


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise C.DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _setup_torch(cfg: dict) -> None:
    if cfg["float64"]:
        torch.use_deterministic_algorithms(True)


def category(meta: ScanMetadata) -> tuple:
    """Imaging-parameter identity of a scan, ignoring subject fields."""
    return (meta.scanner, meta.field_strength_T, meta.modality, meta.tr_ms, meta.te_ms,
            meta.ti_ms, meta.fa_deg, meta.voxel_mm)


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    data = cfg["data"]
    if data["n_atlases"] < 1:
        raise C.ConfigError("data/n_atlases: must be >= 1")
    seqs = C.sequences(cfg)
    out = _out_dir(cfg)
    vol_dir = out / "volumes"
    vol_dir.mkdir(exist_ok=True)
    seed = cfg["seed"]
    pair_ids = [f"atlas{a:04d}" for a in range(data["n_atlases"])]
    splits = C.assign_splits(pair_ids, data["split_fractions"], seed)
    entries = []
    for a, pid in enumerate(pair_ids):
        atlas = generate_atlas(seed * 100003 + a, tuple(data["size"]), data["n_classes"])
        age, sex = subject_demographics(seed, a)
        for k, params in enumerate(seqs):
            vol = simulate_acquisition(atlas, params, data["noise_sigma"], seed=seed * 7919 + a * 131 + k)
            stem = f"{pid}_{k:02d}_{params.modality}"
            write_rvol(vol_dir / f"{stem}.rvol", vol)
            write_sidecar(vol_dir / f"{stem}.json", ScanMetadata.from_sequence(params, age, sex))
            entries.append(C.ManifestEntry(f"volumes/{stem}.rvol", f"volumes/{stem}.json", pid, splits[pid]))
    C.Manifest(entries, out).write(out / "manifest.json")
    C.dump_config(cfg, out / "config.json")
    print(f"wrote {len(entries)} volumes for {len(pair_ids)} atlases to {out}")
    return EXIT_OK


# -- shared data loading -----------------------------------------------------

def _manifest(cfg: dict) -> C.Manifest:
    if not cfg["manifest"]:
        raise C.DataError("no manifest given (set 'manifest' in the config)")
    return C.Manifest.read(cfg["manifest"])


def _load_entry(man: C.Manifest, e: C.ManifestEntry) -> tuple[Volume, ScanMetadata]:
    try:
        return read_rvol(man.resolve(e.volume_path)), read_sidecar(man.resolve(e.metadata_path))
    except FileNotFoundError as exc:
        raise C.DataError(f"missing data file: {exc.filename}") from exc
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise C.DataError(f"{e.metadata_path}: malformed sidecar ({exc})") from exc


def _split_or_fail(man: C.Manifest, name: str) -> list[C.ManifestEntry]:
    entries = man.split(name)
    if not entries:
        raise C.DataError(f"manifest has no '{name}' entries")
    return entries


def _clip_samples(cfg: dict, man: C.Manifest, entries, objs: C.RunObjects) -> list[ClipSample]:
    out = []
    for e in entries:
        vol, meta = _load_entry(man, e)
        try:
            tokens = tokenize(build_prompt(meta))
        except TokenOverflowError as exc:
            raise C.DataError(f"{e.metadata_path}: {exc}") from exc
        out.append(ClipSample(prepare_vit_input(vol, objs.vit.input_edge, objs.vit_downscale),
                              tokens, category(meta), meta.modality))
    return out


def _synth_cases(cfg: dict, man: C.Manifest, entries) -> list[tuple[str, Volume, Volume, ScanMetadata]]:
    """``(case_id, source, target, target_meta)`` for every source/target pairing."""
    s = cfg["synth"]
    by_pair: dict[str, list] = {}
    for e in entries:
        by_pair.setdefault(e.pair_id, []).append(e)
    cases = []
    for pid in sorted(by_pair):
        loaded = [(e, *_load_entry(man, e)) for e in sorted(by_pair[pid], key=lambda e: e.volume_path)]
        sources = [x for x in loaded if x[2].modality == s["source_modality"]]
        if not sources:
            raise C.DataError(f"pair {pid} has no {s['source_modality']} source volume")
        _, src, _ = sources[0]
        for e, vol, meta in loaded:
            if meta.modality in s["target_modalities"] and vol is not src:
                if vol.shape != src.shape:
                    raise C.DataError(f"pair {pid}: {e.volume_path} is not aligned with its source")
                cases.append((Path(e.volume_path).stem, src, vol, meta))
    if not cases:
        raise C.DataError("no source/target pairs found for the configured modalities")
    return cases


# -- train -------------------------------------------------------------------

def _write_loss_log(path: Path, history: list[dict], start_epoch: int) -> None:
    rows = []
    if start_epoch > 0 and path.exists():
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) <= start_epoch]
    rows += [{k: h[k] for k in ("epoch", "mean_loss", "lr")} for h in history]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("epoch", "mean_loss", "lr"), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _resume(checkpoint: str | None, stage: str):
    if checkpoint is None:
        return None
    ckpt = load_checkpoint(checkpoint)
    if ckpt.stage != stage:
        raise C.ConfigError(f"--checkpoint: expected a {stage} checkpoint, got {ckpt.stage}")
    return ckpt


def cmd_train(cfg: dict, checkpoint: str | None) -> int:
    objs = C.build_objects(cfg)
    man = _manifest(cfg)
    train_entries = _split_or_fail(man, "train")
    out = _out_dir(cfg)
    resume = _resume(checkpoint, cfg["stage"])
    t0 = time.perf_counter()
    if cfg["stage"] == "clip":
        samples = _clip_samples(cfg, man, train_entries, objs)
        text_cfg, vit_cfg = objs.text, objs.vit
        if resume is not None:
            model_cfg = resume.config["model"]
            text_cfg = type(objs.text)(**model_cfg["text"])
            vit_cfg = type(objs.vit)(**model_cfg["vit"])
        result = train_clip(samples, objs.clip_train, text_cfg, vit_cfg, resume=resume)
        ckpt = clip_checkpoint(result, objs.clip_train)
        ckpt.config["vit_downscale"] = objs.vit_downscale
    else:
        cases = _synth_cases(cfg, man, train_entries)
        pairs = [make_pair(src, tgt, meta) for _, src, tgt, meta in cases]
        model = _synth_model(cfg, objs, cases, resume)
        result = train_synthesis(pairs, model, objs.synth_train, resume=resume)
        ckpt = synth_checkpoint(result, objs.synth_train)
        ckpt.config["data"] = {"source_modality": cfg["synth"]["source_modality"]}
    start = int(resume.state.get("epoch", 0)) if resume is not None else 0
    save_checkpoint(out / "checkpoint.ckpt", ckpt)
    _write_loss_log(out / "loss.csv", result.history, start)
    C.dump_config(cfg, out / "config.json")
    last = result.history[-1] if result.history else {"epoch": start, "mean_loss": float("nan")}
    print(f"{cfg['stage']} training: epochs {start + 1}..{last['epoch']}, final loss "
          f"{last['mean_loss']:.6f}, {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def _synth_model(cfg, objs: C.RunObjects, cases, resume) -> SynthesisModel:
    if resume is not None:
        return SynthesisModel.from_checkpoint(resume, float64=cfg["float64"])
    s = cfg["synth"]
    torch.manual_seed(cfg["seed"])
    if s["conditioning"] == "one_hot":
        cats = tuple(sorted({(meta.scanner, meta.modality) for *_, meta in cases}))
        syn = SynthConfig(cnn=objs.cnn, heads=s["heads"], liif_hidden=tuple(s["liif_hidden"]),
                          conditioning="one_hot", categories=cats)
        return SynthesisModel(syn)
    if not s["clip_checkpoint"]:
        raise C.ConfigError("synth/clip_checkpoint: text conditioning needs a stage-1 checkpoint")
    try:
        text_cfg, tensors = text_encoder_from_clip(load_checkpoint(s["clip_checkpoint"]))
    except ValueError as exc:
        raise C.ConfigError(f"synth/clip_checkpoint: {exc}") from exc
    syn = SynthConfig(cnn=objs.cnn, heads=s["heads"], liif_hidden=tuple(s["liif_hidden"]),
                      conditioning="text", text_embed_dim=text_cfg.embed_dim)
    model = SynthesisModel(syn, text_cfg)
    load_frozen_text(model, tensors)
    return model


# -- synth -------------------------------------------------------------------

def parse_scale(text: str) -> tuple[float, float, float]:
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise C.ConfigError(f"--scale: cannot parse {text!r}") from None
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise C.ConfigError(f"--scale: need 1 or 3 comma-separated values, got {text!r}")
    if min(parts) < 1:
        raise C.ConfigError(f"--scale: components must be >= 1, got {text!r}")
    return tuple(parts)


def _synth_checkpoint_model(path: str, float64: bool) -> SynthesisModel:
    ckpt = load_checkpoint(path)
    if ckpt.stage != "synth":
        raise C.ConfigError(f"--checkpoint: expected a synth checkpoint, got {ckpt.stage}")
    return SynthesisModel.from_checkpoint(ckpt, float64=float64)


def cmd_synth(cfg: dict, args) -> int:
    if not (args.checkpoint and args.input and args.meta and args.out):
        raise C.ConfigError("synth needs --checkpoint, --input, --meta and --out")
    scale = parse_scale(args.scale)
    model = _synth_checkpoint_model(args.checkpoint, cfg["float64"])
    vol = read_rvol(args.input)
    try:
        meta = read_sidecar(args.meta)
    except FileNotFoundError as exc:
        raise C.DataError(f"missing metadata file: {args.meta}") from exc
    t0 = time.perf_counter()
    try:
        out = synthesize(vol, meta, scale, model, overlap=cfg["eval"]["overlap"])
    except ValueError as exc:
        raise C.DataError(str(exc)) from exc
    elapsed = time.perf_counter() - t0
    write_rvol(args.out, out)
    print(f"synthesized {vol.shape} -> {out.shape} in {elapsed:.3f} s")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def _metric(name: str, pred, gt, rule: str) -> float:
    if name == "psnr":
        return psnr(pred, gt, rule)
    if name == "ssim":
        return ssim(pred, gt, rule)
    p, g = normalize_pair(pred, gt, rule)
    return pearson(p, g) if name == "pearson" else mae(p, g)


def _plot(path: Path, metric: str, values: list[float], labels: list[str]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5), gridspec_kw={"width_ratios": [3, 1]})
    ax1.bar(range(len(values)), values, color="tab:blue")
    ax1.set_xticks(range(len(values)), labels, rotation=90, fontsize=6)
    ax1.set_ylabel(metric)
    ax2.boxplot(values)
    ax2.set_xticks([1], ["all cases"])
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(cfg: dict, checkpoint: str | None) -> int:
    if checkpoint is None:
        raise C.ConfigError(f"eval needs --checkpoint (a synth checkpoint or '{IDENTITY}')")
    man = _manifest(cfg)
    cases = _synth_cases(cfg, man, _split_or_fail(man, "test"))
    ev = cfg["eval"]
    model = None if checkpoint == IDENTITY else _synth_checkpoint_model(checkpoint, cfg["float64"])
    out = _out_dir(cfg)
    rows, per_metric = [], {m: [] for m in ev["metrics"]}
    labels = []
    for case_id, src, tgt, meta in cases:
        gt = normalize_intensity(tgt.data)
        if ev["scale"] > 1:
            low, scale = downsample_area(Volume(normalize_intensity(src.data), src.spacing_mm), ev["scale"])
            if model is None:
                pred = resample_linear(low.data, src.shape)
            else:
                pred = synthesize(low, meta, scale, model, overlap=ev["overlap"], normalize=False).data
        elif model is None:
            pred = normalize_intensity(src.data)
        else:
            pred = synthesize(src, meta, 1.0, model, overlap=ev["overlap"]).data
        labels.append(case_id)
        for m in ev["metrics"]:
            value = _metric(m, pred, gt, ev["normalization"])
            per_metric[m].append(value)
            rows.append({"case_id": case_id, "metric": m, "value": value, "ci_lo": float("nan"),
                         "ci_hi": float("nan"), "normalization": ev["normalization"],
                         "seed": cfg["seed"]})
    write_report(out / "report.csv", rows)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("metric", "mean", "median", "q1", "q3", "n"),
                           lineterminator="\n")
        w.writeheader()
        for m, values in per_metric.items():
            s = summarize(values)
            w.writerow({"metric": m, **{k: repr(v) if isinstance(v, float) else v for k, v in s.items()}})
            _plot(out / f"{m}.png", m, values, labels)
            print(f"{m}: mean {s['mean']:.4f} median {s['median']:.4f} (n={s['n']})")
    C.dump_config(cfg, out / "config.json")
    return EXIT_OK


# -- retrieve ----------------------------------------------------------------

def cmd_retrieve(cfg: dict, checkpoint: str | None, mode: str | None) -> int:
    mode = mode or "text"
    if mode not in ("text", "modality"):
        raise C.ConfigError(f"--mode: retrieve expects 'text' or 'modality', got {mode!r}")
    if checkpoint is None:
        raise C.ConfigError("retrieve needs --checkpoint")
    ckpt = load_checkpoint(checkpoint)
    if ckpt.stage != "clip":
        raise C.ConfigError(f"--checkpoint: expected a clip checkpoint, got {ckpt.stage}")
    model = ClipModel.from_checkpoint(ckpt, float64=cfg["float64"])
    objs = C.build_objects(cfg)
    objs.vit = model.image.cfg
    objs.vit_downscale = ckpt.config.get("vit_downscale", objs.vit_downscale)
    man = _manifest(cfg)
    samples = _clip_samples(cfg, man, _split_or_fail(man, "test"), objs)
    images = np.stack([s.image for s in samples])
    modalities = [s.modality for s in samples]
    if mode == "modality":
        overall, per = modality_retrieval_accuracy(model, images, modalities)
        counts = {m: modalities.count(m) for m in MODALITIES}
    else:
        hits = text_retrieval_hits(model, images, np.stack([s.tokens for s in samples]),
                                   [s.category for s in samples], cfg["retrieve"]["n_candidates"],
                                   cfg["seed"])
        overall = float(hits.mean())
        mods = np.array(modalities)
        counts = {m: int(np.sum(mods == m)) for m in MODALITIES}
        per = {m: float(hits[mods == m].mean()) if counts[m] else float("nan") for m in MODALITIES}
    out = _out_dir(cfg)
    with open(out / f"retrieval_{mode}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scope", "accuracy", "n"))
        w.writerow(("overall", repr(overall), len(samples)))
        for m in MODALITIES:
            w.writerow((m, "" if np.isnan(per[m]) else repr(per[m]), counts[m]))
    print(f"{mode} retrieval top-1 accuracy: {overall:.4f} (n={len(samples)})")
    for m in MODALITIES:
        print(f"  {m:7s} {per[m]:.4f} (n={counts[m]})")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrsynth", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (overrides output_dir)"):
        p.add_argument("--config", help="JSON run config; omitted keys take defaults")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help=out_help)
        return p

    common(sub.add_parser("gen-data", help="simulate a phantom corpus and write a manifest"))
    p = common(sub.add_parser("train", help="train stage 1 (clip) or stage 2 (synth)"))
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--mode", choices=("clip", "synth"), help="stage to train (overrides config)")
    p = common(sub.add_parser("synth", help="synthesize one volume"), "output RVOL path")
    p.add_argument("--checkpoint", help="stage-2 checkpoint")
    p.add_argument("--input", help="input RVOL volume")
    p.add_argument("--meta", help="target metadata JSON sidecar")
    p.add_argument("--scale", default="1,1,1", help="upscaling factors a,b,c (each >= 1)")
    p = common(sub.add_parser("eval", help="score synthesis on the test split"))
    p.add_argument("--checkpoint", help=f"stage-2 checkpoint or '{IDENTITY}'")
    p = common(sub.add_parser("retrieve", help="image-to-text retrieval on the test split"))
    p.add_argument("--checkpoint", help="stage-1 checkpoint")
    p.add_argument("--mode", choices=("text", "modality"), default="text")
    sub.add_parser("defaults", help="print the default config as JSON")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "defaults":
        print(json.dumps(C.DEFAULTS, indent=2, sort_keys=True))
        return EXIT_OK
    out_override = None if args.command == "synth" else args.out
    cfg = C.load_config(args.config, args.seed, out_override)
    if args.command == "train" and args.mode:
        cfg = C.resolve({**cfg, "stage": args.mode})
    _setup_torch(cfg)
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "train":
        return cmd_train(cfg, args.checkpoint)
    if args.command == "synth":
        return cmd_synth(cfg, args)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint)
    return cmd_retrieve(cfg, args.checkpoint, args.mode)


def main(argv=None) -> int:
    try:
        return run(argv)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (C.DataError, VolumeFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
