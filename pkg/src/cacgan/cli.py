"""Command line interface: ``cacgan <subcommand> ...``.

Every subcommand takes ``--seed``. ``$CACGAN_CACHE`` sets the directory holding
desk-scale checkpoints used by ``pipeline --desk``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cacslice import ClassifierConfig, classify_slices, heart_slices, train_classifier
from .calgan import GanTrainConfig, train_cyclegan
from .checkpoint import load_checkpoint, seed_everything
from .heartseg import HeartSegConfig, segment_heart, train_heartseg
from .phantom import PhantomSpec, generate_pair, random_spec, save_phantom, write_lesion_table
from .pipeline import (
    Models, PipelineConfig, RunManifest, ScanInput, evaluate_pairs, process_scan, report, run_pipeline, _clean,
)
from .scoring import score_scan
from .stats import PairTable
from .volume import NormalizedSlice, BinaryMask, Volume, read_mask, read_volume, resample, resample_like, write_volume

log = logging.getLogger("cacgan")


def _load_cfg(cls, path, seed):
    d = json.loads(Path(path).read_text()) if path else {}
    if seed is not None:
        d["seed"] = seed
    return cls(**d)


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _read_scans(path):
    return [ScanInput(**s) for s in json.loads(Path(path).read_text())]


# ------------------------------------------------------------------ phantom


def cmd_phantom_generate(a):
    out = Path(a.out)
    base = PhantomSpec.from_dict(json.loads(Path(a.spec).read_text())) if a.spec else None
    scans = []
    for i in range(a.pairs):
        if base is None:
            spec = random_spec(a.seed + i, n_lesions=(a.min_lesions, a.max_lesions),
                               motion_jitter=a.motion_jitter, shift_jitter_mm=a.shift_jitter)
        else:
            spec = PhantomSpec.from_dict({**base.to_dict(), "seed": a.seed + i})
        subj = f"p{i:03d}"
        pair = generate_pair(spec, pair_seed=i)
        for k, (v, t) in enumerate(pair, start=1):
            name = f"{subj}_scan{k}"
            save_phantom(out, name, v, t)
            scans.append({"subject": subj, "scan": f"scan{k}", "image": str(out / f"{name}.vol"),
                          "labels": str(out / f"{name}_labels.vol")})
        write_lesion_table(out / f"{subj}_lesions.csv", (pair[0][1], pair[1][1]))
    _write_json(out / "scans.json", scans)
    print(f"wrote {len(scans)} scans to {out}")


def cmd_phantom_slices(a):
    """Heart-centred training slices with truth flags, one .npy per slice plus a manifest."""
    from .phantom import generate_phantom

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in range(a.seed, a.seed + a.phantoms):
        v, t = generate_phantom(random_spec(s, n_lesions=(0, a.max_lesions)))
        for x in heart_slices(v, t.heart_mask, a.side):
            f = f"ph{s:05d}_z{x.slice_index:03d}.npy"
            np.save(out / f, x.data.astype(np.float32))
            entries.append({"file": f, "has_cac": bool(t.slice_flags[x.slice_index]), "position": x.position,
                            "slice_index": x.slice_index, "crop_center": list(x.crop_center)})
    _write_json(out / "manifest.json", entries)
    print(f"wrote {len(entries)} slices to {out}")


def _slice_manifest(path):
    root = Path(path).parent
    for e in json.loads(Path(path).read_text()):
        yield np.load(root / e["file"]), e


# ----------------------------------------------------------------- training


def cmd_train_heartseg(a):
    cfg = _load_cfg(HeartSegConfig, a.config, a.seed)
    data = []
    for s in json.loads(Path(a.data).read_text()):
        v = read_volume(s["image"])
        heart = s.get("heart") or s["image"].replace(".vol", "_heart.vol")
        data.append((v, read_mask(heart)))
    _, hist = train_heartseg(data, cfg, a.out)
    print(f"final dice loss {hist[-1][1]:.4f}; checkpoint in {a.out}")


def cmd_train_classifier(a):
    cfg = _load_cfg(ClassifierConfig, a.config, a.seed)
    data = [(NormalizedSlice(x, tuple(e["crop_center"]), x.shape[0], e["slice_index"], position=e["position"]),
             e["has_cac"]) for x, e in _slice_manifest(a.data)]
    _, hist = train_classifier(data, cfg, a.out)
    print(f"final cross entropy {hist[-1][1]:.4f}; checkpoint in {a.out}")


def cmd_train_cyclegan(a):
    cfg = _load_cfg(GanTrainConfig, a.config, a.seed)
    data = [(x, e["has_cac"], e["position"]) for x, e in _slice_manifest(a.data)]
    _, hist = train_cyclegan(data, cfg, a.out)
    _write_json(Path(a.out) / "history.json", hist)
    print(f"final losses {hist[-1]}; checkpoint in {a.out}")


# ---------------------------------------------------------------- inference


def cmd_segment(a):
    models, man = load_checkpoint(a.model)
    cfg = HeartSegConfig(**man["config"])
    v = read_volume(a.input)
    mask = segment_heart(models["heartseg"], resample(v, cfg.spacing, "linear"), cfg)
    mask = resample_like(mask, v, "nearest")
    write_volume(a.out, Volume(mask.data.astype(np.int16), v.spacing, v.origin))
    print(f"heart voxels: {int(mask.data.sum())}")


def cmd_classify(a):
    models, man = load_checkpoint(a.model)
    side = a.side or man["config"]["side"]
    pc = PipelineConfig(side=side)
    v = read_volume(a.input)
    work = resample(v, pc.score_spacing, "linear")
    heart = resample_like(read_mask(a.heart), work, "nearest")
    heart = BinaryMask(heart.data != 0, work.spacing, work.origin)
    slices = heart_slices(work, heart, side)
    flags = classify_slices(models["classifier"], slices)
    _write_json(a.out, {str(s.slice_index): f for s, f in zip(slices, flags)})
    print(f"{sum(flags)} of {len(flags)} slices flagged")


def cmd_decompose(a):
    gan, _ = load_checkpoint(a.model)
    classifier = load_checkpoint(a.classifier)[0]["classifier"] if a.classifier else None
    cfg = PipelineConfig(use_heart_seg=False, use_slice_classifier=classifier is not None, side=a.side,
                         map_floor_hu=a.map_floor, seed=a.seed or 0)
    v = read_volume(a.input)
    roi = read_mask(a.heart)
    _, flags, cmap, _, processed = process_scan(v, cfg, Models.from_modules(gan["g_r"], classifier), roi=roi)
    write_volume(a.out, Volume(cmap.astype(np.float32), v.spacing, v.origin), dtype="float32")
    print(f"decomposed {len(processed)} slices")


def cmd_score(a):
    v = read_volume(a.image)
    cmap = read_volume(a.map).data if a.map else None
    roi = read_mask(a.roi) if a.roi else None
    labels = read_volume(a.labels).data if a.labels else None
    rec = score_scan(v.data, v.spacing, cmap, roi=roi, labels=labels)
    _write_json(a.out, rec.to_dict())
    print(json.dumps({k: rec.to_dict()[k] for k in ("pseudo_mass", "adjusted_agatston", "risk_category")}))


# --------------------------------------------------------------- statistics


def cmd_evaluate(a):
    table = PairTable.read_csv(a.pairs)
    rep = _clean(evaluate_pairs(table, a.plots))
    _write_json(a.out, rep)
    print(f"evaluated {len(table.score_types())} score types")


def cmd_report(a):
    man = RunManifest.read(a.manifest)
    reference = None
    if a.truth:
        reference = {k: v["positive"] if isinstance(v, dict) else bool(v)
                     for k, v in json.loads(Path(a.truth).read_text()).items()}
    report(man, a.out, reference=reference)
    print(f"report written to {a.out}")


def desk_checkpoints(cfg: PipelineConfig):
    """Fill missing checkpoint paths with cached desk-scale models, training them if needed."""
    from . import experiments

    if cfg.use_heart_seg and not cfg.heartseg_checkpoint:
        cfg.heartseg_checkpoint = str(experiments.heartseg_checkpoint())
    if cfg.use_slice_classifier and not cfg.classifier_checkpoint:
        cfg.classifier_checkpoint = str(experiments.classifier_checkpoint())
    if not cfg.cyclegan_checkpoint:
        cfg.cyclegan_checkpoint = str(experiments.cyclegan_checkpoint())
    return cfg


def cmd_pipeline(a):
    cfg = _load_cfg(PipelineConfig, a.config, a.seed)
    if a.desk:
        cfg = desk_checkpoints(cfg)
    seed_everything(cfg.seed)
    man = run_pipeline(cfg, _read_scans(a.scans), a.out)
    print(f"scored {len(man.scans) - len(man.errors)} scans, {len(man.errors)} failed")
    if a.report:
        truth = Path(a.scans).parent / "truth.json"
        reference = None
        if truth.exists():
            reference = {k: v["positive"] for k, v in json.loads(truth.read_text()).items()}
        report(man, Path(a.out) / "report", reference=reference)
    return 1 if man.errors and not man.records() else 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="cacgan", description="Threshold-free coronary calcium scoring")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None)
        sp.set_defaults(fn=fn)
        return sp

    ph = sub.add_parser("phantom", help="synthetic phantom data")
    phs = ph.add_subparsers(dest="action", required=True)
    g = phs.add_parser("generate", help="scan pairs with truth sidecars")
    g.add_argument("--spec", help="PhantomSpec JSON; random anatomy per pair when omitted")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-lesions", type=int, default=1)
    g.add_argument("--max-lesions", type=int, default=4)
    g.add_argument("--motion-jitter", type=float, default=0.4)
    g.add_argument("--shift-jitter", type=float, default=0.5, help="mm")
    g.set_defaults(fn=cmd_phantom_generate)
    s = phs.add_parser("slices", help="training slices with visible-CAC flags")
    s.add_argument("--out", required=True)
    s.add_argument("--phantoms", type=int, default=60)
    s.add_argument("--side", type=int, default=72)
    s.add_argument("--max-lesions", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_phantom_slices)

    for name, fn, what in (("train-heartseg", cmd_train_heartseg, "scans.json with image (and heart) volumes"),
                           ("train-classifier", cmd_train_classifier, "slice manifest"),
                           ("train-cyclegan", cmd_train_cyclegan, "slice manifest")):
        sp = add(name, fn, f"train from a {what}")
        sp.add_argument("--config", help="JSON with config overrides")
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)

    sp = add("segment", cmd_segment, "heart mask for one volume")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)

    sp = add("classify", cmd_classify, "per-slice CAC flags")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--heart", required=True)
    sp.add_argument("--side", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = add("decompose", cmd_decompose, "CAC map for one volume")
    sp.add_argument("--model", required=True, help="CycleGAN checkpoint")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--heart", required=True, help="region of interest mask")
    sp.add_argument("--classifier", help="optional slice classifier checkpoint")
    sp.add_argument("--side", type=int, default=224)
    sp.add_argument("--map-floor", type=float, default=0.0, help="HU")
    sp.add_argument("--out", required=True)

    sp = add("score", cmd_score, "ScoreRecord for a map and image")
    sp.add_argument("--map")
    sp.add_argument("--image", required=True)
    sp.add_argument("--roi")
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "statistics from a pairs CSV")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plots")

    sp = add("report", cmd_report, "report bundle from a run manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--truth", help="JSON of subject/scan -> CAC present")
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "score a list of scans")
    sp.add_argument("--config", help="PipelineConfig JSON")
    sp.add_argument("--scans", required=True, help="JSON list of {subject, scan, image, labels}")
    sp.add_argument("--out", required=True)
    sp.add_argument("--desk", action="store_true", help="use cached desk-scale models for missing checkpoints")
    sp.add_argument("--report", action="store_true")
    return p


def main(argv=None):
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(a, "seed", None) is not None:
        seed_everything(a.seed)
    return a.fn(a) or 0


if __name__ == "__main__":
    sys.exit(main())
