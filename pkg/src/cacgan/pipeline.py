"""End-to-end scoring pipeline, run manifests and reproducibility reports."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .calgan import predict_maps
from .cacslice import classify_slices
from .checkpoint import config_hash, load_checkpoint
from .heartseg import HeartSegConfig, segment_heart
from .scoring import ScoreRecord, mask_cac_map, risk_category, score_scan
from .stats import (
    PairRow, PairTable, bland_altman, detection_metrics, icc_absolute_agreement, reproducibility,
    summarize_pairs, weighted_kappa,
)
from .volume import (
    HU_PER_UNIT, SCORE_SPACING, BinaryMask, Volume, center_of_mass, heart_slice_range,
    normalize_slice, paste2d, read_volume, relative_position, resample, resample_like,
    write_volume,
)

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    use_heart_seg: bool = True
    use_slice_classifier: bool = True
    heartseg_checkpoint: str | None = None
    classifier_checkpoint: str | None = None
    cyclegan_checkpoint: str | None = None
    score_spacing: tuple = SCORE_SPACING
    side: int = 224
    fov_mm: tuple = (64.0, 64.0)  # in-plane box used as region of interest without heart segmentation
    mask_limit_hu: float = -10.0
    map_floor_hu: float = 0.0
    attenuation: str = "map"
    connectivity: int = 26
    map_min_voxels: int = 1
    clinical_min_voxels: int = 3
    seed: int = 0

    def __post_init__(self):
        self.score_spacing = tuple(float(s) for s in self.score_spacing)
        self.fov_mm = tuple(float(s) for s in self.fov_mm)

    def check(self):
        needed = [("heartseg_checkpoint", self.use_heart_seg), ("classifier_checkpoint", self.use_slice_classifier),
                  ("cyclegan_checkpoint", True)]
        for name, on in needed:
            path = getattr(self, name)
            if on and (path is None or not (Path(path) / "manifest.json").exists()):
                raise FileNotFoundError(f"{name} missing: {path}")

    @classmethod
    def from_json(cls, path):
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class ScanInput:
    subject: str
    scan: str
    image: str
    labels: str | None = None

    @property
    def key(self):
        return f"{self.subject}/{self.scan}"


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    scans: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    started: float = 0.0
    finished: float = 0.0

    def records(self):
        return {f"{s['subject']}/{s['scan']}": ScoreRecord.from_dict(s["record"]) for s in self.scans if s.get("record")}

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


class Models:
    """Checkpointed networks for the enabled stages, loaded once per run."""

    def __init__(self, cfg: PipelineConfig):
        cfg.check()
        self.heartseg = self.seg_cfg = self.classifier = None
        if cfg.use_heart_seg:
            m, man = load_checkpoint(cfg.heartseg_checkpoint)
            self.heartseg = m["heartseg"]
            self.seg_cfg = HeartSegConfig(**{k: v for k, v in man["config"].items()})
        if cfg.use_slice_classifier:
            m, _ = load_checkpoint(cfg.classifier_checkpoint)
            self.classifier = m["classifier"]
        m, _ = load_checkpoint(cfg.cyclegan_checkpoint)
        self.g_r = m["g_r"]

    @classmethod
    def from_modules(cls, g_r, classifier=None, heartseg=None, seg_cfg=None):
        self = cls.__new__(cls)
        self.g_r, self.classifier, self.heartseg, self.seg_cfg = g_r, classifier, heartseg, seg_cfg
        return self


def fov_mask(v: Volume, fov_mm):
    """Standardized field of view: an in-plane box around the volume centre, all slices."""
    m = np.zeros(v.shape, dtype=bool)
    c = [(n - 1) / 2 for n in v.shape[:2]]
    half = [f / s / 2 for f, s in zip(fov_mm, v.spacing[:2])]
    lo = [max(int(round(ci - h)), 0) for ci, h in zip(c, half)]
    hi = [min(int(round(ci + h)), n) for ci, h, n in zip(c, half, v.shape[:2])]
    m[lo[0]:hi[0], lo[1]:hi[1], :] = True
    return BinaryMask(m, v.spacing, v.origin)


def region_of_interest(v: Volume, cfg: PipelineConfig, models: Models) -> BinaryMask:
    if not cfg.use_heart_seg:
        return fov_mask(v, cfg.fov_mm)
    seg_v = resample(v, models.seg_cfg.spacing, "linear")
    mask = segment_heart(models.heartseg, seg_v, models.seg_cfg)
    return BinaryMask(resample_like(mask, v, "nearest").data, v.spacing, v.origin)


def process_scan(v: Volume, cfg: PipelineConfig, models: Models, labels=None, roi: BinaryMask | None = None):
    """One scan through every stage. Returns (roi, flags, map_hu, record, processed slice indices).

    A given ``roi`` (on the grid of ``v``) replaces the segmentation / field-of-view stage.
    """
    work = resample(v, cfg.score_spacing, "linear")
    if roi is None:
        roi = region_of_interest(work, cfg, models)
    else:
        roi = BinaryMask(resample_like(roi, work, "nearest").data != 0, work.spacing, work.origin)
    if not roi.data.any():
        raise ValueError("empty region of interest")
    center = center_of_mass(roi)
    z0, z1 = heart_slice_range(roi)
    slices = [normalize_slice(work, k, center, cfg.side, position=relative_position(k, z0, z1))
              for k in range(z0, z1 + 1)]
    flags = classify_slices(models.classifier, slices) if cfg.use_slice_classifier else [True] * len(slices)
    chosen = [s for s, f in zip(slices, flags) if f]
    cmap = np.zeros(work.shape, dtype=np.float64)
    if chosen:
        maps = predict_maps(models.g_r, chosen).astype(np.float64) * HU_PER_UNIT
        for s, m in zip(chosen, maps):
            paste2d(cmap[:, :, s.slice_index], m, center)
    cmap = mask_cac_map(cmap, work.data, cfg.mask_limit_hu)
    cmap[~roi.data] = 0.0
    cmap[cmap <= cfg.map_floor_hu] = 0.0
    # back to the acquisition grid before scoring
    map_v = work.with_data(cmap)
    if not v.same_grid(work):
        map_v = resample_like(map_v, v, "linear")
        roi = BinaryMask(resample_like(roi, v, "nearest").data, v.spacing, v.origin)
    rec = score_scan(v.data, v.spacing, map_v.data, roi=roi, labels=labels, attenuation=cfg.attenuation,
                     map_min_voxels=cfg.map_min_voxels, clinical_min_voxels=cfg.clinical_min_voxels,
                     connectivity=cfg.connectivity)
    flag_map = {int(s.slice_index): bool(f) for s, f in zip(slices, flags)}
    return roi, flag_map, map_v.data, rec, [int(s.slice_index) for s in chosen]


def run_pipeline(cfg: PipelineConfig, scans, out_dir, models: Models | None = None) -> RunManifest:
    """Score every scan, writing per-scan outputs under ``out_dir``.

    A failing scan is logged in the manifest's error list and the run goes on.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = models or Models(cfg)
    man = RunManifest(asdict(cfg), config_hash(cfg), started=time.time())
    for sc in scans:
        entry = {"subject": sc.subject, "scan": sc.scan, "image": str(sc.image)}
        try:
            v = read_volume(sc.image)
            labels = read_volume(sc.labels).data if sc.labels else None
            roi, flags, cmap, rec, processed = process_scan(v, cfg, models, labels)
            stem = out / f"{sc.subject}_{sc.scan}"
            write_volume(f"{stem}_roi.vol", Volume(roi.data.astype(np.int16), roi.spacing, roi.origin))
            write_volume(f"{stem}_map.vol", Volume(cmap.astype(np.float32), v.spacing, v.origin), dtype="float32")
            Path(f"{stem}_flags.json").write_text(json.dumps({str(k): f for k, f in flags.items()}, indent=1))
            Path(f"{stem}_record.json").write_text(json.dumps(rec.to_dict(), indent=1, sort_keys=True))
            entry.update(record=rec.to_dict(), processed_slices=processed, outputs={
                "roi": f"{stem.name}_roi.vol", "map": f"{stem.name}_map.vol",
                "flags": f"{stem.name}_flags.json", "record": f"{stem.name}_record.json",
            })
        except Exception as exc:  # noqa: BLE001 - isolate failures per scan
            log.warning("scan %s failed: %s", sc.key, exc)
            entry["error"] = f"{type(exc).__name__}: {exc}"
            man.errors.append({"scan": sc.key, "error": entry["error"]})
        man.scans.append(entry)
    man.finished = time.time()
    man.write(out / "manifest.json")
    return man


# ------------------------------------------------------------------ reports


def pairs_from_manifest(man: RunManifest):
    """(subject, scan_a, scan_b) for every subject with exactly two scored scans."""
    by_subject = {}
    for s in man.scans:
        if s.get("record"):
            by_subject.setdefault(s["subject"], []).append(s["scan"])
    return [(subj, *sorted(scans)) for subj, scans in sorted(by_subject.items()) if len(scans) == 2]


def agatston_scale(records):
    """Linear factor matching the mean adjusted score to the mean conventional score."""
    adj = np.mean([r.adjusted_agatston for r in records]) if records else 0.0
    conv = np.mean([r.conventional_agatston for r in records]) if records else 0.0
    return float(conv / adj) if adj > 0 else 1.0


def pair_table(man: RunManifest, pairs, scale=None):
    recs = man.records()
    for subj, a, b in pairs:
        for k in (f"{subj}/{a}", f"{subj}/{b}"):
            if k not in recs:
                raise ValueError(f"pair references unknown scan {k}")
    if scale is None:
        scale = agatston_scale(list(recs.values()))
    rows = []
    for subj, a, b in pairs:
        r1, r2 = recs[f"{subj}/{a}"], recs[f"{subj}/{b}"]
        s1, s2 = r1.adjusted_agatston * scale, r2.adjusted_agatston * scale
        rows += [
            PairRow(subj, "proposed_pseudo_mass", r1.pseudo_mass, r2.pseudo_mass),
            PairRow(subj, "baseline_pseudo_mass", r1.baseline_pseudo_mass, r2.baseline_pseudo_mass),
            PairRow(subj, "proposed_agatston", s1, s2, risk_category(s1), risk_category(s2)),
            PairRow(subj, "baseline_agatston", r1.conventional_agatston, r2.conventional_agatston,
                    r1.baseline_risk_category, r2.baseline_risk_category),
        ]
    return PairTable(rows), scale


def _clean(x):
    """Round floats so the JSON is stable and readable."""
    if isinstance(x, float):
        return None if not np.isfinite(x) else round(x, 10)
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def plot_bland_altman(rows, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    a = np.array([r.scan1 for r in rows])
    b = np.array([r.scan2 for r in rows])
    ba = bland_altman(a, b)
    t = ba.table()
    np.savetxt(Path(path).with_suffix(".csv"), t, delimiter=",", header="mean,diff,bias,lower,upper", comments="")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(t[:, 0], t[:, 1], s=10)
    ax.plot(t[:, 0], t[:, 2], "k-")
    ax.plot(t[:, 0], t[:, 3], "k--")
    ax.plot(t[:, 0], t[:, 4], "k--")
    ax.set_xlabel("mean of scans")
    ax.set_ylabel("scan 1 - scan 2")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def evaluate_pairs(table: PairTable, plots_dir=None):
    """Per score type statistics, plus Bland-Altman CSV and PNG files."""
    out = {}
    for st in table.score_types():
        rows = table.of_type(st)
        out[st] = summarize_pairs(rows)
        if plots_dir and len(rows) >= 3:
            Path(plots_dir).mkdir(parents=True, exist_ok=True)
            plot_bland_altman(rows, Path(plots_dir) / f"bland_altman_{st}.png", st)
    return out


def concordant_positive(table: PairTable, types=("proposed_pseudo_mass", "baseline_pseudo_mass")):
    """Subjects where every listed method finds calcium in both scans."""
    keep = None
    for st in types:
        pos = {r.subject for r in table.of_type(st) if r.scan1 > 0 and r.scan2 > 0}
        keep = pos if keep is None else keep & pos
    return sorted(keep or [])


def compare_on_subjects(table: PairTable, subjects, types=("proposed_pseudo_mass", "baseline_pseudo_mass")):
    """Median and mean interscan difference plus ICC per method on a shared subject set."""
    subjects = set(subjects)
    out = {"n_pairs": len(subjects)}
    for st in types:
        rows = [r for r in table.of_type(st) if r.subject in subjects]
        a = [r.scan1 for r in rows]
        b = [r.scan2 for r in rows]
        rep = reproducibility(a, b)
        icc = icc_absolute_agreement(a, b).icc if len(rows) >= 3 else None
        out[st] = {"delta_r_median": rep["delta_r_all_median"], "delta_r_mean": rep["delta_r_all_mean"], "icc": icc}
    return out


def detection_section(man: RunManifest, reference=None):
    recs = man.records()
    keys = sorted(recs)
    pred = {"proposed": [recs[k].pseudo_mass > 0 for k in keys],
            "baseline": [recs[k].baseline_pseudo_mass > 0 for k in keys]}
    out = {"n_scans": len(keys)}
    for name, p in pred.items():
        sec = {"n_positive": int(sum(p))}
        if reference is not None and keys:
            ref = [bool(reference[k]) for k in keys]
            sec.update(asdict(detection_metrics(p, ref)))
        out[name] = sec
    return out


def report(man: RunManifest, out_dir, pairs=None, reference=None):
    """Write report.json, report.md and Bland-Altman files; returns the report dict.

    ``reference`` optionally maps ``subject/scan`` to the true CAC presence.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = pairs_from_manifest(man) if pairs is None else pairs
    rep = {"config_hash": man.config_hash, "errors": man.errors, "detection": detection_section(man, reference)}
    if pairs:
        table, scale = pair_table(man, pairs)
        table.write_csv(out / "pairs.csv")
        rep["agatston_scale"] = scale
        rep["pairs"] = evaluate_pairs(table, out / "plots")
        subjects = concordant_positive(table)
        rep["concordant_positive"] = compare_on_subjects(table, subjects)
        cats = {st: [(r.category1, r.category2) for r in table.of_type(st)]
                for st in ("proposed_agatston", "baseline_agatston")}
        rep["risk_kappa"] = {st: asdict(weighted_kappa([c[0] for c in v], [c[1] for c in v])) for st, v in cats.items()}
    rep = _clean(rep)
    (out / "report.json").write_text(json.dumps(rep, indent=1, sort_keys=True))
    (out / "report.md").write_text(render_markdown(rep))
    return rep


def _fmt(x):
    return "n/a" if x is None else (f"{x:.3f}" if isinstance(x, float) else str(x))


def render_markdown(rep):
    lines = ["# CAC scoring report", "", "## Detection", "",
             "| method | positive scans | accuracy | sensitivity | FPR | F1 |", "|---|---|---|---|---|---|"]
    for name in ("proposed", "baseline"):
        d = rep["detection"][name]
        lines.append(f"| {name} | {d['n_positive']} | {_fmt(d.get('accuracy'))} | {_fmt(d.get('sensitivity'))} "
                     f"| {_fmt(d.get('fpr'))} | {_fmt(d.get('f1'))} |")
    if "pairs" in rep:
        lines += ["", "## Interscan reproducibility", "",
                  f"Adjusted Agatston scale factor: {_fmt(rep['agatston_scale'])}", "",
                  "| score | pairs | dR all (mean) | dR pos (mean) | ICC | ICC 95% CI | kappa |",
                  "|---|---|---|---|---|---|---|"]
        for st, s in rep["pairs"].items():
            icc = s.get("icc", {})
            kap = s.get("kappa", {}).get("kappa")
            lines.append(f"| {st} | {s['n_pairs']} | {_fmt(s['delta_r_all_mean'])} | {_fmt(s['delta_r_pos_mean'])} "
                         f"| {_fmt(icc.get('icc'))} | {_fmt(icc.get('ci_low'))} to {_fmt(icc.get('ci_high'))} | {_fmt(kap)} |")
        cp = rep["concordant_positive"]
        lines += ["", f"## Concordant positive pairs ({cp['n_pairs']})", "",
                  "| score | dR median | dR mean | ICC |", "|---|---|---|---|"]
        for st in ("proposed_pseudo_mass", "baseline_pseudo_mass"):
            s = cp[st]
            lines.append(f"| {st} | {_fmt(s['delta_r_median'])} | {_fmt(s['delta_r_mean'])} | {_fmt(s['icc'])} |")
    if rep["errors"]:
        lines += ["", "## Failed scans", ""] + [f"- {e['scan']}: {e['error']}" for e in rep["errors"]]
    return "\n".join(lines) + "\n"
