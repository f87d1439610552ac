"""Synthetic paired chest CT phantoms with voxel-exact coronary calcium truth.

Anatomy is a handful of ellipsoids (body, lungs, pericardial fat, heart) plus a
rib ring and a vertebra. Lesions sit on three coronary paths; each lesion field
is blurred with its artery's motion kernel and renormalised, so the truth map
always carries exactly the planted mass.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Volume, read_volume, write_volume

ARTERIES = ("LAD", "RCA", "LCX")
ARTERY_CODE = {"LAD": 1, "RCA": 2, "LCX": 3}
CODE_ARTERY = {v: k for k, v in ARTERY_CODE.items()}

TISSUE_HU = {
    "air": -1000.0,
    "lung": -800.0,
    "soft": 40.0,
    "fat": -90.0,
    "heart": 30.0,
    "artery": 40.0,
    "bone": 700.0,
}


class PhantomError(ValueError):
    pass


@dataclass
class Ellipsoid:
    center_mm: tuple
    radii_mm: tuple

    def validate(self, name):
        if len(self.radii_mm) != 3 or min(self.radii_mm) <= 0:
            raise PhantomError(f"degenerate ellipsoid {name}: radii {self.radii_mm}")

    def inside(self, coords, scale=1.0, pad=0.0):
        r = [s * scale + pad for s in self.radii_mm]
        return sum(((coords[i] - self.center_mm[i]) / r[i]) ** 2 for i in range(3)) <= 1.0


@dataclass
class ArterySpec:
    name: str
    path_mm: list
    radius_mm: float = 1.2

    def point(self, t):
        """Point at arc-length fraction ``t`` along the polyline."""
        pts = np.asarray(self.path_mm, dtype=np.float64)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = float(np.clip(t, 0.0, 1.0)) * cum[-1]
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        frac = 0.0 if seg[k] == 0 else (s - cum[k]) / seg[k]
        return tuple(pts[k] + frac * (pts[k + 1] - pts[k]))


@dataclass
class LesionSpec:
    artery: str
    t: float
    radius_mm: float
    peak_hu: float
    shape: str = "sphere"  # "sphere": parabolic profile; "cube": uniform voxel block
    size_vox: int = 2


@dataclass
class PhantomSpec:
    dims: tuple = (96, 96, 48)
    spacing: tuple = (1.0, 1.0, 1.5)
    body: Ellipsoid = field(default_factory=lambda: Ellipsoid((48.0, 48.0, 36.0), (46.0, 38.0, 1e4)))
    lungs: list = field(default_factory=lambda: [
        Ellipsoid((25.0, 46.0, 36.0), (15.0, 25.0, 60.0)),
        Ellipsoid((71.0, 46.0, 36.0), (15.0, 25.0, 60.0)),
    ])
    heart: Ellipsoid = field(default_factory=lambda: Ellipsoid((50.0, 44.0, 36.0), (19.0, 16.0, 24.0)))
    fat_mm: float = 2.5
    rib_ring: tuple = (0.86, 0.93)
    spine: tuple = (48.0, 74.0, 7.0)  # centre x, centre y, radius (mm)
    arteries: list = field(default_factory=list)
    lesions: list = field(default_factory=list)
    motion_sigma_mm: dict = field(default_factory=lambda: {"LAD": 0.5, "RCA": 1.25, "LCX": 0.7})
    motion_z_fraction: float = 0.5
    motion_jitter: float = 0.0
    shift_jitter_mm: float = 0.0
    noise_sigma_hu: float = 10.0
    flag_threshold_hu: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.body, dict):
            self.body = Ellipsoid(**self.body)
        if isinstance(self.heart, dict):
            self.heart = Ellipsoid(**self.heart)
        self.lungs = [Ellipsoid(**e) if isinstance(e, dict) else e for e in self.lungs]
        self.arteries = [ArterySpec(**a) if isinstance(a, dict) else a for a in self.arteries]
        self.lesions = [LesionSpec(**l) if isinstance(l, dict) else l for l in self.lesions]
        if not self.arteries:
            self.arteries = default_arteries(self.heart)
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def artery(self, name):
        for a in self.arteries:
            if a.name == name:
                return a
        raise PhantomError(f"unknown artery {name!r}")

    def lesion_center(self, lesion):
        return self.artery(lesion.artery).point(lesion.t)

    def validate(self):
        if min(self.spacing) <= 0 or min(self.dims) < 1:
            raise PhantomError("invalid grid")
        for name, e in [("body", self.body), ("heart", self.heart)] + [("lung", l) for l in self.lungs]:
            e.validate(name)
        if min(self.motion_sigma_mm.values(), default=0.0) < 0:
            raise PhantomError("motion sigma must be >= 0")
        extent = np.asarray(self.dims) * np.asarray(self.spacing)
        for i, les in enumerate(self.lesions):
            if les.radius_mm <= 0:
                raise PhantomError(f"lesion {i}: radius must be positive")
            c = np.asarray(self.lesion_center(les))
            if np.any(c < 0) or np.any(c >= extent):
                raise PhantomError(f"lesion {i} centre {tuple(c)} outside grid extent {tuple(extent)}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_arteries(heart: Ellipsoid, depth=0.78, n=9):
    """Three coronary paths running from base to apex just under the heart surface."""
    c = np.asarray(heart.center_mm, dtype=np.float64)
    r = np.asarray(heart.radii_mm, dtype=np.float64) * depth
    # azimuth (start, end) in the axial plane, polar sweep from base to apex
    layout = {"LAD": (-1.75, -1.35), "RCA": (3.3, 3.0), "LCX": (-0.35, 0.35)}
    out = []
    for name in ARTERIES:
        a0, a1 = layout[name]
        pts = []
        for t in np.linspace(0.0, 1.0, n):
            theta = a0 + (a1 - a0) * t
            phi = 0.8 - 1.6 * t
            p = c + r * np.array([math.cos(theta) * math.cos(phi), math.sin(theta) * math.cos(phi), math.sin(phi)])
            pts.append(tuple(float(x) for x in p))
        out.append(ArterySpec(name, pts, 1.2))
    return out


@dataclass
class PhantomTruth:
    cac_map: np.ndarray  # HU attributable to calcium, post-blur, pre-noise
    lesion_ids: np.ndarray  # 1-based lesion index where the map exceeds the flag threshold
    artery_labels: np.ndarray  # ARTERY_CODE per lesion voxel
    heart_mask: BinaryMask
    slice_flags: np.ndarray
    lesion_masses: list  # true mass per lesion, HU*mm^3
    lesion_arteries: list
    background: np.ndarray  # noiseless anatomy without calcium
    spacing: tuple
    motion_sigma_mm: dict = field(default_factory=dict)
    flag_threshold_hu: float = 10.0

    @property
    def total_mass(self):
        return float(sum(self.lesion_masses))

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def rendered_mass(self, lesion_id=None):
        if lesion_id is None:
            return float(self.cac_map.sum(dtype=np.float64) * self.voxel_volume)
        return float(self.cac_map[self.lesion_ids == lesion_id].sum(dtype=np.float64) * self.voxel_volume)


def _coords(spec):
    axes = [(np.arange(n) + 0.0) * s for n, s in zip(spec.dims, spec.spacing)]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def render_anatomy(spec: PhantomSpec):
    """Noiseless background HU and the truth heart mask."""
    X = _coords(spec)
    bg = np.full(spec.dims, TISSUE_HU["air"], dtype=np.float32)
    body = spec.body.inside(X)
    bg[np.broadcast_to(body, spec.dims)] = TISSUE_HU["soft"]
    lo, hi = spec.rib_ring
    ring = np.broadcast_to(spec.body.inside(X, scale=hi) & ~spec.body.inside(X, scale=lo), spec.dims)
    bg[ring] = TISSUE_HU["bone"]
    for lung in spec.lungs:
        bg[np.broadcast_to(lung.inside(X), spec.dims) & ~ring] = TISSUE_HU["lung"]
    sx, sy, sr = spec.spine
    spine = ((X[0] - sx) ** 2 + (X[1] - sy) ** 2 <= sr ** 2)
    bg[np.broadcast_to(spine, spec.dims)] = TISSUE_HU["bone"]
    bg[np.broadcast_to(spec.heart.inside(X, pad=spec.fat_mm), spec.dims)] = TISSUE_HU["fat"]
    heart = np.broadcast_to(spec.heart.inside(X), spec.dims)
    bg[heart] = TISSUE_HU["heart"]
    for art in spec.arteries:
        tube = _tube(spec, art)
        bg[tube & heart] = TISSUE_HU["artery"]
    return bg, BinaryMask(heart.copy(), spec.spacing)


def _tube(spec, art):
    X = _coords(spec)
    pts = np.asarray(art.path_mm)
    d2 = np.full(spec.dims, np.inf, dtype=np.float32)
    for p, q in zip(pts[:-1], pts[1:]):
        v = q - p
        L2 = float(v @ v) or 1.0
        t = sum((X[i] - p[i]) * v[i] for i in range(3)) / L2
        t = np.clip(t, 0.0, 1.0)
        dist2 = sum((X[i] - (p[i] + t * v[i])) ** 2 for i in range(3))
        np.minimum(d2, dist2, out=d2)
    return d2 <= art.radius_mm ** 2


def sphere_mass(radius_mm, peak_hu):
    """Integral of ``peak * (1 - r^2/R^2)`` over the ball of radius R."""
    return peak_hu * 8.0 * math.pi * radius_mm ** 3 / 15.0


def render_lesion(spec: PhantomSpec, lesion: LesionSpec, shift_mm=(0.0, 0.0, 0.0)):
    """Pre-blur attenuation field of one lesion and its true mass."""
    field_ = np.zeros(spec.dims, dtype=np.float64)
    c = np.asarray(spec.lesion_center(lesion)) + np.asarray(shift_mm)
    sp = np.asarray(spec.spacing)
    if lesion.shape == "cube":
        n = int(lesion.size_vox)
        start = np.floor(c / sp + 0.5).astype(int) - n // 2
        sl = tuple(slice(max(s, 0), min(s + n, d)) for s, d in zip(start, spec.dims))
        field_[sl] = lesion.peak_hu
        return field_, float(field_.sum() * spec.voxel_volume)
    R = lesion.radius_mm
    lo = np.maximum(np.floor((c - R) / sp - 1).astype(int), 0)
    hi = np.minimum(np.ceil((c + R) / sp + 2).astype(int), spec.dims)
    ss = 3  # supersampling per axis
    sub = [(np.arange(l, h)[:, None] + (np.arange(ss) + 0.5) / ss - 0.5).ravel() * sp[i]
           for i, (l, h) in enumerate(zip(lo, hi))]
    G = np.meshgrid(*sub, indexing="ij", sparse=True)
    r2 = sum((G[i] - c[i]) ** 2 for i in range(3)) / R ** 2
    val = lesion.peak_hu * np.clip(1.0 - r2, 0.0, None)
    shp = tuple(h - l for l, h in zip(lo, hi))
    val = val.reshape(shp[0], ss, shp[1], ss, shp[2], ss).mean(axis=(1, 3, 5))
    field_[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = val
    mass = sphere_mass(R, lesion.peak_hu)
    s = field_.sum() * spec.voxel_volume
    if s > 0:
        field_ *= mass / s
    return field_, mass


def motion_kernel_sigma(spec, sigma_mm):
    """Per-axis Gaussian sigma in voxels for an in-plane motion sigma in mm."""
    sx, sy, sz = spec.spacing
    return (sigma_mm / sx, sigma_mm / sy, spec.motion_z_fraction * sigma_mm / sz)


def blur_lesion(spec, field_, sigma_mm):
    if sigma_mm <= 0:
        return field_
    return ndimage.gaussian_filter(field_, motion_kernel_sigma(spec, sigma_mm), mode="constant", truncate=4.0)


def _render(spec: PhantomSpec, rng, sigma_scale=None, shift=None):
    spec.validate()
    bg, heart = render_anatomy(spec)
    cac = np.zeros(spec.dims, dtype=np.float64)
    fields, masses, arts = [], [], []
    sig = dict(spec.motion_sigma_mm)
    if sigma_scale is not None:
        sig = {k: v * sigma_scale.get(k, 1.0) for k, v in sig.items()}
    shift = (0.0, 0.0, 0.0) if shift is None else shift
    for i, les in enumerate(spec.lesions):
        f, mass = render_lesion(spec, les, shift)
        f = blur_lesion(spec, f, sig.get(les.artery, 0.0)) * heart.data
        s = f.sum() * spec.voxel_volume
        if s <= 0:
            raise PhantomError(f"lesion {i} falls outside the heart")
        f *= mass / s
        cac += f
        fields.append(f)
        masses.append(mass)
        arts.append(les.artery)
    ids = np.zeros(spec.dims, dtype=np.int16)
    labels = np.zeros(spec.dims, dtype=np.int16)
    if fields:
        stack = np.stack(fields)
        arg = stack.argmax(axis=0)
        vis = cac > spec.flag_threshold_hu
        ids[vis] = arg[vis] + 1
        codes = np.array([0] + [ARTERY_CODE[a] for a in arts], dtype=np.int16)
        labels = codes[ids]
    flags = (cac > spec.flag_threshold_hu).any(axis=(0, 1))
    noise = rng.normal(0.0, spec.noise_sigma_hu, spec.dims) if spec.noise_sigma_hu > 0 else 0.0
    img = np.rint(bg + cac + noise)
    img = np.clip(img, -1024, 3071).astype(np.int16)
    truth = PhantomTruth(
        cac_map=cac.astype(np.float32),
        lesion_ids=ids,
        artery_labels=labels,
        heart_mask=heart,
        slice_flags=flags,
        lesion_masses=masses,
        lesion_arteries=arts,
        background=bg,
        spacing=spec.spacing,
        motion_sigma_mm=sig,
        flag_threshold_hu=spec.flag_threshold_hu,
    )
    return Volume(img, spec.spacing), truth


def generate_phantom(spec: PhantomSpec):
    """Render one scan: anatomy + blurred calcium + Gaussian noise, seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    return _render(spec, rng)


def generate_pair(spec: PhantomSpec, pair_seed=0):
    """Two scans of the same anatomy with independent noise and jittered motion."""
    scans = []
    for k in range(2):
        rng = np.random.default_rng([spec.seed, pair_seed, k])
        j = spec.motion_jitter
        scale = {a: float(rng.uniform(1.0 - j, 1.0 + j)) for a in ARTERIES} if j > 0 else None
        p = spec.shift_jitter_mm
        shift = tuple(float(x) for x in rng.uniform(-p, p, 3)) if p > 0 else None
        scans.append(_render(spec, rng, scale, shift))
    return scans[0], scans[1]


def _block_reduce(arr, f, func, pad_mode):
    pads = [(0, (-n) % k) for n, k in zip(arr.shape, f)]
    a = np.pad(arr, pads, mode=pad_mode)
    sh = []
    for n, k in zip(a.shape, f):
        sh += [n // k, k]
    return func(a.reshape(sh), axis=(1, 3, 5))


def _block_up(arr, f, shape):
    out = arr
    for ax, k in enumerate(f):
        out = np.repeat(out, k, axis=ax)
    return out[: shape[0], : shape[1], : shape[2]]


def degrade(v: Volume, truth: PhantomTruth, downsample_factor=2):
    """Simulate partial volume by block-averaging then nearest upsampling."""
    f = downsample_factor
    f = (f, f, f) if np.isscalar(f) else tuple(f)
    if min(f) < 1:
        raise PhantomError("downsample factor must be >= 1")
    f = tuple(int(k) for k in f)
    if f == (1, 1, 1):
        return v, truth

    def smear(arr, pad_mode="edge"):
        return _block_up(_block_reduce(np.asarray(arr, dtype=np.float64), f, np.mean, pad_mode), f, v.shape)

    # zero padding keeps the calcium sum exact away from the upper borders
    cac = smear(truth.cac_map, "constant")
    ids_up = _block_up(_block_reduce(truth.lesion_ids, f, np.max, "constant"), f, v.shape)
    vis = cac > truth.flag_threshold_hu
    ids = np.where(vis, ids_up, 0).astype(np.int16)
    codes = np.array([0] + [ARTERY_CODE[a] for a in truth.lesion_arteries], dtype=np.int16)
    out = PhantomTruth(
        cac_map=cac.astype(np.float32),
        lesion_ids=ids,
        artery_labels=codes[ids],
        heart_mask=truth.heart_mask,
        slice_flags=vis.any(axis=(0, 1)),
        lesion_masses=list(truth.lesion_masses),
        lesion_arteries=list(truth.lesion_arteries),
        background=smear(truth.background).astype(np.float32),
        spacing=truth.spacing,
        motion_sigma_mm=dict(truth.motion_sigma_mm),
        flag_threshold_hu=truth.flag_threshold_hu,
    )
    return Volume(smear(v.data), v.spacing, v.origin), out


# ------------------------------------------------------------ random specs


def random_spec(seed, n_lesions=(0, 4), peak_hu=(200.0, 650.0), radius_mm=(1.3, 3.0),
                motion_scale=1.0, **overrides) -> PhantomSpec:
    """Draw anatomy and lesion jitter around the default phantom."""
    rng = np.random.default_rng([seed, 7919])
    base = PhantomSpec()
    hx, hy, hz = base.heart.center_mm
    hc = (hx + rng.uniform(-4, 4), hy + rng.uniform(-3, 3), hz + rng.uniform(-3, 3))
    hr = tuple(r * rng.uniform(0.87, 1.13) for r in base.heart.radii_mm)
    heart = Ellipsoid(hc, hr)
    bscale = rng.uniform(0.95, 1.05)
    body = Ellipsoid(base.body.center_mm, (base.body.radii_mm[0] * bscale, base.body.radii_mm[1] * bscale, 1e4))
    lungs = [Ellipsoid(l.center_mm, tuple(r * rng.uniform(0.92, 1.08) for r in l.radii_mm)) for l in base.lungs]
    arteries = default_arteries(heart)
    lo, hi = n_lesions
    k = int(rng.integers(lo, hi + 1))
    lesions = []
    for _ in range(k):
        art = ARTERIES[int(rng.integers(0, 3))]
        lesions.append(LesionSpec(
            artery=art,
            t=float(rng.uniform(0.12, 0.88)),
            radius_mm=float(rng.uniform(*radius_mm)),
            peak_hu=float(rng.uniform(*peak_hu)),
        ))
    motion = {a: s * motion_scale * float(rng.uniform(0.8, 1.2)) for a, s in base.motion_sigma_mm.items()}
    kw = dict(body=body, lungs=lungs, heart=heart, arteries=arteries, lesions=lesions,
              motion_sigma_mm=motion, seed=int(seed))
    kw.update(overrides)
    return PhantomSpec(**kw)


# ------------------------------------------------------------------- I/O


def save_phantom(out_dir, name, v: Volume, truth: PhantomTruth):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / f"{name}.vol", v)
    write_volume(out / f"{name}_cacmap.vol", Volume(truth.cac_map, truth.spacing), dtype="float32")
    write_volume(out / f"{name}_heart.vol", Volume(truth.heart_mask.data.astype(np.int16), truth.spacing))
    write_volume(out / f"{name}_lesions.vol", Volume(truth.lesion_ids, truth.spacing))
    write_volume(out / f"{name}_labels.vol", Volume(truth.artery_labels, truth.spacing))
    meta = {
        "lesion_masses": truth.lesion_masses,
        "lesion_arteries": truth.lesion_arteries,
        "total_mass": truth.total_mass,
        "slice_flags": [bool(f) for f in truth.slice_flags],
        "motion_sigma_mm": truth.motion_sigma_mm,
        "flag_threshold_hu": truth.flag_threshold_hu,
    }
    (out / f"{name}_truth.json").write_text(json.dumps(meta, indent=1))
    return out / f"{name}.vol.json"


def load_truth(out_dir, name) -> PhantomTruth:
    out = Path(out_dir)
    meta = json.loads((out / f"{name}_truth.json").read_text())
    cac = read_volume(out / f"{name}_cacmap.vol")
    heart = read_volume(out / f"{name}_heart.vol")
    return PhantomTruth(
        cac_map=cac.data,
        lesion_ids=read_volume(out / f"{name}_lesions.vol").data,
        artery_labels=read_volume(out / f"{name}_labels.vol").data,
        heart_mask=BinaryMask(heart.data != 0, heart.spacing, heart.origin),
        slice_flags=np.asarray(meta["slice_flags"], dtype=bool),
        lesion_masses=meta["lesion_masses"],
        lesion_arteries=meta["lesion_arteries"],
        background=np.zeros(cac.shape, dtype=np.float32),
        spacing=cac.spacing,
        motion_sigma_mm=meta["motion_sigma_mm"],
        flag_threshold_hu=meta["flag_threshold_hu"],
    )


def write_lesion_table(path, truth_pair):
    t1, t2 = truth_pair
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lesion_id", "artery", "true_mass", "scan1_rendered_mass", "scan2_rendered_mass"])
        for i, (m, a) in enumerate(zip(t1.lesion_masses, t1.lesion_arteries), start=1):
            w.writerow([i, a, f"{m:.6f}", f"{t1.rendered_mass(i):.6f}", f"{t2.rendered_mass(i):.6f}"])
