"""Calcium quantification: CAC-map noise masking, lesion extraction, pseudo-mass,
adjusted and conventional Agatston scores, risk categories.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .phantom import CODE_ARTERY
from .volume import Volume

ARTERY_NAMES = ("LAD", "RCA", "LCX")
CLINICAL_THRESHOLD_HU = 130.0
RISK_CATEGORIES = ("I", "II", "III", "IV")


def _arr(x):
    return x.data if isinstance(x, Volume) else np.asarray(x)


def _structure(connectivity):
    rank = {6: 1, 18: 2, 26: 3}
    if connectivity not in rank:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, rank[connectivity])


def adjusted_weight(max_hu):
    """Density factor for map-based lesions: <200, [200,300), [300,400), >=400 HU."""
    if max_hu < 200:
        return 1
    if max_hu < 300:
        return 2
    if max_hu < 400:
        return 3
    return 4


def clinical_weight(max_hu):
    if max_hu < CLINICAL_THRESHOLD_HU:
        return 0
    return adjusted_weight(max_hu)


@dataclass
class Lesion:
    voxels: np.ndarray  # (n, 3) integer indices
    values: np.ndarray  # attenuation in HU at each voxel
    artery: str | None = None

    def slices(self):
        """Axial slice index -> (voxel count, max HU) for this lesion's cross-sections."""
        out = {}
        for z in np.unique(self.voxels[:, 2]):
            sel = self.voxels[:, 2] == z
            out[int(z)] = (int(sel.sum()), float(self.values[sel].max()))
        return out


@dataclass
class LesionSet:
    lesions: list
    spacing: tuple

    def __len__(self):
        return len(self.lesions)

    def __iter__(self):
        return iter(self.lesions)

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    @property
    def pixel_area(self):
        return float(self.spacing[0] * self.spacing[1])

    def for_artery(self, name):
        return LesionSet([l for l in self.lesions if l.artery == name], self.spacing)

    def mask(self, shape):
        m = np.zeros(shape, dtype=bool)
        for l in self.lesions:
            m[tuple(l.voxels.T)] = True
        return m


def mask_cac_map(cac_map_hu, input_hu, limit_hu=-10.0):
    """Zero map voxels whose removal would leave the image below ``limit_hu``."""
    m, x = _arr(cac_map_hu), _arr(input_hu)
    if m.shape != x.shape:
        raise ValueError(f"map {m.shape} and image {x.shape} are not on the same grid")
    out = np.where(x.astype(np.float64) - m < limit_hu, 0.0, m)
    return cac_map_hu.with_data(out) if isinstance(cac_map_hu, Volume) else out


def _assign_artery(voxels, labels):
    if labels is None:
        return None
    codes = labels[tuple(voxels.T)]
    codes = codes[codes > 0]
    if len(codes) == 0:
        return None
    return CODE_ARTERY.get(int(Counter(codes.tolist()).most_common(1)[0][0]))


def extract_lesions(values, spacing, mask=None, connectivity=26, min_voxels=1, labels=None) -> LesionSet:
    """Connected components of ``mask`` (default: ``values > 0``) carrying ``values`` as HU."""
    vals = _arr(values).astype(np.float64)
    m = vals > 0 if mask is None else _arr(mask).astype(bool)
    lab = None if labels is None else _arr(labels)
    if lab is not None and lab.shape != vals.shape:
        raise ValueError("label volume is not on the image grid")
    comp, n = ndimage.label(m, structure=_structure(connectivity))
    lesions = []
    if n:
        order = np.argsort(comp.ravel(), kind="stable")
        flat = comp.ravel()[order]
        bounds = np.searchsorted(flat, np.arange(1, n + 2))
        coords = np.column_stack(np.unravel_index(order, comp.shape))
        for k in range(n):
            vox = coords[bounds[k]:bounds[k + 1]]
            if len(vox) < min_voxels:
                continue
            lesions.append(Lesion(vox, vals[tuple(vox.T)], _assign_artery(vox, lab)))
    return LesionSet(lesions, tuple(float(s) for s in spacing))


def threshold_lesions(image, spacing, roi=None, threshold=CLINICAL_THRESHOLD_HU, connectivity=26,
                      min_voxels=3, labels=None) -> LesionSet:
    """Clinical path: components of voxels >= 130 HU inside the region of interest."""
    img = _arr(image)
    m = img >= threshold
    if roi is not None:
        m &= _arr(roi).astype(bool)
    return extract_lesions(img, spacing, m, connectivity, min_voxels, labels)


def pseudo_mass(lesions: LesionSet, voxel_volume=None):
    vv = lesions.voxel_volume if voxel_volume is None else voxel_volume
    return float(sum(l.values.sum() for l in lesions) * vv)


def _agatston(lesions: LesionSet, weight):
    area = lesions.pixel_area
    total = 0.0
    for l in lesions:
        for n, mx in l.slices().values():
            total += n * area * weight(mx)
    return float(total)


def adjusted_agatston(lesions: LesionSet):
    return _agatston(lesions, adjusted_weight)


def conventional_agatston(lesions: LesionSet):
    return _agatston(lesions, clinical_weight)


def risk_category(agatston):
    if agatston < 0:
        raise ValueError("Agatston score must be nonnegative")
    if agatston <= 10:
        return "I"
    if agatston <= 100:
        return "II"
    if agatston < 400:
        return "III"
    return "IV"


@dataclass
class ScoreRecord:
    pseudo_mass: float = 0.0
    adjusted_agatston: float = 0.0
    conventional_agatston: float = 0.0
    risk_category: str = "I"
    baseline_pseudo_mass: float = 0.0
    baseline_risk_category: str = "I"
    n_lesions: int = 0
    n_baseline_lesions: int = 0
    arteries: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def score_scan(image, spacing, cac_map_hu=None, roi=None, labels=None, attenuation="map",
               map_min_voxels=1, clinical_min_voxels=3, connectivity=26) -> ScoreRecord:
    """Score one scan with both the CAC map (proposed) and the 130-HU rule (baseline).

    ``cac_map_hu`` must already be on the image grid, i.e. resampled back to the
    original in-plane resolution. ``attenuation="image"`` takes lesion HU from
    the raw image instead of the map.
    """
    img = _arr(image)
    if labels is not None and _arr(labels).shape != img.shape:
        raise ValueError("label volume is not on the image grid")
    if cac_map_hu is None:
        proposed = LesionSet([], tuple(spacing))
    else:
        cmap = _arr(cac_map_hu)
        if cmap.shape != img.shape:
            raise ValueError("CAC map is not on the image grid")
        member = cmap > 0
        values = cmap if attenuation == "map" else img
        proposed = extract_lesions(values, spacing, member, connectivity, map_min_voxels, labels)
    clinical = threshold_lesions(img, spacing, roi, CLINICAL_THRESHOLD_HU, connectivity, clinical_min_voxels, labels)
    adj = adjusted_agatston(proposed)
    conv = conventional_agatston(clinical)
    rec = ScoreRecord(
        pseudo_mass=pseudo_mass(proposed),
        adjusted_agatston=adj,
        conventional_agatston=conv,
        risk_category=risk_category(adj),
        baseline_pseudo_mass=pseudo_mass(clinical),
        baseline_risk_category=risk_category(conv),
        n_lesions=len(proposed),
        n_baseline_lesions=len(clinical),
    )
    if labels is not None:
        for name in ARTERY_NAMES:
            p, c = proposed.for_artery(name), clinical.for_artery(name)
            rec.arteries[name] = {
                "pseudo_mass": pseudo_mass(p),
                "adjusted_agatston": adjusted_agatston(p),
                "conventional_agatston": conventional_agatston(c),
                "baseline_pseudo_mass": pseudo_mass(c),
                "n_lesions": len(p),
                "n_baseline_lesions": len(c),
            }
    return rec
