"""Volume data model, raw container I/O, resampling and slice normalization.

Arrays are indexed ``[x, y, z]`` so ``spacing[i]`` belongs to axis ``i``;
axial slices are ``data[:, :, k]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

HU_WINDOW = (-50.0, 950.0)
HU_PER_UNIT = HU_WINDOW[1] - HU_WINDOW[0]

# heart-seg working grid and classification/decomposition working grid (mm)
SEG_SPACING = (1.5, 1.5, 3.0)
SCORE_SPACING = (1.0, 1.0, 1.5)

_DTYPES = {"int16": np.int16, "float32": np.float32, "uint8": np.uint8}


class VolumeFormatError(ValueError):
    pass


def _as_triplet(values, name):
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} must have three components, got {t}")
    return t


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D and non-empty, got shape {self.data.shape}")
        self.spacing = _as_triplet(self.spacing, "spacing")
        self.origin = _as_triplet(self.origin, "origin")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def same_grid(self, other) -> bool:
        return (
            self.data.shape == other.data.shape
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )

    def with_data(self, data):
        return Volume(data, self.spacing, self.origin)


@dataclass
class BinaryMask(Volume):
    def __post_init__(self):
        super().__post_init__()
        self.data = self.data.astype(bool)

    @classmethod
    def like(cls, v: Volume, data):
        return cls(np.asarray(data, dtype=bool), v.spacing, v.origin)

    def with_data(self, data):
        return BinaryMask(data, self.spacing, self.origin)


@dataclass
class NormalizedSlice:
    """Heart-centred axial crop clipped to the HU window and scaled to [0, 1]."""

    data: np.ndarray
    crop_center: tuple
    side: int
    slice_index: int = 0
    hu_window: tuple = HU_WINDOW
    position: float = field(default=0.5)

    def to_hu(self, values=None):
        lo, hi = self.hu_window
        v = self.data if values is None else values
        return np.asarray(v, dtype=np.float64) * (hi - lo) + lo


# --------------------------------------------------------------------- I/O


def _sidecar_paths(path):
    path = Path(path)
    if path.suffix == ".json":
        return path, path.with_suffix(".raw")
    if path.suffix == ".raw":
        return path.with_suffix(".json"), path
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def write_volume(path, v: Volume, dtype="int16"):
    """Write ``v`` as a JSON sidecar plus a little-endian x-fastest raw payload.

    ``path`` may name either file or the common stem. Returns the sidecar path.
    """
    header_path, raw_path = _sidecar_paths(path)
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    arr = np.asarray(v.data)
    if dtype == "int16":
        if np.issubdtype(arr.dtype, np.floating):
            arr = np.rint(arr)
        if arr.min() < -32768 or arr.max() > 32767:
            raise VolumeFormatError("values not representable as int16")
    payload = arr.astype(np.dtype(_DTYPES[dtype]).newbyteorder("<"))
    header = {
        "dims": [int(s) for s in arr.shape],
        "spacing_mm": list(v.spacing),
        "origin_mm": list(v.origin),
        "dtype": dtype,
        "byte_order": "little",
        "raw": raw_path.name,
    }
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(payload.tobytes(order="F"))
    header_path.write_text(json.dumps(header, indent=1))
    return header_path


def read_volume(path) -> Volume:
    header_path, raw_path = _sidecar_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    header = json.loads(header_path.read_text())
    if "raw" in header:
        raw_path = header_path.parent / header["raw"]
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    dims = tuple(int(d) for d in header["dims"])
    dtype = header.get("dtype", "int16")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    order = "<" if header.get("byte_order", "little") == "little" else ">"
    dt = np.dtype(_DTYPES[dtype]).newbyteorder(order)
    buf = raw_path.read_bytes()
    n = int(np.prod(dims))
    if len(buf) != n * dt.itemsize:
        raise VolumeFormatError(
            f"payload holds {len(buf) // dt.itemsize} elements, header declares {n}"
        )
    data = np.frombuffer(buf, dtype=dt).reshape(dims, order="F").astype(_DTYPES[dtype])
    spacing = header["spacing_mm"]
    if min(spacing) <= 0:
        raise VolumeFormatError(f"non-positive spacing {spacing}")
    return Volume(data, spacing, header.get("origin_mm", (0.0, 0.0, 0.0)))


def read_mask(path) -> BinaryMask:
    v = read_volume(path)
    return BinaryMask(v.data != 0, v.spacing, v.origin)


# -------------------------------------------------------------- resampling


def _sample_grid(v: Volume, origin, spacing, shape, interpolation):
    src = np.asarray(v.spacing)
    # per-axis input coordinates of output voxel centres
    axes = [(origin[i] + np.arange(shape[i]) * spacing[i] - v.origin[i]) / src[i] for i in range(3)]
    if interpolation == "nearest":
        idx = [np.clip(np.floor(a + 0.5).astype(int), 0, v.shape[i] - 1) for i, a in enumerate(axes)]
        data = v.data[np.ix_(*idx)]
        out_cls = BinaryMask if isinstance(v, BinaryMask) else Volume
        return out_cls(data, spacing, origin)
    if interpolation != "linear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    grid = np.meshgrid(*axes, indexing="ij")
    data = ndimage.map_coordinates(v.data.astype(np.float64), grid, order=1, mode="nearest")
    return Volume(data, spacing, origin)


def resample(v: Volume, target_spacing, interpolation="linear", shape=None) -> Volume:
    """Resample onto a grid with ``target_spacing`` covering the same extent.

    Voxel edges are aligned, so the physical extent is kept to within one
    target voxel. Use ``linear`` for intensities and ``nearest`` for masks.
    """
    target = _as_triplet(target_spacing, "target_spacing")
    if min(target) <= 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    src = np.asarray(v.spacing)
    tgt = np.asarray(target)
    if shape is None:
        extent = np.asarray(v.shape) * src
        shape = tuple(max(1, int(round(e / t))) for e, t in zip(extent, tgt))
    if tuple(shape) == v.shape and np.allclose(src, tgt):
        if isinstance(v, BinaryMask):
            return BinaryMask(v.data.copy(), target, v.origin)
        return Volume(v.data.astype(np.float64), target, v.origin)
    origin = np.asarray(v.origin) - src / 2 + tgt / 2
    return _sample_grid(v, origin, tgt, tuple(shape), interpolation)


def resample_like(v: Volume, ref: Volume, interpolation="linear") -> Volume:
    """Resample ``v`` onto exactly the voxel grid of ``ref``."""
    return _sample_grid(v, np.asarray(ref.origin), np.asarray(ref.spacing), ref.shape, interpolation)


# ------------------------------------------------------------ normalization


def hu_to_unit(hu, window=HU_WINDOW):
    lo, hi = window
    return (np.clip(np.asarray(hu, dtype=np.float64), lo, hi) - lo) / (hi - lo)


def unit_to_hu(u, window=HU_WINDOW):
    lo, hi = window
    return np.asarray(u, dtype=np.float64) * (hi - lo) + lo


def crop_bounds(center, side):
    start = int(round(float(center))) - side // 2
    return start, start + side


def crop2d(plane, center, side, fill):
    """Crop ``side x side`` around ``center`` (x, y), padding with ``fill``."""
    out = np.full((side, side), fill, dtype=np.float64)
    (x0, x1), (y0, y1) = crop_bounds(center[0], side), crop_bounds(center[1], side)
    sx0, sx1 = max(x0, 0), min(x1, plane.shape[0])
    sy0, sy1 = max(y0, 0), min(y1, plane.shape[1])
    if sx0 < sx1 and sy0 < sy1:
        out[sx0 - x0:sx1 - x0, sy0 - y0:sy1 - y0] = plane[sx0:sx1, sy0:sy1]
    return out


def paste2d(plane, crop, center):
    """Inverse of :func:`crop2d`: write the in-bounds part of ``crop`` into ``plane``."""
    side = crop.shape[0]
    (x0, x1), (y0, y1) = crop_bounds(center[0], side), crop_bounds(center[1], side)
    sx0, sx1 = max(x0, 0), min(x1, plane.shape[0])
    sy0, sy1 = max(y0, 0), min(y1, plane.shape[1])
    if sx0 < sx1 and sy0 < sy1:
        plane[sx0:sx1, sy0:sy1] = crop[sx0 - x0:sx1 - x0, sy0 - y0:sy1 - y0]
    return plane


def normalize_slice(v: Volume, slice_index: int, center, side: int = 224,
                    window=HU_WINDOW, position: float = 0.5) -> NormalizedSlice:
    if not 0 <= slice_index < v.shape[2]:
        raise IndexError(f"slice {slice_index} outside 0..{v.shape[2] - 1}")
    if side <= 0:
        raise ValueError("side must be positive")
    crop = crop2d(v.data[:, :, slice_index], center, side, fill=0.0)
    return NormalizedSlice(
        data=hu_to_unit(crop, window).astype(np.float32),
        crop_center=(float(center[0]), float(center[1])),
        side=side,
        slice_index=slice_index,
        hu_window=tuple(window),
        position=position,
    )


def center_of_mass(m: BinaryMask):
    idx = np.argwhere(np.asarray(m.data if isinstance(m, Volume) else m))
    if len(idx) == 0:
        raise ValueError("center of mass of an empty mask")
    return tuple(float(c) for c in idx.mean(axis=0))


def heart_slice_range(mask: BinaryMask):
    """First and last axial slice touching the mask (inclusive)."""
    zs = np.flatnonzero(np.asarray(mask.data).any(axis=(0, 1)))
    if len(zs) == 0:
        raise ValueError("empty mask")
    return int(zs[0]), int(zs[-1])


def relative_position(k, z0, z1):
    return 0.5 if z1 == z0 else (k - z0) / (z1 - z0)
