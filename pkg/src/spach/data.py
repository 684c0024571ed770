"""Synthetic phantoms, image-space dose reduction, ROIs and the SPV1 volume file."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage


@dataclass
class Volume:
    data: np.ndarray
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def crop(self, corner, size) -> "Volume":
        sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
        return Volume(self.data[sl].copy(), self.voxel_size)


@dataclass
class RoiSpec:
    """Ellipsoid (centre and radii in mm) or explicit voxel index list."""

    kind: str
    label: str = ""
    center_mm: Optional[Tuple[float, float, float]] = None
    radii_mm: Optional[Tuple[float, float, float]] = None
    voxels: Optional[np.ndarray] = None  # [n, 3] integer (z, y, x)

    @classmethod
    def ellipsoid(cls, center_mm, radii_mm, label: str = "") -> "RoiSpec":
        return cls("ellipsoid", label, tuple(map(float, center_mm)), tuple(map(float, radii_mm)))

    @classmethod
    def voxel_list(cls, voxels, label: str = "") -> "RoiSpec":
        return cls("voxels", label, voxels=np.asarray(voxels, dtype=np.int64).reshape(-1, 3))

    def mask(self, dims, voxel_size) -> np.ndarray:
        if self.kind == "ellipsoid":
            m = ellipsoid_mask(dims, voxel_size, self.center_mm, self.radii_mm)
        elif self.kind == "voxels":
            v = self.voxels
            if v is None or len(v) == 0:
                raise ValueError(f"ROI {self.label!r} has no voxels")
            if np.any(v < 0) or np.any(v >= np.asarray(dims)):
                raise ValueError(f"ROI {self.label!r} has voxels outside volume dims {tuple(dims)}")
            m = np.zeros(dims, dtype=bool)
            m[v[:, 0], v[:, 1], v[:, 2]] = True
        else:
            raise ValueError(f"unknown ROI kind {self.kind!r}")
        if not m.any():
            raise ValueError(f"ROI {self.label!r} covers no voxels")
        return m

    def to_json(self) -> dict:
        d = {"kind": self.kind, "label": self.label}
        if self.kind == "ellipsoid":
            d.update(center_mm=list(self.center_mm), radii_mm=list(self.radii_mm))
        else:
            d["voxels"] = self.voxels.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RoiSpec":
        if d["kind"] == "ellipsoid":
            return cls.ellipsoid(d["center_mm"], d["radii_mm"], d.get("label", ""))
        if d["kind"] == "voxels":
            return cls.voxel_list(d["voxels"], d.get("label", ""))
        raise ValueError(f"unknown ROI kind {d['kind']!r}")


def save_rois(rois: List[RoiSpec], path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in rois], indent=1))


def load_rois(path) -> List[RoiSpec]:
    return [RoiSpec.from_json(d) for d in json.loads(Path(path).read_text())]


def ellipsoid_mask(dims, voxel_size, center_mm, radii_mm) -> np.ndarray:
    # voxel i sits at i * voxel_size mm
    axes = [np.arange(n) * vs for n, vs in zip(dims, voxel_size)]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    r = ((zz - center_mm[0]) / radii_mm[0]) ** 2 + ((yy - center_mm[1]) / radii_mm[1]) ** 2 \
        + ((xx - center_mm[2]) / radii_mm[2]) ** 2
    return r <= 1.0


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    """Synthetic torso: one large host organ, smaller organs and hot tumours.

    The first organ ("liver") hosts the reference ROI: a ball of
    ``reference_radius_mm`` at its centre is kept clear of every other
    structure (plus the blur reach), so a near-uniform region always exists.
    """

    seed: int = 0
    dims: Tuple[int, int, int] = (32, 32, 32)
    voxel_size: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    background: float = 0.1
    n_organs: int = 3
    organ_intensity: Tuple[float, float] = (0.4, 1.0)
    liver_radius_mm: Tuple[float, float] = (18.0, 24.0)
    organ_radius_mm: Tuple[float, float] = (6.0, 12.0)
    reference_radius_mm: float = 6.0
    n_tumors: int = 2
    tumor_radius_mm: Tuple[float, float] = (3.0, 5.0)
    tumor_contrast: Tuple[float, float] = (1.0, 2.0)
    sigma: float = 1.0  # generative blur, voxels

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if self.background < 0 or self.organ_intensity[0] < 0 or self.tumor_contrast[0] < 0:
            raise ValueError("phantom intensities must be nonnegative")
        if self.n_organs < 0 or self.n_tumors < 0:
            raise ValueError("organ and tumour counts must be nonnegative")


@dataclass
class Phantom:
    volume: Volume
    tumors: List[RoiSpec]
    reference: Optional[RoiSpec]  # None only for organ-free phantoms
    organs: List[RoiSpec] = field(default_factory=list)

    @property
    def rois(self) -> List[RoiSpec]:
        return self.tumors + ([self.reference] if self.reference is not None else [])


def _blur(a: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(a, sigma, mode="constant") if sigma > 0 else a


def _place(rng, dims, vs, radius_range, center_range, blocked, what):
    """Rejection-sample an ellipsoid that avoids ``blocked``."""
    extent = np.asarray(dims) * np.asarray(vs)
    for _ in range(1000):
        radii = rng.uniform(*radius_range, size=3)
        lo = np.maximum(center_range[0] * extent, radii)
        hi = np.minimum(center_range[1] * extent, extent - np.asarray(vs) - radii)
        if np.any(hi < lo):
            continue
        center = rng.uniform(lo, hi)
        m = ellipsoid_mask(dims, vs, center, radii)
        if m.any() and not (m & blocked).any():
            return center, radii, m
    raise RuntimeError(f"could not place {what} within {tuple(dims)} after 1000 attempts")


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Background + blurred ellipsoidal organs + blurred high-contrast tumours.

    The reference ROI is the host organ eroded by the blur reach (3 sigma),
    minus the same reach around every other organ and tumour.
    """
    rng = np.random.default_rng(spec.seed)
    dims, vs = spec.dims, spec.voxel_size
    extent = np.asarray(dims) * np.asarray(vs)
    reach = max(1, int(math.ceil(3 * spec.sigma)))
    struct_el = np.ones((2 * reach + 1,) * 3, dtype=bool)

    def grow(m):
        return ndimage.binary_dilation(m, struct_el)

    organ_layer = np.zeros(dims)
    organs = []
    others = np.zeros(dims, dtype=bool)
    blocked = np.zeros(dims, dtype=bool)
    liver = None
    if spec.n_organs > 0:
        liver_c = rng.uniform(0.4, 0.6, size=3) * extent
        liver_r = rng.uniform(*spec.liver_radius_mm, size=3)
        liver = ellipsoid_mask(dims, vs, liver_c, liver_r)
        core = ellipsoid_mask(dims, vs, liver_c, (spec.reference_radius_mm,) * 3)
        if not core.any() or (core & ~ndimage.binary_erosion(liver, struct_el)).any():
            raise ValueError("reference ball does not fit inside the eroded host organ; "
                             "shrink reference_radius_mm or enlarge liver_radius_mm")
        blocked = grow(core)
        organ_layer[liver] += rng.uniform(*spec.organ_intensity)
        organs.append(RoiSpec.ellipsoid(liver_c, liver_r, "liver"))
    for i in range(1, spec.n_organs):
        c, r, m = _place(rng, dims, vs, spec.organ_radius_mm, (0.2, 0.8), blocked, f"organ {i}")
        organ_layer[m] += rng.uniform(*spec.organ_intensity)
        organs.append(RoiSpec.ellipsoid(c, r, f"organ{i}"))
        others |= m

    tumor_layer = np.zeros(dims)
    tumors = []
    for i in range(spec.n_tumors):
        c, r, m = _place(rng, dims, vs, spec.tumor_radius_mm, (0.0, 1.0), blocked, f"tumour {i}")
        tumor_layer[m] += rng.uniform(*spec.tumor_contrast)
        blocked |= grow(m)
        others |= m
        tumors.append(RoiSpec.ellipsoid(c, r, f"tumor{i + 1}"))

    reference = None
    if liver is not None:
        ref_mask = ndimage.binary_erosion(liver, struct_el) & ~grow(others)
        reference = RoiSpec.voxel_list(np.argwhere(ref_mask), "reference")
    data = spec.background + _blur(organ_layer, spec.sigma) + _blur(tumor_layer, spec.sigma)
    return Phantom(Volume(np.maximum(data, 0.0), vs), tumors, reference, organs)


def dose_reduce(v: Volume, fraction: float, scale: float, seed) -> Volume:
    """Poisson draw of ``fraction * scale * value`` counts, rescaled to activity units."""
    if not 0 < fraction <= 1:
        raise ValueError(f"dose fraction must be in (0, 1], got {fraction}")
    if scale <= 0:
        raise ValueError(f"count scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    k = fraction * scale
    counts = rng.poisson(k * np.maximum(v.data, 0.0))
    return Volume(counts / k, v.voxel_size)


# ---------------------------------------------------------------------------
# SPV1 volume file
# ---------------------------------------------------------------------------

VOLUME_MAGIC = b"SPV1"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sI3I3f")


class VolumeFileError(ValueError):
    pass


def write_volume(v: Volume, path) -> None:
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *v.dims, *v.voxel_size)
    Path(path).write_bytes(header + np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise VolumeFileError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, d, h, w, *vs = _HEADER.unpack_from(buf)
    if magic != VOLUME_MAGIC:
        raise VolumeFileError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise VolumeFileError(f"{path}: unsupported version {version}")
    if min(d, h, w) == 0:
        raise VolumeFileError(f"{path}: zero dimension in {(d, h, w)}")
    expect = 4 * d * h * w
    payload = len(buf) - _HEADER.size
    if payload != expect:
        raise VolumeFileError(f"{path}: payload is {payload} bytes, dims {(d, h, w)} need {expect}")
    arr = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(d, h, w).astype(np.float32)
    return Volume(arr, tuple(vs))
