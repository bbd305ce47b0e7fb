"""Voxel grids, patch algebra, strided subsampling and trilinear upsampling.

Arrays are indexed ``data[x, y, z]``.  On disk (CVOL) voxels are written
with x varying fastest and z slowest.
"""
from __future__ import annotations

import enum
import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class Modality(enum.IntEnum):
    CT = 0
    PET = 1
    MASK = 2


@dataclass(frozen=True)
class VoxelVolume:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.CT

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing_mm}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def with_data(self, data, spacing_mm=None, modality=None) -> "VoxelVolume":
        return VoxelVolume(
            data,
            self.spacing_mm if spacing_mm is None else spacing_mm,
            self.modality if modality is None else modality,
        )


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple[int, int, int]
    extent: tuple[int, int, int]
    index: int = 0
    total: int = 1

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))

    def center_fraction(self, dims) -> np.ndarray:
        """Patch centre in normalised [0, 1] coordinates of the parent grid."""
        return np.array(
            [(o + e / 2.0) / d for o, e, d in zip(self.origin, self.extent, dims)]
        )

    def check(self, dims):
        for o, e, d in zip(self.origin, self.extent, dims):
            if o < 0 or e <= 0 or o + e > d:
                raise ValueError(f"patch {self} out of bounds for dims {tuple(dims)}")


@dataclass(frozen=True)
class SubsampleOffset:
    offset: tuple[int, int, int]
    factor: int

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if any(not 0 <= o < self.factor for o in self.offset):
            raise ValueError(f"offset {self.offset} outside [0, {self.factor})")

    @staticmethod
    def all(factor: int) -> list["SubsampleOffset"]:
        return [
            SubsampleOffset(off, factor)
            for off in itertools.product(range(factor), repeat=3)
        ]


def _check_divisible(dims, divisor, what="factor"):
    divisor = (divisor,) * 3 if np.isscalar(divisor) else tuple(divisor)
    for d, f in zip(dims, divisor):
        if f <= 0 or d % f:
            raise ValueError(f"dims {tuple(dims)} not divisible by {what} {divisor}")
    return divisor


def stratified_subsample(vol: VoxelVolume, off: SubsampleOffset) -> VoxelVolume:
    f = off.factor
    _check_divisible(vol.dims, f)
    x, y, z = off.offset
    data = np.ascontiguousarray(vol.data[x::f, y::f, z::f])
    return vol.with_data(data, spacing_mm=tuple(s * f for s in vol.spacing_mm))


def subsample_family(vol: VoxelVolume, factor: int) -> list[VoxelVolume]:
    """All ``factor**3`` phase-shifted strided copies; together they hold every voxel once."""
    _check_divisible(vol.dims, factor)
    return [stratified_subsample(vol, off) for off in SubsampleOffset.all(factor)]


def _interp_weights(n_src: int, n_dst: int):
    # align-corners: destination index j maps to j * (n_src - 1) / (n_dst - 1)
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst)
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, max(n_src - 2, 0))
    hi = np.minimum(lo + 1, n_src - 1)
    w = pos - lo
    return lo, hi, w


def trilinear_resize(data: np.ndarray, target_dims) -> np.ndarray:
    """Separable align-corners linear interpolation over the last three axes."""
    out = np.asarray(data)
    nd = out.ndim
    for axis, n_dst in zip(range(nd - 3, nd), target_dims):
        n_src = out.shape[axis]
        if n_src == n_dst:
            continue
        lo, hi, w = _interp_weights(n_src, n_dst)
        shape = [1] * nd
        shape[axis] = n_dst
        w = w.reshape(shape).astype(out.dtype if out.dtype.kind == "f" else np.float64)
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        out = a + (b - a) * w
    return out


def trilinear_upsample(vol: VoxelVolume, target_dims) -> VoxelVolume:
    target_dims = tuple(int(t) for t in target_dims)
    if any(t < d for t, d in zip(target_dims, vol.dims)):
        raise ValueError(f"target dims {target_dims} smaller than source {vol.dims}")
    data = trilinear_resize(vol.data, target_dims).astype(vol.data.dtype, copy=False)
    spacing = tuple(s * d / t for s, d, t in zip(vol.spacing_mm, vol.dims, target_dims))
    return vol.with_data(data, spacing_mm=spacing)


def partition(dims, patch_extent) -> list[PatchSpec]:
    dims = tuple(int(d) for d in dims)
    extent = _check_divisible(dims, tuple(int(e) for e in patch_extent), "patch extent")
    counts = [d // e for d, e in zip(dims, extent)]
    total = int(np.prod(counts))
    specs = []
    for i, idx in enumerate(itertools.product(*(range(c) for c in counts))):
        origin = tuple(k * e for k, e in zip(idx, extent))
        specs.append(PatchSpec(origin, extent, i, total))
    return specs


def extract_patch(vol: VoxelVolume, spec: PatchSpec) -> VoxelVolume:
    spec.check(vol.dims)
    return vol.with_data(vol.data[spec.slices].copy())


def insert_patch(vol: VoxelVolume, spec: PatchSpec, patch: VoxelVolume) -> VoxelVolume:
    spec.check(vol.dims)
    if patch.dims != tuple(spec.extent):
        raise ValueError(f"patch dims {patch.dims} do not match extent {spec.extent}")
    data = vol.data.copy()
    data[spec.slices] = patch.data
    return vol.with_data(data)


# --- CVOL v1 ---------------------------------------------------------------

CVOL_MAGIC = b"CVOL"
CVOL_VERSION = 1
_CVOL_HEADER = struct.Struct("<4sI3I3fB31x")
assert _CVOL_HEADER.size == 64


def write_cvol(path, vol: VoxelVolume) -> None:
    header = _CVOL_HEADER.pack(
        CVOL_MAGIC, CVOL_VERSION, *vol.dims, *vol.spacing_mm, int(vol.modality)
    )
    body = np.asarray(vol.data, dtype="<f4").ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def read_cvol(path) -> VoxelVolume:
    raw = Path(path).read_bytes()
    if len(raw) < _CVOL_HEADER.size:
        raise ValueError(f"{path}: truncated CVOL header")
    magic, version, nx, ny, nz, sx, sy, sz, modality = _CVOL_HEADER.unpack_from(raw)
    if magic != CVOL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CVOL_VERSION:
        raise ValueError(f"{path}: unsupported CVOL version {version}")
    n = nx * ny * nz
    body = np.frombuffer(raw, dtype="<f4", offset=_CVOL_HEADER.size)
    if body.size != n:
        raise ValueError(f"{path}: expected {n} voxels, found {body.size}")
    data = body.reshape((nx, ny, nz), order="F").astype(np.float32)
    return VoxelVolume(data, (sx, sy, sz), Modality(modality))
