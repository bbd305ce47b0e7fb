"""Procedural PET/CT torso phantoms with known organ masks.

A subject is an elliptic body (elongated far past the field of view, so it
reads as a cylinder) containing ellipsoidal lungs, liver, heart and a kidney
pair.  Organ sizes follow simple demographic laws:

* body cross-section area proportional to weight / height
* liver volume = 1.0 L * (weight / 70 kg) ** 0.7
* heart volume 0.68 L (male) / 0.55 L (female)
* kidney pair 0.30 L

each multiplied by a per-subject log-normal factor.  Liver, heart and
kidneys never overlap; lungs are painted first and carved by the other
organs.  Coordinates are millimetres relative to the centre of the field of
view, with +z pointing superior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .normalize import DemographicVector
from .volume import Modality, VoxelVolume

BACKGROUND, BODY, LUNGS, LIVER, HEART, KIDNEYS = range(6)
LABELS = {"body": BODY, "lungs": LUNGS, "liver": LIVER, "heart": HEART, "kidneys": KIDNEYS}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
TABLE_ORGANS = ("liver", "heart", "kidneys")

AIR_HU = -1000.0
# Contrast-phase HU levels, spaced so each organ owns a distinct CT band.
ORGAN_HU = {"body": -80.0, "lungs": -750.0, "liver": 80.0, "heart": 200.0, "kidneys": 320.0}
# SUV means by sex (female, male); liver/heart/kidney values are AutoPET cohort means.
ORGAN_SUV = {
    "body": (0.8, 0.8),
    "lungs": (0.5, 0.5),
    "liver": (2.34, 2.26),
    "heart": (3.07, 2.48),
    "kidneys": (2.70, 2.50),
}
ORGAN_TEXTURE = {"body": 0.1, "lungs": 0.1, "liver": 0.3, "heart": 0.5, "kidneys": 0.5}
HEART_VOLUME_L = (0.55, 0.68)
KIDNEY_PAIR_VOLUME_L = 0.30

REFERENCE_BODY_MM = (150.0, 105.0)   # semi-axes at the reference build
REFERENCE_BUILD = 83.0 / 177.0        # kg per cm
Z_REF_MM = 288.0
CT_NOISE_HU = 10.0
TEXTURE_SMOOTHING_MM = 20.0
VARIABILITY = 0.08                    # log-normal sd of per-subject size / uptake factors

# centre (fraction of body semi-axes in x, y; of Z_REF_MM in z) and shape ratios
_LAYOUT = {
    "lungs": [((-0.5, 0.05, 0.52), (0.38, 0.65, None))],
    "liver": [((-0.35, -0.05, -0.07), (1.0, 0.8, 0.7))],
    "heart": [((0.12, -0.25, 0.35), (1.0, 0.8, 0.9))],
    "kidneys": [((-0.42, 0.45, -0.49), (0.65, 0.5, 1.0)),
                ((0.42, 0.45, -0.49), (0.65, 0.5, 1.0))],
}
_LUNG_SEMI_Z_MM = 130.0
CHEST_WALL_MM = 24.0                  # minimum tissue between lung and skin


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    semi_axes_mm: tuple[float, float, float]

    @property
    def volume_mm3(self) -> float:
        a, b, c = self.semi_axes_mm
        return 4.0 / 3.0 * math.pi * a * b * c

    def inside(self, x, y, z):
        cx, cy, cz = self.center_mm
        a, b, c = self.semi_axes_mm
        return ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 + ((z - cz) / c) ** 2 <= 1.0

    def surface_points(self, n=24):
        u = np.linspace(0, 2 * np.pi, n, endpoint=False)
        v = np.linspace(0, np.pi, n // 2 + 1)
        uu, vv = np.meshgrid(u, v)
        a, b, c = self.semi_axes_mm
        cx, cy, cz = self.center_mm
        return (cx + a * np.cos(uu) * np.sin(vv), cy + b * np.sin(uu) * np.sin(vv),
                cz + c * np.cos(vv))


@dataclass(frozen=True)
class OrganSpec:
    name: str
    parts: tuple[Ellipsoid, ...]
    hu: float
    suv_mean: float
    texture_amplitude: float

    @property
    def label(self) -> int:
        return LABELS[self.name]

    @property
    def volume_L(self) -> float:
        return sum(p.volume_mm3 for p in self.parts) / 1e6


@dataclass(frozen=True)
class PhantomSpec:
    demographics: DemographicVector
    body: Ellipsoid
    organs: tuple[OrganSpec, ...]
    seed: int = 0
    notes: dict = field(default_factory=dict, compare=False)

    def organ(self, name) -> OrganSpec:
        for o in self.organs:
            if o.name == name:
                return o
        raise KeyError(name)

    def validate(self) -> "PhantomSpec":
        self.demographics.validate()
        for organ in self.organs:
            if organ.suv_mean < 0:
                raise ValueError(f"{organ.name}: negative SUV")
            if organ.name == "body":
                continue
            for part in organ.parts:
                if not np.all(self.body.inside(*part.surface_points())):
                    raise ValueError(f"{organ.name} extends outside the body")
        solid = [(o.name, p) for o in self.organs if o.name in TABLE_ORGANS for p in o.parts]
        for i, (na, pa) in enumerate(solid):
            for nb, pb in solid[i + 1:]:
                if np.any(pb.inside(*pa.surface_points(32))) or np.any(pa.inside(*pb.surface_points(32))):
                    raise ValueError(f"{na} and {nb} overlap")
        return self


@dataclass(frozen=True)
class PhantomVolumeSet:
    ct: VoxelVolume
    pet: VoxelVolume
    mask: VoxelVolume


def _axes_for_volume(volume_L, ratios):
    r = np.asarray(ratios, dtype=np.float64)
    k = (volume_L * 1e6 / (4.0 / 3.0 * math.pi * np.prod(r))) ** (1.0 / 3.0)
    return tuple(float(v) for v in k * r)


def _fit_lung(center, axes, a_body, b_body):
    # shrink in-plane until the lung clears the chest wall
    wall = Ellipsoid((0.0, 0.0, 0.0), (a_body - CHEST_WALL_MM, b_body - CHEST_WALL_MM, math.inf))
    for _ in range(60):
        x, y, _z = Ellipsoid(center, axes).surface_points(48)
        if np.all(wall.inside(x, y, 0.0)):
            break
        axes = (axes[0] * 0.97, axes[1] * 0.97, axes[2])
    return axes


def liver_volume_law(weight_kg: float) -> float:
    return 1.0 * (weight_kg / 70.0) ** 0.7


def build_spec(demo: DemographicVector, seed: int = 0, variability: float = VARIABILITY,
               texture_scale: float = 1.0) -> PhantomSpec:
    """Phantom parameters for one subject; ``seed`` sets the individual variation."""
    demo.validate()
    rng = np.random.default_rng([int(seed), 7919])
    factors = np.exp(variability * rng.standard_normal(8))
    jitter = 0.02 * rng.standard_normal((5, 3))

    build = (demo.weight / demo.height) / REFERENCE_BUILD
    a_body = REFERENCE_BODY_MM[0] * math.sqrt(build) * factors[0] ** 0.5
    b_body = REFERENCE_BODY_MM[1] * math.sqrt(build) * factors[0] ** 0.5
    body = Ellipsoid((0.0, 0.0, 0.0), (a_body, b_body, 4.0 * Z_REF_MM))
    sex = int(demo.sex)

    volumes = {
        "liver": liver_volume_law(demo.weight) * factors[1],
        "heart": HEART_VOLUME_L[sex] * factors[2],
        "kidneys": KIDNEY_PAIR_VOLUME_L * factors[3],
    }
    organs = []
    for j, (name, layout) in enumerate(_LAYOUT.items()):
        parts = []
        for (fx, fy, fz), ratios in layout:
            center = ((fx + jitter[j, 0]) * a_body, (fy + jitter[j, 1]) * b_body,
                      (fz + jitter[j, 2]) * Z_REF_MM)
            if name == "lungs":
                axes = (ratios[0] * a_body, ratios[1] * b_body, _LUNG_SEMI_Z_MM * demo.height / 177.0)
                axes = _fit_lung(center, axes, a_body, b_body)
                for mirror in (1.0, -1.0):
                    parts.append(Ellipsoid((mirror * center[0], center[1], center[2]), axes))
            else:
                axes = _axes_for_volume(volumes[name] / len(layout), ratios)
                parts.append(Ellipsoid(center, axes))
        suv = ORGAN_SUV[name][sex] * (factors[4 + min(j, 3)] if name in TABLE_ORGANS else 1.0)
        organs.append(OrganSpec(name, tuple(parts), ORGAN_HU[name], suv,
                                ORGAN_TEXTURE[name] * texture_scale))
    body_organ = OrganSpec("body", (body,), ORGAN_HU["body"], ORGAN_SUV["body"][sex],
                           ORGAN_TEXTURE["body"] * texture_scale)
    return PhantomSpec(demo, body, (body_organ, *organs), int(seed))


def voxel_centers_mm(dims, spacing):
    return [((np.arange(n) + 0.5) * s - n * s / 2.0) for n, s in zip(dims, spacing)]


def smooth_noise(dims, spacing, seed, smoothing_mm=TEXTURE_SMOOTHING_MM) -> np.ndarray:
    """Low-frequency noise field scaled to max |n| = 1."""
    rng = np.random.default_rng([int(seed), 104729])
    white = rng.standard_normal(dims)
    sig = [smoothing_mm / s for s in spacing]
    field_ = ndimage.gaussian_filter(white, sig, mode="wrap")
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def paint_labels(spec: PhantomSpec, dims, spacing) -> np.ndarray:
    xs, ys, zs = voxel_centers_mm(dims, spacing)
    x, y, z = xs[:, None, None], ys[None, :, None], zs[None, None, :]
    mask = np.zeros(dims, dtype=np.uint8)
    order = ("body", "lungs", "liver", "kidneys", "heart")
    for name in order:
        organ = spec.organ(name)
        for part in organ.parts:
            mask[part.inside(x, y, z)] = organ.label
    return mask


def synthesize_phantom(spec: PhantomSpec, dims, spacing) -> PhantomVolumeSet:
    """Voxelise ``spec`` on a grid of ``dims`` voxels with ``spacing`` mm edges."""
    spec.validate()
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    mask = paint_labels(spec, dims, spacing)

    texture = smooth_noise(dims, spacing, spec.seed)
    rng = np.random.default_rng([int(spec.seed), 15485863])
    ct = np.full(dims, AIR_HU)
    pet = np.zeros(dims)
    for organ in spec.organs:
        sel = mask == organ.label
        ct[sel] = organ.hu
        pet[sel] = organ.suv_mean * (1.0 + organ.texture_amplitude * texture[sel])
    ct += CT_NOISE_HU * rng.standard_normal(dims) * (mask > 0)
    pet = np.clip(pet, 0.0, None)
    return PhantomVolumeSet(
        VoxelVolume(ct.astype(np.float32), spacing, Modality.CT),
        VoxelVolume(pet.astype(np.float32), spacing, Modality.PET),
        VoxelVolume(mask.astype(np.float32), spacing, Modality.MASK),
    )


# --- cohorts ------------------------------------------------------------------

# (mean, sd) of age, height, weight by sex; sex 1 is male
COHORT_STATS = {
    1: {"age": (58.0, 17.0), "height": (177.0, 7.0), "weight": (83.0, 15.0)},
    0: {"age": (59.0, 15.0), "height": (165.0, 7.0), "weight": (76.0, 19.0)},
}
MALE_FRACTION = 108 / 200


def table_cohort_sampler(rng: np.random.Generator) -> DemographicVector:
    """Draw demographics from the per-sex normal fits, redrawing out-of-range values."""
    sex = int(rng.uniform() < MALE_FRACTION)
    stats = COHORT_STATS[sex]
    while True:
        d = DemographicVector(
            age=float(rng.normal(*stats["age"])), sex=sex,
            height=float(rng.normal(*stats["height"])),
            weight=float(rng.normal(*stats["weight"])),
        )
        try:
            return d.validate()
        except ValueError:
            continue


def subject_seed(cohort_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(cohort_seed), int(index)]).generate_state(1)[0])


def make_cohort(n: int, dims, spacing, sampler=table_cohort_sampler, seed: int = 0,
                max_tries: int = 100, synthesize: bool = True):
    """``n`` (spec, volumes) pairs; subjects whose organs do not fit are redrawn."""
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    rng = np.random.default_rng([int(seed), 31337])
    out = []
    for i in range(n):
        for attempt in range(max_tries):
            demo = sampler(rng)
            try:
                spec = build_spec(demo, subject_seed(seed, i * max_tries + attempt)).validate()
                break
            except ValueError:
                continue
        else:
            raise RuntimeError(f"could not draw a valid phantom for subject {i}")
        vols = synthesize_phantom(spec, dims, spacing) if synthesize else None
        out.append((spec, vols))
    return out


def with_demographics(spec: PhantomSpec, **changes) -> PhantomSpec:
    """Rebuild a spec with the same seed and edited demographics."""
    demo = replace(spec.demographics, **changes)
    return build_spec(demo, spec.seed)
