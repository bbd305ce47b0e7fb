"""CT/SUV intensity normalisation and demographic encoding, with inverses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

# Divisors applied to (age, sex, height, weight); sex is already {0, 1}.
DEMOGRAPHIC_SCALE = (100.0, 1.0, 200.0, 150.0)
DEMOGRAPHIC_FIELDS = ("age", "sex", "height", "weight")


@dataclass(frozen=True)
class NormalizationSpec:
    ct_window: tuple[float, float] = (-500.0, 500.0)
    suv_clip: tuple[float, float] = (0.0, 25.0)
    suv_log_base: float = 26.0

    def __post_init__(self):
        lo, hi = self.ct_window
        if not lo < hi:
            raise ValueError(f"ct_window must satisfy lo < hi, got {self.ct_window}")
        slo, shi = self.suv_clip
        if slo < 0 or not slo < shi:
            raise ValueError(f"invalid suv_clip {self.suv_clip}")
        if self.suv_log_base <= 1:
            raise ValueError("suv_log_base must exceed 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(tuple(d["ct_window"]), tuple(d["suv_clip"]), float(d["suv_log_base"]))


DEFAULT_SPEC = NormalizationSpec()


def _finite(x, what):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite {what} value")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def normalize_ct(hu, spec: NormalizationSpec = DEFAULT_SPEC):
    """Clip HU to the window and map it linearly onto [0, 1]."""
    lo, hi = spec.ct_window
    arr = _finite(hu, "HU")
    return _out(np.clip((arr - lo) / (hi - lo), 0.0, 1.0), hu)


def denormalize_ct(u, spec: NormalizationSpec = DEFAULT_SPEC):
    lo, hi = spec.ct_window
    arr = _finite(u, "normalised CT")
    return _out(lo + arr * (hi - lo), u)


def normalize_suv(suv, spec: NormalizationSpec = DEFAULT_SPEC):
    """log(SUV + 1) / log(26) after clipping SUV to [0, 25]."""
    lo, hi = spec.suv_clip
    arr = np.clip(_finite(suv, "SUV"), lo, hi)
    return _out(np.log1p(arr) / math.log(spec.suv_log_base), suv)


def denormalize_suv(u, spec: NormalizationSpec = DEFAULT_SPEC):
    arr = _finite(u, "normalised SUV")
    return _out(np.expm1(arr * math.log(spec.suv_log_base)), u)


@dataclass(frozen=True)
class DemographicVector:
    age: float
    sex: int
    height: float
    weight: float

    def validate(self) -> "DemographicVector":
        problems = []
        if not 0 < self.age <= 120:
            problems.append(f"age {self.age} outside (0, 120]")
        if self.sex not in (0, 1):
            problems.append(f"sex {self.sex} not in {{0, 1}}")
        if not 100 <= self.height <= 230:
            problems.append(f"height {self.height} outside [100, 230]")
        if not 20 < self.weight <= 300:
            problems.append(f"weight {self.weight} outside (20, 300]")
        for name in DEMOGRAPHIC_FIELDS:
            if not math.isfinite(getattr(self, name)):
                problems.append(f"{name} is not finite")
        if problems:
            raise ValueError("invalid demographics: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {"age": float(self.age), "sex": int(self.sex),
                "height": float(self.height), "weight": float(self.weight)}

    @classmethod
    def from_dict(cls, d: dict) -> "DemographicVector":
        return cls(float(d["age"]), int(d["sex"]), float(d["height"]), float(d["weight"]))


def encode_demographics(d: DemographicVector) -> np.ndarray:
    """Fixed-order conditioning vector (age/100, sex, height/200, weight/150)."""
    d.validate()
    raw = np.array([d.age, d.sex, d.height, d.weight], dtype=np.float64)
    return raw / np.array(DEMOGRAPHIC_SCALE)


def decode_demographics(v) -> DemographicVector:
    age, sex, height, weight = np.asarray(v, dtype=np.float64) * np.array(DEMOGRAPHIC_SCALE)
    return DemographicVector(float(age), int(round(sex)), float(height), float(weight))
