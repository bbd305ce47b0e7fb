"""Organ-wise volume / SUV metrics, threshold segmentation and cohort statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from .phantom import BODY, HEART, KIDNEYS, LABELS, LABEL_NAMES, LIVER, LUNGS, TABLE_ORGANS
from .volume import VoxelVolume

METRICS = ("volume_L", "suv_mean", "suv_max")
METRIC_TITLES = {"volume_L": "Volume(L)", "suv_mean": "SUV_mean", "suv_max": "SUV_max"}

# HU bands used by the threshold segmenter; lower bound inclusive
HU_BANDS = {
    "lungs": (-math.inf, -300.0),
    "body": (-300.0, 20.0),
    "liver": (20.0, 140.0),
    "heart": (140.0, 260.0),
    "kidneys": (260.0, math.inf),
}


@dataclass(frozen=True)
class OrganMetrics:
    organ: str
    volume_L: float
    suv_mean: float
    suv_max: float
    present: bool = True


@dataclass(frozen=True)
class MetricRow:
    subject_id: str
    group: str
    organ: str
    volume_L: float
    suv_mean: float
    suv_max: float


def organ_metrics(ct: VoxelVolume, pet: VoxelVolume, mask: VoxelVolume, organ) -> OrganMetrics:
    """Volume in litres, mean and max SUV of one labelled organ.

    An absent label gives zero volume, NaN SUVs and ``present=False``.
    """
    if not (ct.dims == pet.dims == mask.dims):
        raise ValueError(f"dims differ: ct {ct.dims}, pet {pet.dims}, mask {mask.dims}")
    if not np.allclose(ct.spacing_mm, pet.spacing_mm) or not np.allclose(ct.spacing_mm, mask.spacing_mm):
        raise ValueError("spacing differs between ct, pet and mask")
    label = LABELS[organ] if isinstance(organ, str) else int(organ)
    name = organ if isinstance(organ, str) else LABEL_NAMES.get(label, str(label))
    sel = mask.data == label
    n = int(sel.sum())
    if n == 0:
        return OrganMetrics(name, 0.0, math.nan, math.nan, present=False)
    values = pet.data[sel].astype(np.float64)
    volume = n * mask.voxel_volume_mm3 / 1e6
    return OrganMetrics(name, volume, float(values.mean()), float(values.max()))


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom


def _components(band, keep):
    labels, n = ndimage.label(band)
    if n == 0:
        return np.zeros_like(band)
    sizes = ndimage.sum_labels(band, labels, index=np.arange(1, n + 1))
    order = np.argsort(-sizes, kind="stable")[:keep]
    largest = sizes[order[0]]
    # second kidney / lung must be a comparable blob, not a partial-volume sliver
    chosen = [i + 1 for i in order if sizes[i] >= 0.25 * largest]
    return np.isin(labels, chosen)


def threshold_segment(ct: VoxelVolume) -> VoxelVolume:
    """Label a CT volume (HU) by HU band plus connected components.

    Liver and heart keep the largest component in their band, kidneys and
    lungs the two largest.  Lung candidates touching the in-plane borders are
    outside air.  Remaining tissue above the lung band is body.
    """
    hu = ct.data
    out = np.zeros(ct.dims, dtype=np.float32)

    air_like = hu < HU_BANDS["lungs"][1]
    labels, n = ndimage.label(air_like)
    if n:
        border = np.unique(np.concatenate([
            labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(), labels[:, -1].ravel()]))
        inner = air_like & ~np.isin(labels, border)
        out[_components(inner, 2)] = LUNGS
    tissue = hu >= HU_BANDS["body"][0]
    out[tissue] = BODY
    for name, label, keep in (("liver", LIVER, 1), ("heart", HEART, 1), ("kidneys", KIDNEYS, 2)):
        lo, hi = HU_BANDS[name]
        organ = _components((hu >= lo) & (hu < hi), keep)
        organ = ndimage.binary_fill_holes(organ)
        out[organ] = label
    return ct.with_data(out, modality=2)


# --- statistics --------------------------------------------------------------

@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float | None
    flag: str = ""


def welch_ttest(a, b) -> WelchResult:
    """Two-sided Welch t-test of mean(b) - mean(a)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        return WelchResult(math.nan, math.nan, None, "undefined")
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    diff = b.mean() - a.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return WelchResult(0.0, math.nan, 1.0, "degenerate")
        return WelchResult(math.copysign(math.inf, diff), math.nan, None, "degenerate")
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    p = float(2.0 * special.stdtr(df, -abs(t)))
    return WelchResult(float(t), float(df), min(p, 1.0))


@dataclass(frozen=True)
class MetricComparison:
    group: str
    organ: str
    metric: str
    real_mean: float
    real_std: float
    synth_mean: float
    synth_std: float
    n_real: int
    n_synth: int
    diff_pct: float
    t: float
    p: float | None
    flag: str

    @property
    def significant(self) -> bool:
        if self.p is not None:
            return self.p < 0.05
        return self.flag == "degenerate" and self.diff_pct != 0


@dataclass
class CohortComparison:
    real_name: str
    synth_name: str
    entries: list[MetricComparison]

    def get(self, group, organ, metric) -> MetricComparison:
        for e in self.entries:
            if (e.group, e.organ, e.metric) == (group, organ, metric):
                return e
        raise KeyError((group, organ, metric))

    @property
    def groups(self):
        return list(dict.fromkeys(e.group for e in self.entries))

    @property
    def organs(self):
        return list(dict.fromkeys(e.organ for e in self.entries))


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean()) if len(v) else math.nan
    std = float(v.std(ddof=1)) if len(v) >= 2 else math.nan
    return mean, std


def compare_cohorts(real: list[MetricRow], synth: list[MetricRow], real_name="Real",
                    synth_name="Synthetic", organs=TABLE_ORGANS) -> CohortComparison:
    """Per group / organ / metric: mean, sample std, signed mean difference % and Welch p."""
    groups = list(dict.fromkeys([r.group for r in real] + [r.group for r in synth]))
    entries = []
    for group in groups:
        for organ in organs:
            r_rows = [r for r in real if r.group == group and r.organ == organ]
            s_rows = [r for r in synth if r.group == group and r.organ == organ]
            if not r_rows or not s_rows:
                continue
            for metric in METRICS:
                rv = [getattr(r, metric) for r in r_rows]
                sv = [getattr(r, metric) for r in s_rows]
                rv = [v for v in rv if not math.isnan(v)]
                sv = [v for v in sv if not math.isnan(v)]
                rm, rs = _mean_std(rv)
                sm, ss = _mean_std(sv)
                diff = (sm - rm) / rm * 100.0 if rm else math.nan
                w = welch_ttest(rv, sv)
                entries.append(MetricComparison(group, organ, metric, rm, rs, sm, ss, len(rv),
                                                len(sv), diff, w.t, w.p, w.flag))
    return CohortComparison(real_name, synth_name, entries)


# --- report / CSV -------------------------------------------------------------

def format_cell(mean, std, star=False) -> str:
    cell = f"{mean:.2f}±{std:.2f}" if not math.isnan(std) else f"{mean:.2f}"
    return cell + ("*" if star else "")


def format_diff(pct) -> str:
    return "-" if pct is None or math.isnan(pct) else f"({pct:.1f}%)"


def emit_report(comparisons, demographics=None) -> str:
    """Text table of organ-wise results, one block per organ and one column group per sex.

    ``comparisons`` is one :class:`CohortComparison` or a list sharing a real
    cohort; each adds a synthetic column per group.  ``demographics`` maps a
    group name to a list of DemographicVector for the header block.
    """
    if isinstance(comparisons, CohortComparison):
        comparisons = [comparisons]
    first = comparisons[0]
    groups = first.groups
    cols = [first.real_name] + [c.synth_name for c in comparisons]
    width = 16
    lines = []
    rule = "=" * (14 + len(groups) * len(cols) * (width + 1))
    header = " " * 14 + "".join(
        f"{g} (N = {first.get(g, first.organs[0], 'volume_L').n_real})".center(len(cols) * (width + 1))
        for g in groups)
    lines += [rule, header]
    if demographics:
        for field_, title in (("age", "Age (years)"), ("height", "Heights (cm)"),
                              ("weight", "Weights (kg)")):
            row = f"{title:<14}"
            for g in groups:
                vals = [getattr(d, field_) for d in demographics.get(g, [])]
                m, s = _mean_std(vals) if vals else (math.nan, math.nan)
                row += f"{m:.0f} ± {s:.0f}".center(len(cols) * (width + 1))
            lines.append(row)
    for organ in first.organs:
        lines += [rule, f"Measurement in {organ.capitalize()}".center(len(rule)),
                  f"{'Method':<14}" + "".join(f"{c:>{width}} " for _ in groups for c in cols),
                  "-" * len(rule)]
        for metric in METRICS:
            top = f"{METRIC_TITLES[metric]:<14}"
            bottom = " " * 14
            for g in groups:
                ref = first.get(g, organ, metric)
                top += f"{format_cell(ref.real_mean, ref.real_std):>{width}} "
                bottom += f"{'-':>{width}} "
                for comp in comparisons:
                    e = comp.get(g, organ, metric)
                    top += f"{format_cell(e.synth_mean, e.synth_std, e.significant):>{width}} "
                    bottom += f"{format_diff(e.diff_pct):>{width}} "
            lines += [top, bottom]
    lines += [rule, "* p < 0.05 vs " + first.real_name + " (Welch two-sided t-test). "
              "Data are Mean ± Std (Mean difference %)."]
    return "\n".join(lines) + "\n"


_COMPARISON_FIELDS = [f.name for f in fields(MetricComparison)]


def _fmt(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def write_comparison_csv(path, comparison: CohortComparison) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["real_name", "synth_name"] + _COMPARISON_FIELDS)
        for e in comparison.entries:
            w.writerow([comparison.real_name, comparison.synth_name]
                       + [_fmt(getattr(e, k)) for k in _COMPARISON_FIELDS])


def read_comparison_csv(path) -> CohortComparison:
    entries, names = [], ("Real", "Synthetic")
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            names = (row["real_name"], row["synth_name"])
            entries.append(MetricComparison(
                row["group"], row["organ"], row["metric"],
                float(row["real_mean"]), float(row["real_std"]),
                float(row["synth_mean"]), float(row["synth_std"]),
                int(row["n_real"]), int(row["n_synth"]), float(row["diff_pct"]),
                float(row["t"]), float(row["p"]) if row["p"] else None, row["flag"]))
    return CohortComparison(names[0], names[1], entries)


METRIC_CSV_FIELDS = ["subject_id", "group", "organ", "volume_L", "suv_mean", "suv_max"]


def write_metrics_csv(path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_CSV_FIELDS)
        for r in rows:
            w.writerow([r.subject_id, r.group, r.organ, repr(r.volume_L), repr(r.suv_mean),
                        repr(r.suv_max)])


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [MetricRow(r["subject_id"], r["group"], r["organ"], float(r["volume_L"]),
                          float(r["suv_mean"]), float(r["suv_max"]))
                for r in csv.DictReader(fh)]


def subject_rows(subject_id, group, ct, pet, mask=None, organs=TABLE_ORGANS) -> list[MetricRow]:
    """Metric rows for one subject; segments the CT when no mask is given."""
    mask = threshold_segment(ct) if mask is None else mask
    rows = []
    for organ in organs:
        m = organ_metrics(ct, pet, mask, organ)
        rows.append(MetricRow(str(subject_id), group, organ, m.volume_L, m.suv_mean, m.suv_max))
    return rows


def sex_group(sex: int) -> str:
    return "Male" if int(sex) == 1 else "Female"


def save_report(directory, comparisons, demographics=None, stem="report") -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(comparisons, CohortComparison):
        comparisons = [comparisons]
    text = emit_report(comparisons, demographics)
    paths = {"report": directory / f"{stem}.txt"}
    paths["report"].write_text(text, encoding="utf-8")
    for comp in comparisons:
        p = directory / f"{stem}_{comp.synth_name.lower()}.csv"
        write_comparison_csv(p, comp)
        paths[comp.synth_name] = p
    return paths
