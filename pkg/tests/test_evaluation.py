import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from petcascade import evaluation as ev
from petcascade import phantom
from petcascade.normalize import DemographicVector
from petcascade.volume import Modality, VoxelVolume

from welch_reference import welch_reference


def volumes(mask, pet=None, spacing=(2.0, 2.0, 2.0)):
    mask = np.asarray(mask, dtype=np.float32)
    pet = np.zeros_like(mask) if pet is None else np.asarray(pet, dtype=np.float32)
    return (VoxelVolume(np.zeros_like(mask), spacing, Modality.CT),
            VoxelVolume(pet, spacing, Modality.PET),
            VoxelVolume(mask, spacing, Modality.MASK))


def test_organ_volume_unit_arithmetic():
    mask = np.zeros((60, 60, 60))
    mask[:50, :50, :50] = phantom.LIVER
    m = ev.organ_metrics(*volumes(mask), "liver")
    assert m.volume_L == pytest.approx(1.000, abs=1e-12)


@given(spacing=st.tuples(*[st.floats(0.25, 8.0)] * 3), count=st.integers(1, 500))
def test_volume_equals_count_times_voxel_size(spacing, count):
    mask = np.zeros(1000)
    mask[:count] = phantom.HEART
    m = ev.organ_metrics(*volumes(mask.reshape(10, 10, 10), spacing=spacing), phantom.HEART)
    assert m.volume_L == pytest.approx(count * spacing[0] * spacing[1] * spacing[2] / 1e6, rel=1e-12)


def test_suv_mean_and_max():
    mask = np.zeros((2, 2, 2))
    pet = np.zeros((2, 2, 2))
    mask[0, 0, 0] = mask[1, 1, 1] = phantom.KIDNEYS
    pet[0, 0, 0], pet[1, 1, 1], pet[0, 1, 0] = 2.0, 4.0, 99.0
    m = ev.organ_metrics(*volumes(mask, pet), "kidneys")
    assert (m.suv_mean, m.suv_max, m.organ) == (3.0, 4.0, "kidneys")


@given(st.lists(st.floats(0, 25), min_size=1, max_size=30))
def test_suv_max_not_below_mean(values):
    mask = np.full((len(values), 1, 1), phantom.LIVER)
    m = ev.organ_metrics(*volumes(mask, np.array(values).reshape(-1, 1, 1)), "liver")
    assert m.suv_max >= m.suv_mean - 1e-6


def test_empty_mask_flags_absent():
    m = ev.organ_metrics(*volumes(np.zeros((3, 3, 3))), "heart")
    assert m.volume_L == 0.0 and not m.present and math.isnan(m.suv_mean)


def test_dims_mismatch_rejected():
    ct, pet, mask = volumes(np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        ev.organ_metrics(ct, VoxelVolume(np.zeros((3, 3, 2)), pet.spacing_mm), mask, "liver")


# --- segmentation -------------------------------------------------------------

@pytest.mark.parametrize("dims,spacing,sex", [((32, 32, 48), 12.0, 1), ((64, 64, 96), 6.0, 0)])
def test_self_segmentation_dice(dims, spacing, sex):
    demo = DemographicVector(50.0, sex, 170.0, 75.0)
    vols = phantom.synthesize_phantom(phantom.build_spec(demo, seed=11), dims, (spacing,) * 3)
    seg = ev.threshold_segment(vols.ct)
    for organ in ("liver", "heart", "kidneys", "lungs", "body"):
        lab = phantom.LABELS[organ]
        assert ev.dice(seg.data == lab, vols.mask.data == lab) > 0.95, organ


def test_all_air_has_no_organs():
    seg = ev.threshold_segment(VoxelVolume(np.full((8, 8, 8), -1000.0), (2.0,) * 3))
    assert not np.any(seg.data)
    ct = VoxelVolume(np.full((8, 8, 8), -1000.0), (2.0,) * 3)
    m = ev.organ_metrics(ct, ct, seg, "liver")
    assert not m.present


def test_segmentation_deterministic():
    vols = phantom.synthesize_phantom(phantom.build_spec(DemographicVector(40.0, 1, 180.0, 90.0), 2),
                                      (32, 32, 48), (12.0,) * 3)
    a = ev.threshold_segment(vols.ct).data
    assert np.array_equal(a, ev.threshold_segment(vols.ct).data)


def test_dice_edge_cases():
    assert ev.dice(np.zeros(4), np.zeros(4)) == 1.0
    assert ev.dice([1, 1, 0, 0], [1, 0, 0, 0]) == pytest.approx(2 / 3)


# --- statistics ---------------------------------------------------------------

def test_welch_matches_high_precision_reference():
    rng = np.random.default_rng(123)
    for i in range(5):
        a = rng.normal(1.5, 0.3 + 0.1 * i, size=8 + 3 * i)
        b = rng.normal(1.6, 0.5, size=12 - i)
        res = ev.welch_ttest(a, b)
        t, df, p = welch_reference(a, b)
        assert res.t == pytest.approx(t, rel=1e-10)
        assert res.df == pytest.approx(df, rel=1e-10)
        assert abs(res.p - p) < 1e-6


def test_welch_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 9), rng.normal(0.5, 2, 6)
    ab, ba = ev.welch_ttest(a, b), ev.welch_ttest(b, a)
    assert ab.t == pytest.approx(-ba.t) and ab.p == pytest.approx(ba.p)


def test_welch_degenerate_and_undefined():
    d = ev.welch_ttest([0, 0, 0, 0], [1, 1, 1, 1])
    assert d.flag == "degenerate" and d.p is None and d.t == math.inf
    same = ev.welch_ttest([2, 2, 2], [2, 2, 2])
    assert same.flag == "degenerate" and same.p == 1.0
    assert ev.welch_ttest([1.0], [1.0, 2.0]).flag == "undefined"


def rows(values, group="Male", organ="liver", prefix="S"):
    return [ev.MetricRow(f"{prefix}{i}", group, organ, v, v * 2, v * 3) for i, v in enumerate(values)]


def test_compare_identical_cohorts_is_zero_difference():
    real = rows([1.2, 1.5, 1.9, 1.4]) + rows([1.0, 1.1, 1.3], group="Female")
    comp = ev.compare_cohorts(real, real, organs=("liver",))
    assert len(comp.entries) == 6
    for e in comp.entries:
        assert e.diff_pct == 0.0 and e.t == 0.0 and e.p == 1.0 and not e.significant


def test_compare_statistics():
    real, synth = rows([1.0, 2.0, 3.0]), rows([2.0, 3.0, 4.0, 5.0])
    e = ev.compare_cohorts(real, synth, organs=("liver",)).get("Male", "liver", "volume_L")
    assert e.real_mean == 2.0 and e.real_std == pytest.approx(1.0)
    assert e.synth_mean == 3.5 and e.diff_pct == pytest.approx(75.0)
    assert e.p == pytest.approx(welch_reference([1, 2, 3], [2, 3, 4, 5])[2], abs=1e-9)


def test_degenerate_group_is_flagged_and_starred():
    e = ev.compare_cohorts(rows([0.5] * 4), rows([1.0] * 4), organs=("liver",)).get(
        "Male", "liver", "volume_L")
    assert e.flag == "degenerate" and e.p is None and e.significant


def test_report_format_and_stars():
    real = rows([1.32, 1.76, 2.20]) + rows([1.0, 1.2, 1.4], group="Female")
    synth = rows([3.0, 3.1, 3.2], prefix="G") + rows([1.0, 1.2, 1.4], group="Female", prefix="G")
    comp = ev.compare_cohorts(real, synth, organs=("liver",))
    text = ev.emit_report(comp)
    assert "1.76±0.44" in text
    assert "3.10±0.10*" in text
    assert "(0.0%)" in text
    assert "Measurement in Liver" in text


def test_comparison_csv_round_trip(tmp_path):
    real = rows([1.1, 1.7, 1.4, 1.9]) + rows([0.0] * 3, organ="heart")
    synth = rows([1.0, 1.2, 1.6]) + rows([0.0] * 3, organ="heart")
    comp = ev.compare_cohorts(real, synth, organs=("liver", "heart"))
    p = tmp_path / "c.csv"
    ev.write_comparison_csv(p, comp)
    back = ev.read_comparison_csv(p)
    assert (back.real_name, back.synth_name) == (comp.real_name, comp.synth_name)
    for x, y in zip(comp.entries, back.entries):
        for field in x.__dataclass_fields__:
            a, b = getattr(x, field), getattr(y, field)
            assert a == b or (isinstance(a, float) and math.isnan(a) and math.isnan(b)), field


def test_metrics_csv_round_trip(tmp_path):
    r = rows([1 / 3, 2 / 7, 0.1])
    ev.write_metrics_csv(tmp_path / "m.csv", r)
    assert ev.read_metrics_csv(tmp_path / "m.csv") == r
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "subject_id,group,organ,volume_L,suv_mean,suv_max"
