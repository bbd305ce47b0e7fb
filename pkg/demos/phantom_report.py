"""Two phantom cohorts through the evaluation harness.

The second cohort is built with heavier subjects, so the liver row should
show a positive, starred difference while the heart (weight independent) stays flat.
"""
from petcascade import evaluation as ev
from petcascade import phantom

DIMS, SPACING = (32, 32, 48), (12.0, 12.0, 12.0)


def cohort_rows(specs, prefix):
    rows, demos = [], {}
    for i, spec in enumerate(specs):
        vols = phantom.synthesize_phantom(spec, DIMS, SPACING)
        group = ev.sex_group(spec.demographics.sex)
        rows += ev.subject_rows(f"{prefix}{i:03d}", group, vols.ct, vols.pet)
        demos.setdefault(group, []).append(spec.demographics)
    return rows, demos

base = [spec for spec, _ in phantom.make_cohort(30, DIMS, SPACING, seed=3, synthesize=False)]
heavy = [phantom.with_demographics(spec, weight=min(spec.demographics.weight * 1.3, 250.0))
         for spec in base]
real_rows, demos = cohort_rows(base, "R")
heavy_rows, _ = cohort_rows(heavy, "H")
print(ev.emit_report(ev.compare_cohorts(real_rows, heavy_rows, "Phantom", "Heavier"), demos))
