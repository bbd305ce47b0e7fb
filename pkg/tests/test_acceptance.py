"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criterion 6 runs the whole pipeline through the CLI at the desk preset and
takes tens of minutes on one CPU core.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from petcascade import autodiff as ad
from petcascade import cascade as cas
from petcascade import cli
from petcascade import diffusion as dif
from petcascade import evaluation as ev
from petcascade import phantom
from petcascade.network import NetConfig, Preconditioner, ScoreNetwork
from petcascade.normalize import DemographicVector, denormalize_suv, normalize_suv
from petcascade.training import smooth
from petcascade.volume import Modality, SubsampleOffset, VoxelVolume, subsample_family, trilinear_resize

from acceptance_log import record
from gradcheck import check_op, numeric_grad, rel_err
from test_autodiff import PRIMITIVES
from welch_reference import welch_reference

DESK = cas.CASCADE_PRESETS["desk"]


def gaussian_denoiser(mu, s):
    def D(x, sigma):
        sig = np.asarray(sigma).reshape((-1,) + (1,) * (x.ndim - 1))
        return (s * s * x + sig * sig * mu) / (s * s + sig * sig)
    return D


# --- 1 ------------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    prim = {name: check_op(op, inputs) for name, (op, inputs) in PRIMITIVES.items()}
    worst_prim = max(prim.values())

    toy = NetConfig(base_channels=8, emb_dim=32)
    worst32, worst64 = 0.0, 0.0
    for cfg in (toy, NetConfig(**{**toy.to_dict(), "image_cond_channels": 2, "use_position": True})):
        net = ScoreNetwork(cfg, seed=1)
        rng = np.random.default_rng(2)
        for k in ("out.weight", "out.bias"):
            net.params[k].data = (0.1 * rng.standard_normal(net.params[k].shape)).astype(np.float32)
        x = rng.standard_normal((2, 2, 4, 4, 6))
        sigma, cond = np.array([0.3, 2.0]), rng.uniform(0, 1, (2, 4))
        pos = rng.uniform(0, 1, (2, 3)) if cfg.use_position else None
        ic = rng.uniform(0, 1, (2, 2, 4, 4, 6)) if cfg.image_cond_channels else None
        proj = rng.standard_normal(x.shape)
        net.denoise(x, sigma, cond, pos, ic)
        g32 = net.backward(proj)
        shadow = net.astype(np.float64)

        def f():
            return float(np.sum(shadow.denoise(x, sigma, cond, pos, ic) * proj))
        f()
        g64 = shadow.backward(proj)
        for name in sorted(net.params):
            idx, num = numeric_grad(f, shadow.params[name].data, 1e-6, 6, rng)
            worst64 = max(worst64, rel_err(g64[name].reshape(-1)[idx], num))
            worst32 = max(worst32, rel_err(g32[name].reshape(-1)[idx], num))
    elapsed = time.perf_counter() - t0
    ok = worst_prim < 1e-6 and worst32 < 1e-2 and worst64 < 1e-6 and elapsed < 120
    record(1, "gradient fidelity", ok,
           f"primitives max rel err {worst_prim:.2e} (<1e-6), network f64 {worst64:.2e} (<1e-6), "
           f"f32 {worst32:.2e} (<1e-2), {elapsed:.0f}s (<120s)")
    assert ok


# --- 2 ------------------------------------------------------------------------------

def test_criterion_2_sampler_oracle():
    t0 = time.perf_counter()
    mu, s = 0.4, 0.7
    D = gaussian_denoiser(mu, s)
    sched = dif.build_schedule(35)
    ode = dif.sample_ode(D, (1, 10_000), sched, dif.SamplerConfig(n_steps=35, seed=0))
    sde = dif.sample_sde(D, (1, 10_000), sched, dif.SamplerConfig("sde_euler", 35, 0.0, 0))
    std_err = abs(ode.std() - s) / s
    mean_err = abs(ode.mean() - mu) / s
    same = ode.tobytes() == sde.tobytes()
    elapsed = time.perf_counter() - t0
    ok = std_err < 0.03 and mean_err < 0.05 and same and elapsed < 60
    record(2, "sampler oracle", ok,
           f"std rel err {std_err:.4f} (<0.03), |mean err|/s {mean_err:.4f} (<0.05), "
           f"churn=0 SDE bit-identical {same}, {elapsed:.1f}s (<60s)")
    assert ok


# --- 3 ------------------------------------------------------------------------------

def test_criterion_3_solver_order():
    mu, s = 0.4, 0.7
    D = gaussian_denoiser(mu, s)
    steps = [5, 10, 20, 40]
    errs = []
    for n in steps:
        sched = dif.build_schedule(n)
        x = dif.sample_ode(D, (1, 256), sched, dif.SamplerConfig(n_steps=n, seed=3))
        x_T = dif.per_sample_normal(3, None, 0, dif.ROLE_INIT, (1, 256)) * sched.sigma_max
        # the probability-flow ODE keeps (x - mu) / sqrt(s^2 + sigma^2) constant
        exact = mu + (x_T - mu) * s / math.sqrt(s * s + sched.sigma_max ** 2)
        errs.append(float(np.max(np.abs(x - exact))))
    slope = -np.polyfit(np.log(steps), np.log(errs), 1)[0]
    ok = 1.5 <= slope <= 2.5
    record(3, "solver order", ok, f"log-log slope {slope:.3f} in [1.5, 2.5]; errors "
           + ", ".join(f"{e:.2e}" for e in errs))
    assert ok


# --- 4 ------------------------------------------------------------------------------

class PointwiseDenoiser:
    class config:
        objective = "edm"

    pc = Preconditioner(0.3)

    def __call__(self, x, sigma, cond, image_cond):
        s = np.asarray(sigma).reshape(-1, 1, 1, 1, 1)
        return self.pc.c_skip(s) * x + self.pc.c_out(s) * np.tanh(image_cond - 0.4 + 0.7 * x)

    def denoise(self, x, sigma, cond, pos=None, image_cond=None):
        return self(x, sigma, cond, image_cond)

    def backward(self, upstream):
        return {}


def test_criterion_4_preprocessing_exactness():
    suv = np.linspace(0.0, 25.0, 250_001)
    suv_err = float(np.max(np.abs(denormalize_suv(normalize_suv(suv)) - suv)))

    rng = np.random.default_rng(4)
    hr = VoxelVolume(rng.standard_normal(DESK.hr_dims).astype(np.float32), DESK.hr_spacing_mm)
    fam = subsample_family(hr, DESK.factor)
    merged = np.sort(np.concatenate([v.data.ravel() for v in fam]))
    hits = np.zeros(hr.dims, dtype=int)
    for off in SubsampleOffset.all(DESK.factor):
        x, y, z = off.offset
        hits[x::2, y::2, z::2] += 1
    partition_ok = (len(fam) == DESK.factor ** 3 and merged.tobytes() == np.sort(hr.data.ravel()).tobytes()
                    and bool(np.all(hits == 1)))

    hrb = rng.uniform(0, 1, (3, 2) + DESK.hr_dims).astype(np.float32)
    lrb = hrb[..., ::2, ::2, ::2]
    demo = rng.uniform(0, 1, (3, 4))
    w = dif.LossWeights(sigma_data=0.3)
    net = PointwiseDenoiser()
    patched, _ = cas.sr_patch_loss(net, hrb, lrb, demo, w, seed=5, step=7,
                                   patch_extent=DESK.sr_patch_extent, patches="all", need_grad=False)
    full = cas.full_volume_residual_loss(net, hrb, lrb, demo, w, seed=5, step=7)
    loss_rel = abs(patched - full) / abs(full)
    ok = suv_err < 1e-5 and partition_ok and loss_rel < 1e-5
    record(4, "preprocessing exactness", ok,
           f"SUV round trip max err {suv_err:.2e} (<1e-5), {len(fam)} strided volumes partition HR "
           f"{partition_ok}, patch-sum vs full loss rel diff {loss_rel:.2e} (<1e-5)")
    assert ok


# --- 5 ------------------------------------------------------------------------------

class ZeroResidualOracle:
    class config:
        objective = "edm"
        out_channels = 2

    def bind(self, cond, pos=None, image_cond=None):
        return lambda x, sigma: np.zeros_like(x)


def test_criterion_5_residual_cascade_identity():
    spec = phantom.build_spec(DemographicVector(55.0, 1, 178.0, 84.0), seed=21)
    vols = phantom.synthesize_phantom(spec, DESK.hr_dims, DESK.hr_spacing_mm)
    exact = True
    for v in (vols.ct, vols.pet):
        for lr in subsample_family(v, DESK.factor):
            ilu, res = cas.make_residual_target(v, lr)
            exact &= res.reconstruct().data.tobytes() == v.data.tobytes()
    model = cas.to_model_space(vols.ct, vols.pet)
    lr_pair = cas.from_model_space(model[:, ::2, ::2, ::2], DESK.lr_spacing_mm)
    lr_model = cas.to_model_space(*lr_pair)
    out = cas.super_resolve_batch(ZeroResidualOracle(), lr_model[None], np.ones((1, 4)), DESK, [0])[0]
    ilu = trilinear_resize(lr_model.astype(np.float64), DESK.hr_dims)
    zero_err = float(np.max(np.abs(out - ilu)))
    ok = exact and zero_err < 1e-4
    record(5, "residual cascade identity", ok,
           f"I_LU + R == I_HR bit-exact for all strided copies {exact}, "
           f"zero-residual SR max |out - I_LU| {zero_err:.2e} (<1e-4)")
    assert ok


# --- 6 ------------------------------------------------------------------------------

E2E_WEIGHTS = (50.0, 70.0, 90.0)
E2E_SUBJECTS = 20
E2E_CONFIG = {
    "net_preset": "desk",
    "data": {"n_train": 100, "n_test": 20},
    "train_global": {"steps": 2000, "batch_size": 8, "lr": 2e-3, "lr_decay_steps": 1000,
                     "ema_decay": 0.995},
    "train_sr": {"steps": 1600, "batch_size": 8, "lr": 2e-3, "lr_decay_steps": 1000,
                 "ema_decay": 0.995},
    # 35 Heun steps for stage 2 leaves room in the hour for the longer stage-2 training
    "cascade": {"sr_steps": 35},
    # stochastic sampling keeps generated livers connected; the deterministic ODE fragments them
    "sampler": {"churn": 0.2},
}


def e2e_demographics():
    return [{"id": f"G{i:04d}",
             "demographics": {"age": 60.0, "sex": i % 2, "height": 172.0,
                              "weight": E2E_WEIGHTS[i % len(E2E_WEIGHTS)]}}
            for i in range(E2E_SUBJECTS)]


def test_criterion_6_end_to_end_training(tmp_path):
    t0 = time.perf_counter()
    work = tmp_path / "e2e"
    demo_file = tmp_path / "demographics.json"
    demo_file.write_text(json.dumps(e2e_demographics()))
    cfg_file = tmp_path / "config.json"
    cfg_file.write_text(json.dumps({**E2E_CONFIG, "sample": {"demographics": str(demo_file)}}))
    base = ["--config", str(cfg_file), "--workdir", str(work), "-q"]
    codes = {cmd: cli.main([cmd, *base]) for cmd in
             ("make-data", "train-global", "train-sr", "sample", "evaluate")}
    elapsed = time.perf_counter() - t0
    assert set(codes.values()) == {0}, codes

    losses = np.loadtxt(work / "checkpoints" / "edm" / "global_loss.csv", delimiter=",",
                        skiprows=1, usecols=1)
    sm = smooth(losses, 100)
    initial, final = float(sm[99]), float(sm[-1])
    loss_ok = len(losses) >= 2000 and final < 0.5 * initial

    rows = ev.read_metrics_csv(work / "report" / "metrics_diffusion.csv")
    weight = {d["id"]: d["demographics"]["weight"] for d in e2e_demographics()}
    liver = [(weight[r.subject_id], r.volume_L) for r in rows if r.organ == "liver"]
    rho = float(spearmanr([w for w, _ in liver], [v for _, v in liver]).statistic)
    rho_ok = len(liver) == E2E_SUBJECTS and rho > 0.3

    text = (work / "report" / "report.txt").read_text(encoding="utf-8")
    comp = ev.read_comparison_csv(work / "report" / "report_diffusion.csv")
    n_sig = sum(e.significant for e in comp.entries)
    n_p = sum(e.p is not None and not math.isnan(e.p) for e in comp.entries)
    stars = text.count("*") - 1  # one in the footnote
    report_ok = (all(f"Measurement in {o}" in text for o in ("Liver", "Heart", "Kidneys"))
                 and "* p < 0.05" in text and stars == n_sig and n_p > 0)
    time_ok = elapsed <= 3600
    ok = loss_ok and rho_ok and report_ok and time_ok
    record(6, "end-to-end training", ok,
           f"(a) smoothed loss {initial:.4f} -> {final:.4f} over {len(losses)} steps "
           f"(final < 0.5x initial: {loss_ok}); (b) liver volume vs weight Spearman {rho:.3f} "
           f"over {len(liver)} subjects (>0.3); (c) report blocks present, {n_p} p-values, "
           f"{stars} starred cells == {n_sig} significant: {report_ok}; {elapsed / 60:.1f} min (<=60)")
    assert loss_ok, (initial, final)
    assert report_ok
    assert time_ok, elapsed
    assert rho_ok, rho


# --- 7 ------------------------------------------------------------------------------

def test_criterion_7_eval_protocol():
    mask = np.zeros((60, 60, 60), dtype=np.float32)
    mask[:50, :50, :50] = phantom.LIVER  # 125,000 voxels
    zeros = VoxelVolume(np.zeros_like(mask), (2.0, 2.0, 2.0), Modality.CT)
    vol_L = ev.organ_metrics(zeros, zeros, VoxelVolume(mask, (2.0,) * 3, Modality.MASK), "liver").volume_L
    unit_ok = abs(vol_L - 1.0) < 1e-12

    rng = np.random.default_rng(77)
    p_err = 0.0
    for i in range(8):
        a = rng.normal(1.0 + 0.1 * i, 0.2 + 0.05 * i, size=5 + 2 * i)
        b = rng.normal(1.1, 0.4, size=14 - i)
        p_err = max(p_err, abs(ev.welch_ttest(a, b).p - welch_reference(a, b)[2]))
    welch_ok = p_err < 1e-6

    cohort = phantom.make_cohort(8, DESK.hr_dims, DESK.hr_spacing_mm, seed=12)
    worst_dice = 1.0
    rows = []
    for i, (spec, vols) in enumerate(cohort):
        seg = ev.threshold_segment(vols.ct)
        for organ in ("liver", "heart", "kidneys", "lungs", "body"):
            lab = phantom.LABELS[organ]
            worst_dice = min(worst_dice, ev.dice(seg.data == lab, vols.mask.data == lab))
        rows += ev.subject_rows(f"R{i}", ev.sex_group(spec.demographics.sex), vols.ct, vols.pet)
    dice_ok = worst_dice > 0.95
    comp = ev.compare_cohorts(rows, rows)
    zero_ok = all(e.diff_pct == 0.0 and not e.significant for e in comp.entries)
    ok = unit_ok and welch_ok and dice_ok and zero_ok
    record(7, "evaluation protocol", ok,
           f"125,000 voxels @ 2 mm = {vol_L:.6f} L, Welch p max err {p_err:.1e} (<1e-6), "
           f"min Dice {worst_dice:.4f} (>0.95), real-vs-real all 0% {zero_ok}")
    assert ok


# --- 8 ------------------------------------------------------------------------------

def _small_run(tmp_path, name, *extra):
    work = tmp_path / name
    cfg = tmp_path / "det.json"
    cfg.write_text(json.dumps({
        "data": {"n_train": 6, "n_test": 3},
        "cascade": {**DESK.to_dict(), "global_steps": 6, "sr_steps": 4},
        "train_global": {"steps": 20, "batch_size": 4},
        "train_sr": {"steps": 20, "batch_size": 4},
        "sample": {"limit": 2},
    }))
    base = ["--config", str(cfg), "--workdir", str(work), "-q", *extra]
    for cmd in ("make-data", "train-global", "train-sr", "sample", "evaluate"):
        assert cli.main([cmd, *base]) == 0, cmd
    return work


def _artifacts(work, objective="edm"):
    files = sorted((work / "checkpoints" / objective).glob("*.ckpt"))
    files += sorted((work / "samples" / objective).glob("*.cvol"))
    files += [work / "report" / "report.txt"] + sorted((work / "report").glob("*.csv"))
    return {str(f.relative_to(work)): f.read_bytes() for f in files}


def test_criterion_8_determinism(tmp_path):
    a, b = _artifacts(_small_run(tmp_path, "run1")), _artifacts(_small_run(tmp_path, "run2"))
    differing = sorted(k for k in a if a[k] != b.get(k))
    kinds = {k.rsplit(".", 1)[1] for k in a}
    ok = a.keys() == b.keys() and not differing and {"ckpt", "cvol", "txt", "csv"} <= kinds
    record(8, "determinism", ok, f"{len(a)} artifacts (checkpoints, samples, reports) compared "
           f"byte-for-byte across two runs; differing: {differing or 'none'}")
    assert ok


# --- 9 ------------------------------------------------------------------------------

class OracleVelocityNet:
    class config:
        objective = "flow"

    def __init__(self, clean):
        self.clean = clean

    def velocity(self, x, t, cond, pos=None, image_cond=None):
        tb = np.asarray(t).reshape((-1,) + (1,) * (x.ndim - 1))
        return self.clean - (x - tb * self.clean) / (1 - tb)

    def backward(self, upstream):
        return {}


def test_criterion_9_flow_matching_arm(tmp_path):
    clean = np.random.default_rng(0).uniform(size=(4, 2, 4, 4, 6))
    loss, _ = dif.flow_matching_loss(OracleVelocityNet(clean), clean, np.zeros((4, 4)), seed=2, step=3)
    loss_ok = abs(loss) < 1e-20

    s = 0.5

    def v(x, t):
        t = np.asarray(t).reshape((-1,) + (1,) * (x.ndim - 1))
        return x * (t * s * s - (1 - t)) / ((1 - t) ** 2 + (t * s) ** 2)
    x = dif.sample_flow(v, (1, 10_000), 200, seed=0, t_end=0.5)
    target = math.sqrt(0.25 + 0.25 * s * s)
    std_err = abs(x.std() - target) / target
    std_ok = std_err < 0.03

    work = _small_run(tmp_path, "arm")
    cfg = tmp_path / "det.json"
    base = ["--config", str(cfg), "--workdir", str(work), "-q", "--flow"]
    codes = [cli.main([cmd, *base]) for cmd in ("train-global", "train-sr", "sample")]
    man = {o: json.loads((work / "samples" / o / "manifest.json").read_text()) for o in ("edm", "flow")}
    gm = {o: json.loads((work / "checkpoints" / o / "global_manifest.json").read_text())
          for o in ("edm", "flow")}
    distinct = (man["edm"]["sampler"]["mode"] == "ode_heun" and man["flow"]["sampler"]["mode"] == "flow_euler"
                and gm["edm"]["objective_name"] == "edm_denoising"
                and gm["flow"]["objective_name"] == "flow_matching_velocity"
                and man["edm"]["checkpoints"] != man["flow"]["checkpoints"])
    cli_ok = codes == [0, 0, 0] and distinct and len(list((work / "samples" / "flow").glob("*.cvol"))) == 4
    ok = loss_ok and std_ok and cli_ok
    record(9, "flow-matching arm", ok,
           f"oracle velocity loss {loss:.1e}, path std at t=0.5 rel err {std_err:.4f} (<0.03), "
           f"CLI train+sample exit codes {codes}, distinct manifests {distinct}")
    assert ok
