"""Command-line entry point: make-data, train-global, train-sr, sample, evaluate.

Every command reads one JSON config (optional) and applies ``--set key=value``
overrides and a few convenience flags on top.  Each run writes a
``manifest.json`` holding the resolved configuration, seeds and outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical fault.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import cascade, diffusion, evaluation, phantom, training
from .checkpoint import Checkpoint, CheckpointError, config_hash, load_checkpoint
from .network import PRESETS, NetConfig, ScoreNetwork
from .normalize import DemographicVector, NormalizationSpec, encode_demographics
from .volume import read_cvol, write_cvol

log = logging.getLogger("petcascade")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "workdir": "run",
    "net_preset": "toy",
    "objective": "edm",
    "cascade": cascade.CascadeConfig().to_dict(),
    "normalization": NormalizationSpec().to_dict(),
    "loss": {"p_mean": -1.2, "p_std": 1.2, "sigma_data": 0.5},
    "data": {"n_train": 100, "n_test": 20, "train_seed": 0, "test_seed": 1},
    "train_global": training.TrainConfig(steps=2000, ema_decay=0.995).to_dict(),
    "train_sr": training.TrainConfig(steps=1000, ema_decay=0.995).to_dict(),
    "sampler": {"churn": 0.0, "batch": 8},
    "sample": {"demographics": None, "seed": 0, "limit": None},
    "evaluate": {"real": None, "synthetic": {}},
    "workers": 1,
}


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --- configuration ---------------------------------------------------------------

def _merge(base, extra, path=""):
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("synthetic",):
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v
    return base


def _set(cfg, assignment):
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            _merge(cfg, json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for a in args.set or []:
        _set(cfg, a)
    if args.workdir:
        cfg["workdir"] = args.workdir
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "flow", False):
        cfg["objective"] = "flow"
    if getattr(args, "objective", None):
        cfg["objective"] = args.objective
    if getattr(args, "steps", None) is not None:
        cfg[args.command.replace("-", "_")]["steps"] = args.steps
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg["objective"] not in ("edm", "flow"):
        raise ConfigError(f"objective must be 'edm' or 'flow', got {cfg['objective']!r}")
    if cfg["net_preset"] not in PRESETS:
        raise ConfigError(f"unknown net_preset {cfg['net_preset']!r}; choose from {sorted(PRESETS)}")
    try:
        cascade_config(cfg)
        NormalizationSpec.from_dict(cfg["normalization"])
        for k in ("train_global", "train_sr"):
            training.TrainConfig(**cfg[k])
        diffusion.LossWeights(**cfg["loss"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["sampler"]["churn"] < 0:
        raise ConfigError("sampler.churn must be >= 0")
    if cfg["objective"] == "flow" and cfg["sampler"]["churn"] > 0:
        raise ConfigError("churn applies to the diffusion sampler only")


def cascade_config(cfg) -> cascade.CascadeConfig:
    return cascade.CascadeConfig.from_dict(cfg["cascade"])


def model_hash(cfg, stage) -> str:
    """Hash of everything a checkpoint must agree on with the run that uses it."""
    return config_hash({"stage": stage, "cascade": cfg["cascade"], "objective": cfg["objective"],
                        "normalization": cfg["normalization"], "net_preset": cfg["net_preset"]})


def paths(cfg) -> dict:
    w = Path(cfg["workdir"])
    return {"train": w / "data" / "train", "test": w / "data" / "test",
            "checkpoints": w / "checkpoints" / cfg["objective"],
            "samples": w / "samples" / cfg["objective"], "report": w / "report"}


def write_manifest(directory, command, cfg, **fields) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "version": version_string(), "seed": cfg["seed"],
                "objective": cfg["objective"], "config": cfg, **fields}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- data ----------------------------------------------------------------------

def _write_cohort(directory, cohort, prefix):
    directory.mkdir(parents=True, exist_ok=True)
    subjects = []
    for i, (spec, vols) in enumerate(cohort):
        sid = f"{prefix}{i:04d}"
        write_cvol(directory / f"{sid}_ct.cvol", vols.ct)
        write_cvol(directory / f"{sid}_pet.cvol", vols.pet)
        write_cvol(directory / f"{sid}_mask.cvol", vols.mask)
        subjects.append({"id": sid, "seed": spec.seed, "demographics": spec.demographics.to_dict()})
    (directory / "cohort.json").write_text(json.dumps(subjects, indent=2) + "\n", encoding="utf-8")
    return subjects


def load_cohort_index(directory) -> list[dict]:
    f = Path(directory) / "cohort.json"
    if not f.exists():
        raise DataError(f"no cohort.json in {directory}; run make-data first")
    return json.loads(f.read_text(encoding="utf-8"))


def load_model_space(directory, cfg):
    """Stacked (N, 2, X, Y, Z) model-space arrays and (N, 4) encoded demographics."""
    spec = NormalizationSpec.from_dict(cfg["normalization"])
    ccfg = cascade_config(cfg)
    arrays, demo = [], []
    for s in load_cohort_index(directory):
        try:
            ct = read_cvol(Path(directory) / f"{s['id']}_ct.cvol")
            pet = read_cvol(Path(directory) / f"{s['id']}_pet.cvol")
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        if ct.dims != ccfg.hr_dims:
            raise DataError(f"{s['id']}: dims {ct.dims} do not match hr_dims {ccfg.hr_dims}")
        arrays.append(cascade.to_model_space(ct, pet, spec))
        demo.append(encode_demographics(DemographicVector.from_dict(s["demographics"])))
    if not arrays:
        raise DataError(f"empty cohort in {directory}")
    return np.stack(arrays), np.stack(demo)


def cmd_make_data(cfg, args):
    ccfg = cascade_config(cfg)
    p = paths(cfg)
    d = cfg["data"]
    out = {}
    for split, n, seed, prefix in (("train", d["n_train"], d["train_seed"], "T"),
                                   ("test", d["n_test"], d["test_seed"], "R")):
        if n <= 0:
            continue
        cohort = phantom.make_cohort(n, ccfg.hr_dims, ccfg.hr_spacing_mm, seed=seed)
        subjects = _write_cohort(p[split], cohort, prefix)
        out[split] = [s["id"] for s in subjects]
        log.info("wrote %d %s phantoms to %s", n, split, p[split])
    write_manifest(Path(cfg["workdir"]) / "data", "make-data", cfg, subjects=out)
    return 0


# --- training ------------------------------------------------------------------

def build_network(cfg, stage, sigma_data=None) -> ScoreNetwork:
    kw = dict(PRESETS[cfg["net_preset"]])
    kw["objective"] = cfg["objective"]
    kw["sigma_data"] = cfg["loss"]["sigma_data"] if sigma_data is None else sigma_data
    if stage == "sr":
        kw.update(image_cond_channels=2, use_position=True)
    seed = cfg["seed"] * 2 + (0 if stage == "global" else 1)
    return ScoreNetwork(NetConfig(**kw), seed=seed)


def _objective_name(cfg, stage):
    if cfg["objective"] == "flow":
        return "flow_matching_velocity"
    return "edm_denoising" if stage == "global" else "edm_patch_residual"


def _train(cfg, args, stage):
    ccfg = cascade_config(cfg)
    p = paths(cfg)
    hr, demo = load_model_space(p["train"], cfg)
    key = "train_global" if stage == "global" else "train_sr"
    tcfg = training.TrainConfig(**{**cfg[key], "seed": cfg[key]["seed"] + cfg["seed"]})
    sigma_data = None
    if stage == "sr" and cfg["objective"] == "edm":
        sigma_data = cascade.estimate_residual_sigma_data(hr, ccfg.factor)
        log.info("stage-2 sigma_data from residual statistics: %.5f", sigma_data)
    net = build_network(cfg, stage, sigma_data)
    weights = diffusion.LossWeights(net.config.sigma_data, cfg["loss"]["p_mean"], cfg["loss"]["p_std"])
    if stage == "global":
        loss_fn = training.global_loss_fn(net, hr, demo, ccfg.factor, tcfg, weights)
    else:
        loss_fn = training.sr_loss_fn(net, hr, demo, ccfg.factor, ccfg.sr_patch_extent, tcfg, weights)
    chash = model_hash(cfg, stage)
    meta = {"objective_name": _objective_name(cfg, stage), "train": tcfg.to_dict(),
            "cascade": cfg["cascade"], "loss": weights.to_dict()}
    result = training.run_training(net, loss_fn, tcfg, checkpoint_dir=p["checkpoints"], stage=stage,
                                   meta=meta, config_hash=chash, log=log.info)
    trace = p["checkpoints"] / f"{stage}_loss.csv"
    with open(trace, "w", encoding="utf-8") as fh:
        fh.write("step,loss,grad_norm\n")
        for i, (l, g) in enumerate(zip(result.losses, result.grad_norms)):
            fh.write(f"{i},{l!r},{g!r}\n")
    sm = training.smooth(result.losses, min(100, len(result.losses)))
    write_manifest(p["checkpoints"], f"train-{stage}", cfg, stage=stage, config_hash=chash,
                   objective_name=meta["objective_name"], sigma_data=net.config.sigma_data,
                   parameter_count=net.parameter_count(),
                   checkpoints=[str(c) for c in result.checkpoints], loss_trace=str(trace),
                   smoothed_loss={"initial": float(sm[0 if len(sm) < 100 else 99]), "final": float(sm[-1])})
    # keep one manifest per stage
    (p["checkpoints"] / "manifest.json").replace(p["checkpoints"] / f"{stage}_manifest.json")
    return 0


# --- sampling ------------------------------------------------------------------

def load_stage(cfg, stage) -> ScoreNetwork:
    path = paths(cfg)["checkpoints"] / f"{stage}.ckpt"
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    ck = load_checkpoint(path)
    expected = model_hash(cfg, stage)
    if ck.config_hash != expected:
        raise ConfigError(f"{path}: config hash {ck.config_hash} does not match run config {expected}")
    return ck.build_network()


def _demographic_requests(cfg):
    src = cfg["sample"]["demographics"]
    if src is None:
        entries = load_cohort_index(paths(cfg)["test"])
        reqs = [{"id": f"S{e['id'][1:]}", "demographics": e["demographics"]} for e in entries]
    elif isinstance(src, str):
        try:
            reqs = json.loads(Path(src).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read demographics {src}: {exc}") from exc
    else:
        reqs = src
    reqs = [r if "demographics" in r else {"demographics": r} for r in reqs]
    for i, r in enumerate(reqs):
        r.setdefault("id", f"S{i:04d}")
    limit = cfg["sample"]["limit"]
    return reqs[:limit] if limit else reqs


def _generate_group(cfg, items):
    """Worker body: items are (id, encoded demographics, seed)."""
    ccfg = cascade_config(cfg)
    spec = NormalizationSpec.from_dict(cfg["normalization"])
    g, s = load_stage(cfg, "global"), load_stage(cfg, "sr")
    demo = np.stack([d for _, d, _ in items])
    seeds = [sd for _, _, sd in items]
    return cascade.generate_batch(g, s, demo, ccfg, seeds, cfg["sampler"]["churn"], spec)


def cmd_sample(cfg, args):
    ccfg = cascade_config(cfg)
    out_dir = Path(args.out) if getattr(args, "out", None) else paths(cfg)["samples"]
    # fail early on missing or mismatched checkpoints
    load_stage(cfg, "global"), load_stage(cfg, "sr")
    items, subjects, skipped = [], [], []
    for i, r in enumerate(_demographic_requests(cfg)):
        try:
            d = DemographicVector.from_dict(r["demographics"]).validate()
        except (KeyError, TypeError, ValueError) as exc:
            log.warning("skipping %s: %s", r.get("id"), exc)
            skipped.append({"id": r.get("id"), "reason": str(exc)})
            continue
        seed = phantom.subject_seed(cfg["sample"]["seed"] + cfg["seed"], i)
        items.append((r["id"], encode_demographics(d), seed))
        subjects.append({"id": r["id"], "demographics": d.to_dict(), "seed": seed,
                         "group": evaluation.sex_group(d.sex)})
    batch = max(1, int(cfg["sampler"]["batch"]))
    groups = [items[i:i + batch] for i in range(0, len(items), batch)]
    if cfg["workers"] > 1 and len(groups) > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            results = list(pool.map(_generate_group, [cfg] * len(groups), groups))
    else:
        results = [_generate_group(cfg, grp) for grp in groups]
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for (sid, _, _), (ct, pet) in zip(items, (pair for res in results for pair in res)):
        for tag, vol in (("ct", ct), ("pet", pet)):
            f = out_dir / f"{sid}_{tag}.cvol"
            write_cvol(f, vol)
            files.append(f.name)
    (out_dir / "cohort.json").write_text(json.dumps(subjects, indent=2) + "\n", encoding="utf-8")
    sampler = cascade._sampler_for(load_stage(cfg, "global"), ccfg.global_steps, cfg["sampler"]["churn"])
    sr_sampler = cascade._sampler_for(load_stage(cfg, "sr"), ccfg.sr_steps)
    write_manifest(out_dir, "sample", cfg, subjects=subjects, skipped=skipped, outputs=files,
                   sampler={"mode": sampler.mode.value, "sr_mode": sr_sampler.mode.value,
                            "global_steps": ccfg.global_steps,
                            "sr_steps": ccfg.sr_steps, "churn": cfg["sampler"]["churn"]},
                   checkpoints={st: model_hash(cfg, st) for st in ("global", "sr")})
    log.info("wrote %d subjects (%d skipped) to %s", len(subjects), len(skipped), out_dir)
    return 0


# --- evaluation ----------------------------------------------------------------

def _cohort_rows(directory, workers=1):
    entries = load_cohort_index(directory)
    jobs = [(str(directory), e) for e in entries]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_subject_rows, jobs))
    else:
        rows = [_subject_rows(j) for j in jobs]
    demos = [DemographicVector.from_dict(e["demographics"]) for e in entries]
    return [r for rs in rows for r in rs], demos


def _subject_rows(job):
    directory, e = job
    try:
        ct = read_cvol(Path(directory) / f"{e['id']}_ct.cvol")
        pet = read_cvol(Path(directory) / f"{e['id']}_pet.cvol")
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    group = evaluation.sex_group(e["demographics"]["sex"])
    return evaluation.subject_rows(e["id"], group, ct, pet)


def cmd_evaluate(cfg, args):
    real_dir = Path(cfg["evaluate"]["real"] or paths(cfg)["test"])
    synth = dict(cfg["evaluate"]["synthetic"])
    if not synth:
        synth = {"Diffusion" if cfg["objective"] == "edm" else "Flow": str(paths(cfg)["samples"])}
    out_dir = Path(args.out) if getattr(args, "out", None) else paths(cfg)["report"]
    out_dir.mkdir(parents=True, exist_ok=True)
    real_rows, real_demo = _cohort_rows(real_dir, cfg["workers"])
    evaluation.write_metrics_csv(out_dir / "metrics_real.csv", real_rows)
    comparisons = []
    for name, directory in synth.items():
        rows, _ = _cohort_rows(directory, cfg["workers"])
        evaluation.write_metrics_csv(out_dir / f"metrics_{name.lower()}.csv", rows)
        comparisons.append(evaluation.compare_cohorts(real_rows, rows, "Phantom", name))
    groups = {}
    for d in real_demo:
        groups.setdefault(evaluation.sex_group(d.sex), []).append(d)
    written = evaluation.save_report(out_dir, comparisons, groups)
    sys.stdout.write(written["report"].read_text(encoding="utf-8"))
    write_manifest(out_dir, "evaluate", cfg, real=str(real_dir), synthetic=synth,
                   outputs=sorted(p.name for p in out_dir.iterdir() if p.name != "manifest.json"))
    return 0


# --- entry point -----------------------------------------------------------------

COMMANDS = {
    "make-data": (cmd_make_data, "generate train/test phantom cohorts as CVOL files"),
    "train-global": (lambda c, a: _train(c, a, "global"), "train the low-resolution global model"),
    "train-sr": (lambda c, a: _train(c, a, "sr"), "train the residual super-resolution model"),
    "sample": (cmd_sample, "generate subjects for a demographics list"),
    "evaluate": (cmd_evaluate, "organ-wise comparison report of real vs synthetic cohorts"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petcascade", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set train_global.lr=1e-3")
        p.add_argument("--workdir", help="root directory for data, checkpoints and outputs")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--objective", choices=("edm", "flow"), help="generative objective")
        p.add_argument("--flow", action="store_true", help="shorthand for --objective flow")
        p.add_argument("-q", "--quiet", action="store_true")
        if name.startswith("train"):
            p.add_argument("--steps", type=int, help="number of optimisation steps")
        if name in ("sample", "evaluate"):
            p.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except FloatingPointError as exc:
        diag = getattr(exc, "diagnostics", {"step": getattr(exc, "step", None)})
        dump = Path(cfg["workdir"]) / "fault.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"error": str(exc), "diagnostics": diag}, indent=2) + "\n")
        log.error("numerical fault: %s (diagnostics in %s)", exc, dump)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
