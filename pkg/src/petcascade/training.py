"""Training loops for the global and super-resolution stages.

Batches are drawn from a stream keyed by (seed, step), so a run is a pure
function of its configuration: the same seed gives the same loss trace.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffusion as dif
from .cascade import sr_patch_loss
from .checkpoint import Checkpoint, save_checkpoint
from .network import Adam, ScoreNetwork
from .volume import SubsampleOffset


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    lr_decay_steps: int = 0          # inverse-sqrt decay after this many steps; 0 = constant
    warmup_steps: int = 50
    grad_clip: float = 1.0
    ema_decay: float = 0.0           # 0 disables the weight average
    seed: int = 0
    checkpoint_every: int = 0

    def lr_at(self, step: int) -> float:
        lr = self.lr
        if self.warmup_steps:
            lr *= min(1.0, (step + 1) / self.warmup_steps)
        if self.lr_decay_steps:
            lr /= math.sqrt(max(step / self.lr_decay_steps, 1.0))
        return lr

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    net: ScoreNetwork
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def smooth(trace, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(trace, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def draw_batch(seed, step, n_subjects, batch_size, factor):
    """Subject indices and strided-copy indices for one step."""
    rng = dif.keyed_rng(seed, step, dif.ROLE_BATCH)
    subjects = rng.integers(n_subjects, size=batch_size)
    offsets = rng.integers(factor ** 3, size=batch_size)
    return subjects, offsets


def _strided(hr, offset_index, factor):
    x, y, z = SubsampleOffset.all(factor)[offset_index].offset
    return hr[..., x::factor, y::factor, z::factor]


def run_training(net: ScoreNetwork, loss_fn: Callable, cfg: TrainConfig, checkpoint_dir=None,
                 stage="global", meta=None, config_hash="", log: Callable | None = None) -> TrainResult:
    """Generic loop: ``loss_fn(step) -> (loss, grads)`` then one Adam update."""
    opt = Adam(net.params, lr=cfg.lr, grad_clip=cfg.grad_clip)
    ema = {k: p.data.astype(np.float64) for k, p in net.params.items()} if cfg.ema_decay else None
    result = TrainResult(net)
    for step in range(cfg.steps):
        loss, grads = loss_fn(step)
        norm = opt.step(grads, lr=cfg.lr_at(step))
        if not math.isfinite(norm):
            per = {k: float(np.sqrt(np.sum(np.square(g, dtype=np.float64)))) for k, g in grads.items()}
            raise dif.TrainingFault("non-finite gradient", {"step": step, "loss": loss,
                                                            "grad_norms": per})
        if ema is not None:
            d = cfg.ema_decay
            for k, p in net.params.items():
                ema[k] = d * ema[k] + (1 - d) * p.data
        result.losses.append(loss)
        result.grad_norms.append(norm)
        if log and (step % 100 == 0 or step == cfg.steps - 1):
            log(f"{stage} step {step:5d} loss {loss:.5f} |g| {norm:.3f}")
        last = step == cfg.steps - 1
        if checkpoint_dir is not None and (last or (cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0)):
            result.checkpoints.append(_save(net, ema, step + 1, checkpoint_dir, stage, meta,
                                            config_hash, last))
    if ema is not None:
        net.load_state_dict({k: v.astype(net.dtype) for k, v in ema.items()})
    return result


def _save(net, ema, step, directory, stage, meta, chash, last):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = net.state_dict() if ema is None else {k: v.astype(net.dtype) for k, v in ema.items()}
    ck = Checkpoint(net.config, state, step, config_hash=chash, meta=dict(meta or {}, stage=stage))
    path = directory / (f"{stage}.ckpt" if last else f"{stage}_step{step:06d}.ckpt")
    save_checkpoint(path, ck)
    return path


def global_loss_fn(net, hr, demo, factor, cfg: TrainConfig, weights=None):
    """Stage-1 objective on strided low-resolution copies of the training volumes."""
    hr = np.asarray(hr, dtype=np.float32)
    demo = np.asarray(demo, dtype=np.float64)
    weights = weights or dif.LossWeights(sigma_data=net.config.sigma_data)

    def fn(step):
        subj, offs = draw_batch(cfg.seed, step, len(hr), cfg.batch_size, factor)
        clean = np.stack([_strided(hr[s], o, factor) for s, o in zip(subj, offs)])
        ids = step * cfg.batch_size + np.arange(cfg.batch_size)
        if net.config.objective == "flow":
            return dif.flow_matching_loss(net, clean, demo[subj], seed=cfg.seed, step=step,
                                          sample_ids=ids)
        return dif.denoising_loss(net, clean, demo[subj], weights, seed=cfg.seed, step=step,
                                  sample_ids=ids)
    return fn


def sr_loss_fn(net, hr, demo, factor, patch_extent, cfg: TrainConfig, weights=None):
    """Stage-2 patch objective; low-resolution inputs are random strided copies."""
    hr = np.asarray(hr, dtype=np.float32)
    demo = np.asarray(demo, dtype=np.float64)
    weights = weights or dif.LossWeights(sigma_data=net.config.sigma_data)

    def fn(step):
        subj, offs = draw_batch(cfg.seed, step, len(hr), cfg.batch_size, factor)
        hr_b = hr[subj]
        lr_b = np.stack([_strided(hr[s], o, factor) for s, o in zip(subj, offs)])
        ids = step * cfg.batch_size + np.arange(cfg.batch_size)
        return sr_patch_loss(net, hr_b, lr_b, demo[subj], weights, seed=cfg.seed, step=step,
                             sample_ids=ids, patch_extent=patch_extent)
    return fn


def train_global(net, hr, demo, factor, cfg: TrainConfig, **kw) -> TrainResult:
    return run_training(net, global_loss_fn(net, hr, demo, factor, cfg), cfg, stage="global", **kw)


def train_sr(net, hr, demo, factor, patch_extent, cfg: TrainConfig, **kw) -> TrainResult:
    return run_training(net, sr_loss_fn(net, hr, demo, factor, patch_extent, cfg), cfg,
                        stage="sr", **kw)

