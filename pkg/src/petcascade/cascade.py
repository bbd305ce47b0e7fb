"""Two-stage generation: a global low-resolution model, then residual super-resolution.

Model-space volumes are arrays of shape ``(2, X, Y, Z)`` holding normalized
CT (channel 0) and PET (channel 1) in [0, 1].  Batches carry a leading axis.

Stage 2 predicts the residual ``R = I_HR - I_LU`` where ``I_LU`` is the
trilinear upsampling of the low-resolution volume.  Training visits patches
of the high-resolution grid; inference walks z-chunks and samples each chunk
as a batch of patch-sized tiles, so the network only ever sees one extent.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffusion as dif
from .normalize import DEFAULT_SPEC, NormalizationSpec, denormalize_ct, denormalize_suv
from .normalize import normalize_ct, normalize_suv
from .volume import (Modality, PatchSpec, SubsampleOffset, VoxelVolume, partition,
                     trilinear_resize, trilinear_upsample)

CT_CHANNEL, PET_CHANNEL = 0, 1
STAGE_GLOBAL, STAGE_SR = 1, 2


@dataclass(frozen=True)
class CascadeConfig:
    lr_dims: tuple[int, int, int] = (16, 16, 24)
    hr_dims: tuple[int, int, int] = (32, 32, 48)
    hr_spacing_mm: tuple[float, float, float] = (12.0, 12.0, 12.0)
    sr_patch_extent: tuple[int, int, int] = (16, 16, 24)
    z_chunk_extent: int = 24
    global_steps: int = 35
    sr_steps: int = 100

    def __post_init__(self):
        for name in ("lr_dims", "hr_dims", "sr_patch_extent"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "hr_spacing_mm", tuple(float(v) for v in self.hr_spacing_mm))
        ratios = {h / l for h, l in zip(self.hr_dims, self.lr_dims)}
        if len(ratios) != 1 or not float(next(iter(ratios))).is_integer():
            raise ValueError(f"hr_dims {self.hr_dims} must be an integer multiple of lr_dims {self.lr_dims}")
        if any(h % p for h, p in zip(self.hr_dims, self.sr_patch_extent)):
            raise ValueError(f"patch extent {self.sr_patch_extent} does not divide {self.hr_dims}")
        zc = self.z_chunk_extent
        if zc <= 0 or self.hr_dims[2] % zc or zc % self.sr_patch_extent[2]:
            raise ValueError(f"z_chunk_extent {zc} must divide hr z {self.hr_dims[2]} "
                             f"and be a multiple of patch z {self.sr_patch_extent[2]}")
        if self.global_steps < 1 or self.sr_steps < 1:
            raise ValueError("step counts must be positive")

    @property
    def factor(self) -> int:
        return self.hr_dims[0] // self.lr_dims[0]

    @property
    def lr_spacing_mm(self):
        return tuple(s * self.factor for s in self.hr_spacing_mm)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


CASCADE_PRESETS = {
    "desk": CascadeConfig(),
    "production": CascadeConfig((56, 56, 96), (224, 224, 384), (2.0, 2.0, 2.0),
                                (56, 56, 96), 96),
}


# --- model space ---------------------------------------------------------------

def to_model_space(ct: VoxelVolume, pet: VoxelVolume, spec: NormalizationSpec = DEFAULT_SPEC):
    if ct.dims != pet.dims:
        raise ValueError(f"ct dims {ct.dims} != pet dims {pet.dims}")
    return np.stack([normalize_ct(ct.data, spec), normalize_suv(pet.data, spec)]).astype(np.float32)


def from_model_space(arr, spacing_mm, spec: NormalizationSpec = DEFAULT_SPEC):
    """(2, X, Y, Z) model-space array -> (CT in HU, PET in SUV) volumes."""
    arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    ct = denormalize_ct(arr[CT_CHANNEL], spec).astype(np.float32)
    pet = denormalize_suv(arr[PET_CHANNEL], spec).astype(np.float32)
    return VoxelVolume(ct, spacing_mm, Modality.CT), VoxelVolume(pet, spacing_mm, Modality.PET)


def lr_family(hr, factor: int) -> np.ndarray:
    """All factor**3 strided copies of a (..., X, Y, Z) array, stacked on a new axis 0."""
    hr = np.asarray(hr)
    return np.stack([hr[..., x::factor, y::factor, z::factor]
                     for x, y, z in (o.offset for o in SubsampleOffset.all(factor))])


# --- residual ------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualVolume:
    """R = I_HR - I_LU, stored in float64 so that I_LU + R recovers I_HR exactly."""
    residual: VoxelVolume
    upsampled: VoxelVolume

    def reconstruct(self, dtype=np.float32) -> VoxelVolume:
        data = (self.upsampled.data.astype(np.float64) + self.residual.data).astype(dtype)
        return self.upsampled.with_data(data)


def residual_arrays(hr, lr):
    """(I_LU, R) for arrays of shape (..., X, Y, Z); I_LU keeps hr's dtype, R is float64."""
    hr = np.asarray(hr)
    lr = np.asarray(lr)
    if hr.shape[:-3] != lr.shape[:-3]:
        raise ValueError(f"leading dims differ: {hr.shape} vs {lr.shape}")
    ratios = {h / l for h, l in zip(hr.shape[-3:], lr.shape[-3:])}
    if len(ratios) != 1 or not float(next(iter(ratios))).is_integer():
        raise ValueError(f"hr dims {hr.shape[-3:]} are not an integer multiple of lr dims {lr.shape[-3:]}")
    ilu = trilinear_resize(lr.astype(hr.dtype), hr.shape[-3:]).astype(hr.dtype)
    return ilu, hr.astype(np.float64) - ilu.astype(np.float64)


def make_residual_target(hr: VoxelVolume, lr: VoxelVolume):
    ratios = {h / l for h, l in zip(hr.dims, lr.dims)}
    if len(ratios) != 1 or not float(next(iter(ratios))).is_integer():
        raise ValueError(f"lr dims {lr.dims} times an integer factor must equal hr dims {hr.dims}")
    ilu = trilinear_upsample(lr.with_data(lr.data.astype(hr.data.dtype)), hr.dims)
    ilu = ilu.with_data(ilu.data, spacing_mm=hr.spacing_mm)
    res = hr.with_data(hr.data.astype(np.float64) - ilu.data.astype(np.float64))
    return ilu, ResidualVolume(res, ilu)


# --- stage-2 training loss -----------------------------------------------------

def _patch_pos(spec: PatchSpec, dims):
    return np.asarray(spec.center_fraction(dims), dtype=np.float64)


def choose_patches(seed, step, sample_ids, n_patches):
    """One uniformly drawn patch index per sample."""
    return [int(dif.keyed_rng(seed, step, int(i), dif.ROLE_PATCH).integers(n_patches))
            for i in sample_ids]


def sr_patch_loss(net, hr_batch, lr_batch, demo, weights: dif.LossWeights | None = None,
                  seed=0, step=0, sample_ids=None, patch_extent=(16, 16, 24), patches=None,
                  need_grad=True):
    """Patch-wise residual loss and parameter gradients.

    ``patches`` selects the visited (sample, patch index) pairs: ``None``
    draws one patch per sample, ``"all"`` visits the full partition, or an
    explicit list of pairs.  Each visit contributes

        w(sigma_b) * sum over patch voxels and channels of (S - R)^2 / (B * N)

    where N counts the values of a whole volume for explicit/``"all"`` visits, so a full
    partition sums to the full-volume loss, and the patch size for the
    one-per-sample draw, which makes that an unbiased estimate of the same.
    Noise is drawn once per sample on the whole volume and sliced per patch.
    The objective follows ``net.config.objective`` ("edm" or "flow").
    """
    hr_batch = np.asarray(hr_batch)
    B = hr_batch.shape[0]
    dims = hr_batch.shape[-3:]
    ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    ilu, R = residual_arrays(hr_batch, lr_batch)
    specs = partition(dims, patch_extent)
    n_chan = int(np.prod(hr_batch.shape[1:-3]))
    n_vox = n_chan * int(np.prod(dims))
    if patches is None:
        idx = choose_patches(seed, step, ids, len(specs))
        visits = list(enumerate(idx))
        norm = [n_chan * int(np.prod(patch_extent))] * B
    else:
        visits = [(b, p) for b in range(B) for p in range(len(specs))] if patches == "all" \
            else [(int(b), int(p)) for b, p in patches]
        norm = [n_vox] * len(visits)
    demo = np.asarray(demo, dtype=np.float64).reshape(B, -1)
    objective = getattr(getattr(net, "config", None), "objective", "edm")

    if objective == "flow":
        t = np.array([dif.keyed_rng(seed, step, int(i), dif.ROLE_TIME).uniform() for i in ids])
        level = t
    else:
        weights = weights or dif.LossWeights()
        level, _ = dif.draw_training_noise(seed, step, ids, (B, 1), weights)
    eps = dif.per_sample_normal(seed, [(step, int(i)) for i in ids], 0, dif.ROLE_EPS, R.shape)

    sl = [(Ellipsis,) + specs[p].slices for _, p in visits]
    bi = [b for b, _ in visits]
    r_p = np.stack([R[b][s] for b, s in zip(bi, sl)])
    e_p = np.stack([eps[b][s] for b, s in zip(bi, sl)])
    ilu_p = np.stack([ilu[b][s] for b, s in zip(bi, sl)])
    lvl = level[bi]
    cond = demo[bi]
    pos = np.stack([_patch_pos(specs[p], dims) for _, p in visits])
    bshape = (-1,) + (1,) * (r_p.ndim - 1)
    if objective == "flow":
        tb = lvl.reshape(bshape)
        out = net.velocity((1 - tb) * e_p + tb * r_p, lvl, cond, pos=pos, image_cond=ilu_p)
        err = out.astype(np.float64) - (r_p - e_p)
        lam = np.ones(len(visits))
    else:
        out = net.denoise(r_p + lvl.reshape(bshape) * e_p, lvl, cond, pos=pos, image_cond=ilu_p)
        err = out.astype(np.float64) - r_p
        lam = weights.weight(lvl)
    scale = lam / (B * np.asarray(norm, dtype=np.float64))
    contrib = scale * np.sum(err.reshape(len(visits), -1) ** 2, axis=1)
    loss = math.fsum(contrib.tolist())
    if not math.isfinite(loss):
        raise dif.TrainingFault("non-finite patch loss", {
            "step": step, "level": lvl.tolist(), "per_visit_loss": contrib.tolist()})
    grads = net.backward(2.0 * scale.reshape(bshape) * err) if need_grad else None
    return loss, grads


def full_volume_residual_loss(denoise, hr_batch, lr_batch, demo, weights: dif.LossWeights,
                              seed=0, step=0, sample_ids=None):
    """Reference loss on whole volumes with the same noise draws as :func:`sr_patch_loss`.

    ``denoise(x, sigma, cond, image_cond)`` must act voxel-wise for the two to agree.
    """
    hr_batch = np.asarray(hr_batch)
    B = hr_batch.shape[0]
    ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    ilu, R = residual_arrays(hr_batch, lr_batch)
    sigma, _ = dif.draw_training_noise(seed, step, ids, (B, 1), weights)
    eps = dif.per_sample_normal(seed, [(step, int(i)) for i in ids], 0, dif.ROLE_EPS, R.shape)
    bshape = (-1,) + (1,) * (R.ndim - 1)
    D = denoise(R + sigma.reshape(bshape) * eps, sigma, np.asarray(demo), ilu)
    per = weights.weight(sigma) * np.mean(((D - R) ** 2).reshape(B, -1), axis=1)
    return float(np.mean(per))


def estimate_residual_sigma_data(hr_batch, factor: int) -> float:
    """Std of the residual over every strided low-resolution copy of the training volumes."""
    hr_batch = np.asarray(hr_batch, dtype=np.float32)
    fam = lr_family(hr_batch, factor)           # (f^3, B, C, x, y, z)
    sq, n = 0.0, 0
    for lr in fam:
        _, R = residual_arrays(hr_batch, lr)
        sq += float(np.sum(R ** 2))
        n += R.size
    return math.sqrt(sq / n)


# --- sampling ------------------------------------------------------------------

def _sampler_for(net, n_steps, churn=0.0):
    if net.config.objective == "flow":
        return dif.SamplerConfig(dif.SamplerMode.FLOW_EULER, n_steps)
    mode = dif.SamplerMode.SDE_EULER if churn > 0 else dif.SamplerMode.ODE_HEUN
    return dif.SamplerConfig(mode, n_steps, churn)


def _bind(net, cond, pos=None, image_cond=None):
    if net.config.objective == "flow":
        return net.bind_velocity(cond, pos, image_cond)
    return net.bind(cond, pos, image_cond)


def sample_global(net, demo, cfg: CascadeConfig, seeds, churn=0.0) -> np.ndarray:
    """Stage 1: (N, 2, *lr_dims) model-space volumes from demographics only."""
    demo = np.asarray(demo, dtype=np.float64).reshape(len(seeds), -1)
    shape = (len(seeds), net.config.out_channels) + cfg.lr_dims
    keys = [(STAGE_GLOBAL, int(s)) for s in seeds]
    out = dif.run_sampler(_bind(net, demo), shape, _sampler_for(net, cfg.global_steps, churn),
                          sample_keys=keys)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def chunk_layout(cfg: CascadeConfig):
    """[(chunk spec, [tile specs in hr coordinates])] in z order."""
    X, Y, Z = cfg.hr_dims
    chunks = partition(cfg.hr_dims, (X, Y, cfg.z_chunk_extent))
    layout = []
    for ch in chunks:
        tiles = []
        for t in partition((X, Y, cfg.z_chunk_extent), cfg.sr_patch_extent):
            origin = tuple(o + c for o, c in zip(t.origin, ch.origin))
            tiles.append(PatchSpec(origin, t.extent, t.index, t.total))
        layout.append((ch, tiles))
    return layout


def super_resolve_batch(net, lr, demo, cfg: CascadeConfig, seeds, parallel=False,
                        churn=0.0, return_residual=False):
    """Stage 2 for a batch of (N, 2, *lr_dims) model-space volumes.

    Chunks run one after another unless ``parallel``, in which case every
    chunk is sampled in a single batch.  Each tile draws its noise from a
    stream keyed by (subject seed, chunk, tile), so both modes agree.
    """
    lr = np.asarray(lr, dtype=np.float32)
    if lr.shape[-3:] != cfg.lr_dims:
        raise ValueError(f"lr dims {lr.shape[-3:]} do not match config {cfg.lr_dims}")
    N, C = lr.shape[:2]
    demo = np.asarray(demo, dtype=np.float64).reshape(N, -1)
    ilu = trilinear_resize(lr, cfg.hr_dims).astype(np.float32)
    layout = chunk_layout(cfg)
    residual = np.zeros((N, C) + cfg.hr_dims, dtype=np.float64)
    sampler = _sampler_for(net, cfg.sr_steps, churn)
    groups = [layout] if parallel else [[entry] for entry in layout]
    for group in groups:
        items = [(n, ch, t) for ch, tiles in group for t in tiles for n in range(N)]
        cond = demo[[n for n, _, _ in items]]
        pos = np.stack([_patch_pos(t, cfg.hr_dims) for _, _, t in items])
        image_cond = np.stack([ilu[n][(Ellipsis,) + t.slices] for n, _, t in items])
        keys = [(STAGE_SR, int(seeds[n]), ch.index, t.index) for n, ch, t in items]
        shape = (len(items), C) + cfg.sr_patch_extent
        r_hat = dif.run_sampler(_bind(net, cond, pos, image_cond), shape, sampler, sample_keys=keys)
        for (n, _, t), r in zip(items, r_hat):
            residual[n][(Ellipsis,) + t.slices] = r
    out = np.clip(ilu.astype(np.float64) + residual, 0.0, 1.0).astype(np.float32)
    return (out, residual) if return_residual else out


def super_resolve(net, lr_pair, demo, cfg: CascadeConfig, seed=0, parallel=False, churn=0.0,
                  spec: NormalizationSpec = DEFAULT_SPEC):
    """(CT, PET) model-space low-resolution volumes -> super-resolved model-space pair."""
    ct, pet = lr_pair
    lr = np.stack([ct.data, pet.data])[None]
    out = super_resolve_batch(net, lr, np.asarray(demo).reshape(1, -1), cfg, [seed],
                              parallel=parallel, churn=churn)[0]
    sp = cfg.hr_spacing_mm
    return VoxelVolume(out[0], sp, Modality.CT), VoxelVolume(out[1], sp, Modality.PET)


def generate_batch(global_net, sr_net, demo, cfg: CascadeConfig, seeds, churn=0.0,
                   spec: NormalizationSpec = DEFAULT_SPEC, return_model_space=False):
    """Full cascade for N subjects -> list of (CT in HU, PET in SUV) volume pairs.

    ``churn`` only affects stage 1; super-resolution always integrates the ODE.
    """
    demo = np.asarray(demo, dtype=np.float64).reshape(len(seeds), -1)
    lr = sample_global(global_net, demo, cfg, seeds, churn)
    hr = super_resolve_batch(sr_net, lr, demo, cfg, seeds)
    pairs = [from_model_space(v, cfg.hr_spacing_mm, spec) for v in hr]
    return (pairs, lr, hr) if return_model_space else pairs


def generate_subject(global_net, sr_net, demo, cfg: CascadeConfig, seed=0, churn=0.0,
                     spec: NormalizationSpec = DEFAULT_SPEC):
    return generate_batch(global_net, sr_net, np.asarray(demo).reshape(1, -1), cfg, [seed],
                          churn, spec)[0]


def seam_discontinuity(vol, z_chunk_extent: int) -> dict:
    """Mean absolute z-difference across chunk seams versus inside chunks."""
    vol = np.asarray(vol, dtype=np.float64)
    dz = np.abs(np.diff(vol, axis=-1))          # dz[..., k] spans voxels k and k+1
    seams = np.arange(z_chunk_extent - 1, vol.shape[-1] - 1, z_chunk_extent)
    inner = np.setdiff1d(np.arange(dz.shape[-1]), seams)
    return {"seam": float(dz[..., seams].mean()) if len(seams) else 0.0,
            "interior": float(dz[..., inner].mean()),
            "n_seams": int(len(seams))}
