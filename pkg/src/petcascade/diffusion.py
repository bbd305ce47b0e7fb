"""Noise schedules, training objectives and samplers.

Sampling follows the EDM change of variables: the probability-flow ODE is
integrated in sigma as ``dx/dsigma = (x - D(x; sigma)) / sigma`` with Heun's
method, and the last step down to sigma = 0 is a plain Euler step.  The
stochastic sampler adds "churn": before each step the noise level is raised
from sigma to sigma_hat = sigma * (1 + churn) by injecting fresh Gaussian
noise.

All randomness is drawn from counter-based generators keyed by
``(seed, sample key..., step, role)`` so a sample's trajectory does not depend
on how samples are batched.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

# RNG roles
ROLE_INIT = 1
ROLE_CHURN = 2
ROLE_SIGMA = 3
ROLE_EPS = 4
ROLE_TIME = 5
ROLE_PATCH = 6
ROLE_BATCH = 7


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def _keys(sample_keys, n):
    if sample_keys is None:
        return [(b,) for b in range(n)]
    keys = [tuple(k) if isinstance(k, (tuple, list)) else (int(k),) for k in sample_keys]
    if len(keys) != n:
        raise ValueError(f"{len(keys)} sample keys for a batch of {n}")
    return keys


def per_sample_normal(seed, sample_keys, step, role, shape, dtype=np.float64) -> np.ndarray:
    """Standard normals of ``shape``; row b comes from its own keyed stream."""
    keys = _keys(sample_keys, shape[0])
    out = np.empty(shape, dtype=dtype)
    for b, key in enumerate(keys):
        out[b] = keyed_rng(seed, *key, step, role).standard_normal(shape[1:])
    return out


class SamplerFault(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite sampler state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class TrainingFault(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    n_steps: int = 35

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    @property
    def sigmas(self) -> np.ndarray:
        """sigma_0 = sigma_max, ..., sigma_{n-1} = sigma_min, sigma_n = 0."""
        n = self.n_steps
        if n == 1:
            return np.array([self.sigma_max, 0.0])
        i = np.arange(n)
        a = self.sigma_max ** (1 / self.rho)
        b = self.sigma_min ** (1 / self.rho)
        s = (a + i / (n - 1) * (b - a)) ** self.rho
        return np.append(s, 0.0)

    def to_dict(self):
        return asdict(self)


def build_schedule(n_steps=35, sigma_min=0.002, sigma_max=80.0, rho=7.0) -> NoiseSchedule:
    return NoiseSchedule(sigma_min, sigma_max, rho, n_steps)


@dataclass(frozen=True)
class LossWeights:
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2

    def weight(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        return (sigma ** 2 + self.sigma_data ** 2) / (sigma * self.sigma_data) ** 2

    def draw_sigma(self, rng: np.random.Generator) -> float:
        return float(np.exp(self.p_mean + self.p_std * rng.standard_normal()))

    def to_dict(self):
        return asdict(self)


class SamplerMode(str, enum.Enum):
    ODE_HEUN = "ode_heun"
    SDE_EULER = "sde_euler"
    FLOW_EULER = "flow_euler"


@dataclass(frozen=True)
class SamplerConfig:
    mode: SamplerMode = SamplerMode.ODE_HEUN
    n_steps: int = 35
    churn: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", SamplerMode(self.mode))
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.churn < 0:
            raise ValueError("churn must be >= 0")
        if self.mode is not SamplerMode.SDE_EULER and self.churn != 0:
            raise ValueError(f"churn must be 0 in {self.mode.value} mode")

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


Denoiser = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _check(x, step):
    if not np.all(np.isfinite(x)):
        raise SamplerFault(step)


def _edm_sample(denoise: Denoiser, shape, schedule: NoiseSchedule, seed: int, churn: float,
                sample_keys=None, dtype=np.float64):
    sigmas = schedule.sigmas
    keys = _keys(sample_keys, shape[0])
    x = per_sample_normal(seed, keys, 0, ROLE_INIT, shape, dtype) * sigmas[0]
    gamma = min(churn, math.sqrt(2.0) - 1.0)
    for i, (s_cur, s_next) in enumerate(zip(sigmas[:-1], sigmas[1:])):
        s_hat = s_cur
        if gamma > 0:
            s_hat = s_cur * (1.0 + gamma)
            eps = per_sample_normal(seed, keys, i, ROLE_CHURN, shape, dtype)
            x = x + math.sqrt(s_hat ** 2 - s_cur ** 2) * eps
        den = denoise(x, np.full(shape[0], s_hat))
        if s_next == 0:
            # Euler step to sigma = 0 lands exactly on the denoised estimate
            x = np.asarray(den, dtype=x.dtype)
            _check(x, i)
            continue
        d = (x - den) / s_hat
        x_next = x + (s_next - s_hat) * d
        if s_next > 0:
            d2 = (x_next - denoise(x_next, np.full(shape[0], s_next))) / s_next
            x_next = x + (s_next - s_hat) * (0.5 * d + 0.5 * d2)
        x = x_next
        _check(x, i)
    return x


def sample_ode(denoise: Denoiser, shape, schedule: NoiseSchedule, config: SamplerConfig,
               sample_keys=None, dtype=np.float64) -> np.ndarray:
    """Deterministic Heun integration of the probability-flow ODE from sigma_max to 0.

    ``denoise(x, sigma)`` receives the full batch and a per-sample sigma array.
    """
    return _edm_sample(denoise, shape, schedule, config.seed, 0.0, sample_keys, dtype)


def sample_sde(denoise: Denoiser, shape, schedule: NoiseSchedule, config: SamplerConfig,
               sample_keys=None, dtype=np.float64) -> np.ndarray:
    """Stochastic sampler with per-step noise churn; churn = 0 is exactly :func:`sample_ode`."""
    return _edm_sample(denoise, shape, schedule, config.seed, config.churn, sample_keys, dtype)


def sample_flow(velocity: Callable, shape, n_steps: int, seed: int = 0, sample_keys=None,
                dtype=np.float64, t_end: float = 1.0) -> np.ndarray:
    """Fixed-step Euler integration of dx/dt = v(x, t) from t = 0 (noise) to ``t_end``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0 < t_end <= 1:
        raise ValueError("t_end must lie in (0, 1]")
    keys = _keys(sample_keys, shape[0])
    x = per_sample_normal(seed, keys, 0, ROLE_INIT, shape, dtype)
    h = t_end / n_steps
    for i in range(n_steps):
        x = x + h * velocity(x, np.full(shape[0], i * h))
        _check(x, i)
    return x


def run_sampler(model_fn, shape, config: SamplerConfig, schedule: NoiseSchedule | None = None,
                sample_keys=None, dtype=np.float64):
    if config.mode is SamplerMode.FLOW_EULER:
        return sample_flow(model_fn, shape, config.n_steps, config.seed, sample_keys, dtype)
    schedule = schedule or build_schedule(config.n_steps)
    if schedule.n_steps != config.n_steps:
        schedule = NoiseSchedule(schedule.sigma_min, schedule.sigma_max, schedule.rho, config.n_steps)
    if config.mode is SamplerMode.SDE_EULER:
        return sample_sde(model_fn, shape, schedule, config, sample_keys, dtype)
    return sample_ode(model_fn, shape, schedule, config, sample_keys, dtype)


# --- training objectives -------------------------------------------------------

def draw_training_noise(seed, step, sample_ids, shape, weights: LossWeights):
    """Per-sample sigma (log-normal) and epsilon, keyed by (seed, step, sample id)."""
    sigma = np.array([weights.draw_sigma(keyed_rng(seed, step, int(i), ROLE_SIGMA))
                      for i in sample_ids])
    eps = per_sample_normal(seed, [(step, int(i)) for i in sample_ids], 0, ROLE_EPS, shape)
    return sigma, eps


def denoising_loss(net, clean, cond, weights: LossWeights, seed=0, step=0, sample_ids=None,
                   pos=None, image_cond=None, sigma=None, noise=None, need_grad=True):
    """Weighted denoising score-matching loss and parameter gradients.

    loss = mean_b lambda(sigma_b) * mean_voxels (D(clean_b + sigma_b eps_b; sigma_b) - clean_b)^2
    with lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma sigma_data)^2.
    """
    clean = np.asarray(clean)
    B = clean.shape[0]
    sample_ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    if sigma is None or noise is None:
        s_draw, e_draw = draw_training_noise(seed, step, sample_ids, clean.shape, weights)
        sigma = s_draw if sigma is None else sigma
        noise = e_draw if noise is None else noise
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
    bshape = (B,) + (1,) * (clean.ndim - 1)
    x = clean + sigma.reshape(bshape) * noise
    D = net.denoise(x, sigma, cond, pos=pos, image_cond=image_cond)
    err = D.astype(np.float64) - clean
    lam = weights.weight(sigma)
    n_vox = int(np.prod(clean.shape[1:]))
    per_sample = lam * np.mean(err.reshape(B, -1) ** 2, axis=1)
    loss = float(np.mean(per_sample))
    if not math.isfinite(loss):
        raise TrainingFault("non-finite denoising loss", {
            "step": step, "sigma": sigma.tolist(), "per_sample_loss": per_sample.tolist()})
    grads = None
    if need_grad:
        upstream = (2.0 / (B * n_vox)) * lam.reshape(bshape) * err
        grads = net.backward(upstream)
    return loss, grads


def flow_matching_loss(net, clean, cond, seed=0, step=0, sample_ids=None, pos=None,
                       image_cond=None, t=None, noise=None, need_grad=True):
    """Unit-weighted velocity regression along x_t = (1 - t) noise + t clean."""
    clean = np.asarray(clean)
    B = clean.shape[0]
    sample_ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    if t is None:
        t = np.array([keyed_rng(seed, step, int(i), ROLE_TIME).uniform() for i in sample_ids])
    if noise is None:
        noise = per_sample_normal(seed, [(step, int(i)) for i in sample_ids], 0, ROLE_EPS, clean.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    tb = t.reshape((B,) + (1,) * (clean.ndim - 1))
    x_t = (1.0 - tb) * noise + tb * clean
    target = clean - noise
    v = net.velocity(x_t, t, cond, pos=pos, image_cond=image_cond)
    err = v.astype(np.float64) - target
    loss = float(np.mean(err ** 2))
    if not math.isfinite(loss):
        raise TrainingFault("non-finite flow-matching loss", {"step": step, "t": t.tolist()})
    grads = net.backward(2.0 * err / err.size) if need_grad else None
    return loss, grads


def path_marginal_std(t, target_std):
    """Std of x_t when noise ~ N(0, 1) and data ~ N(0, target_std^2), independent."""
    return math.sqrt((1 - t) ** 2 + (t * target_std) ** 2)
