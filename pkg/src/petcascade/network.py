"""Conditional 3D U-Net denoiser with EDM-style preconditioning.

The raw network ``F`` maps (input volume, noise label, demographics,
optional patch position) to an output volume of the same spatial size.
:meth:`ScoreNetwork.denoise` wraps it as

    D(x; sigma) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x, c_noise(sigma), cond)

Flow-matching models use :meth:`ScoreNetwork.velocity` instead, which calls
``F`` directly with the flow time as noise label and no preconditioning.

Parameter names are stable strings such as ``enc0.conv1.weight``; the
checkpoint format keys blobs by them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float = 0.5

    def c_skip(self, sigma):
        sd2 = self.sigma_data ** 2
        return sd2 / (np.square(sigma) + sd2)

    def c_out(self, sigma):
        return sigma * self.sigma_data / np.sqrt(np.square(sigma) + self.sigma_data ** 2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(np.square(sigma) + self.sigma_data ** 2)

    @staticmethod
    def c_noise(sigma):
        return np.log(sigma) / 4.0


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 2          # channels being denoised
    out_channels: int = 2
    image_cond_channels: int = 0  # extra conditioning channels (I_LU in the SR stage)
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2)
    cond_dim: int = 4
    emb_dim: int = 64
    noise_features: int = 32
    pos_features: int = 8          # sinusoid pairs per coordinate
    use_position: bool = False
    groups: int = 4
    kernel: int = 3
    sigma_data: float = 0.5
    objective: str = "edm"         # "edm" denoiser or "flow" velocity field

    def __post_init__(self):
        if self.objective not in ("edm", "flow"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)

    @property
    def levels(self):
        return len(self.channel_mult)


PRESETS = {
    "toy": dict(base_channels=8, emb_dim=32),
    "desk": dict(base_channels=16, emb_dim=64),
    "production": dict(base_channels=64, channel_mult=(1, 2, 2, 4), emb_dim=256),
}


def sinusoidal_embedding(values, n_features: int, max_period: float = 1e4) -> np.ndarray:
    """(B,) -> (B, n_features) cos/sin features at geometrically spaced frequencies."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    half = n_features // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = values[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def position_embedding(pos, n_pairs: int) -> np.ndarray:
    """(B, 3) coordinates in [0, 1] -> (B, 6 * n_pairs) Fourier features."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    freqs = math.pi * 2.0 ** np.arange(n_pairs)
    args = pos[:, :, None] * freqs[None, None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=2).reshape(len(pos), -1)


class ScoreNetwork:
    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.precond = Preconditioner(config.sigma_data)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._last = None
        self._build()
        self._rng = None

    # -- construction -----------------------------------------------------

    def _param(self, name, shape, fan_in=None, zero=False):
        if zero:
            data = np.zeros(shape)
        else:
            fan_in = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            data = self._rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)

    def _conv(self, name, cin, cout, k=None, zero=False):
        k = self.config.kernel if k is None else k
        self._param(f"{name}.weight", (cout, cin, k, k, k), zero=zero)
        self._param(f"{name}.bias", (cout,), zero=True)

    def _linear(self, name, cin, cout, zero=False):
        self._param(f"{name}.weight", (cout, cin), zero=zero)
        self._param(f"{name}.bias", (cout,), zero=True)

    def _block(self, name, cin, cout):
        cfg = self.config
        self._conv(f"{name}.conv1", cin, cout)
        self._linear(f"{name}.affine", cfg.emb_dim, 2 * cout)
        self._conv(f"{name}.conv2", cout, cout)
        if cin != cout:
            self._conv(f"{name}.skip", cin, cout, k=1)

    def _build(self):
        cfg = self.config
        e = cfg.emb_dim
        self._linear("emb.noise", cfg.noise_features, e)
        self._linear("emb.demo", cfg.cond_dim, e)
        if cfg.use_position:
            self._linear("emb.pos", 6 * cfg.pos_features, e)
        self._linear("emb.out", e, e)

        widths = [cfg.base_channels * m for m in cfg.channel_mult]
        cin = cfg.in_channels + cfg.image_cond_channels
        self._conv("enc.in", cin, widths[0])
        self._block("enc0", widths[0], widths[0])
        for lvl in range(1, cfg.levels):
            self._block(f"enc{lvl}", widths[lvl - 1], widths[lvl])
        self._block("mid", widths[-1], widths[-1])
        for lvl in reversed(range(cfg.levels - 1)):
            self._block(f"dec{lvl}", widths[lvl + 1] + widths[lvl], widths[lvl])
        self._conv("out", widths[0], cfg.out_channels, zero=True)

    # -- bookkeeping ------------------------------------------------------

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "ScoreNetwork":
        """Copy of this network in another float precision (f64 for gradient checks)."""
        clone = object.__new__(ScoreNetwork)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.precond = self.precond
        clone._last = None
        clone.params = {
            k: Tensor(p.data.astype(dtype), requires_grad=True, name=k)
            for k, p in self.params.items()
        }
        return clone

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward ----------------------------------------------------------

    def _lin(self, name, x):
        return ad.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _cv(self, name, x):
        return ad.conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _res_block(self, name, x, emb):
        cfg = self.config
        h = ad.silu(ad.group_norm(x, min(cfg.groups, x.shape[1])))
        h = self._cv(f"{name}.conv1", h)
        cout = h.shape[1]
        ss = self._lin(f"{name}.affine", emb)
        scale_ = _slice_cols(ss, 0, cout)
        shift = _slice_cols(ss, cout, 2 * cout)
        h = ad.modulate(ad.group_norm(h, min(cfg.groups, cout)), scale_, shift)
        h = self._cv(f"{name}.conv2", ad.silu(h))
        skip = self._cv(f"{name}.skip", x) if f"{name}.skip.weight" in self.params else x
        return ad.add(skip, h)

    def embed(self, noise_label, cond, pos=None) -> Tensor:
        cfg = self.config
        B = len(noise_label)
        feats = sinusoidal_embedding(noise_label, cfg.noise_features).astype(self.dtype)
        emb = self._lin("emb.noise", Tensor(feats))
        cond = np.asarray(cond, dtype=self.dtype).reshape(B, cfg.cond_dim)
        emb = ad.add(emb, self._lin("emb.demo", Tensor(cond)))
        if cfg.use_position:
            if pos is None:
                raise ValueError("network was built with positional conditioning; pos is required")
            pe = position_embedding(pos, cfg.pos_features).astype(self.dtype)
            emb = ad.add(emb, self._lin("emb.pos", Tensor(pe)))
        emb = ad.silu(emb)
        return ad.silu(self._lin("emb.out", emb))

    def raw_forward(self, x, noise_label, cond, pos=None, image_cond=None) -> Tensor:
        """The unpreconditioned network F.  ``x`` is (B, C, X, Y, Z)."""
        cfg = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, X, Y, Z) input, got {x.shape}")
        factor = 2 ** (cfg.levels - 1)
        if any(s % factor for s in x.shape[2:]):
            raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {factor}")
        inp = x
        if cfg.image_cond_channels:
            if image_cond is None:
                raise ValueError("image conditioning channels are required")
            image_cond = np.asarray(image_cond, dtype=self.dtype)
            if image_cond.shape != (x.shape[0], cfg.image_cond_channels) + x.shape[2:]:
                raise ValueError(f"image_cond shape {image_cond.shape} does not match input")
            inp = np.concatenate([x, image_cond], axis=1)
        noise_label = np.broadcast_to(np.asarray(noise_label, dtype=np.float64), (x.shape[0],))
        emb = self.embed(noise_label, cond, pos)

        h = self._cv("enc.in", Tensor(inp))
        h = self._res_block("enc0", h, emb)
        skips = [h]
        for lvl in range(1, cfg.levels):
            h = self._res_block(f"enc{lvl}", ad.avg_pool2(h), emb)
            skips.append(h)
        h = self._res_block("mid", skips.pop(), emb)
        for lvl in reversed(range(cfg.levels - 1)):
            h = ad.concat([ad.upsample2(h), skips.pop()], axis=1)
            h = self._res_block(f"dec{lvl}", h, emb)
        h = ad.silu(ad.group_norm(h, min(cfg.groups, h.shape[1])))
        return self._cv("out", h)

    def denoise(self, x, sigma, cond, pos=None, image_cond=None) -> np.ndarray:
        """Preconditioned denoiser D(x; sigma, cond).  Records for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise ValueError("sigma must be positive and finite")
        sigma = np.broadcast_to(sigma.reshape(-1), (x.shape[0],))
        pc = self.precond
        bshape = (-1, 1, 1, 1, 1)
        c_in = pc.c_in(sigma).reshape(bshape).astype(self.dtype)
        c_skip = pc.c_skip(sigma).reshape(bshape).astype(self.dtype)
        c_out = pc.c_out(sigma).reshape(bshape).astype(self.dtype)
        F = self.raw_forward(x * c_in, pc.c_noise(sigma), cond, pos, image_cond)
        self._last = (F, c_out) if F.requires_grad else None
        return c_skip * x + c_out * F.data

    def velocity(self, x, t, cond, pos=None, image_cond=None) -> np.ndarray:
        """Flow-matching velocity v(x, t, cond); t in [0, 1].  Records for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        F = self.raw_forward(x, t, cond, pos, image_cond)
        self._last = (F, None) if F.requires_grad else None
        return F.data.copy()

    def backward(self, upstream) -> dict[str, np.ndarray]:
        """Parameter gradients of <upstream, output> for the last recorded forward.

        ``upstream`` is dL/dD for :meth:`denoise` or dL/dv for :meth:`velocity`.
        """
        if self._last is None:
            raise RuntimeError("backward called without a recorded forward pass")
        F, c_out = self._last
        self._last = None
        g = np.asarray(upstream, dtype=self.dtype)
        if c_out is not None:
            g = g * c_out
        self.zero_grad()
        F.backward(g)
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self.params.items()
        }

    def bind(self, cond, pos=None, image_cond=None):
        """Closure ``(x, sigma) -> D`` for the samplers."""
        def fn(x, sigma):
            with ad.no_grad():
                return self.denoise(x, sigma, cond, pos, image_cond)
        return fn

    def bind_velocity(self, cond, pos=None, image_cond=None):
        def fn(x, t):
            with ad.no_grad():
                return self.velocity(x, t, cond, pos, image_cond)
        return fn


def _slice_cols(t: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(t.data)
        full[:, lo:hi] = g
        return (full,)
    return ad._make(t.data[:, lo:hi], (t,), backward)


class Adam:
    """Plain Adam; the update is applied in a fixed parameter-name order."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 grad_clip: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr=None) -> float:
        lr = self.lr if lr is None else lr
        names = sorted(self.params)
        norm = math.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in names))
        factor = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            factor = self.grad_clip / norm
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for k in names:
            g = grads[k] * factor
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr == 0:
                continue
            upd = lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            p = self.params[k]
            p.data = (p.data - upd).astype(p.data.dtype)
        return norm

    def state_dict(self):
        return {"step": self.step_count,
                **{f"m.{k}": v for k, v in self.m.items()},
                **{f"v.{k}": v for k, v in self.v.items()}}
