"""Heun sampling against a denoiser whose answer is known in closed form.

For data ~ N(mu, s^2) the ideal denoiser is E[x0 | x] = (s^2 x + sigma^2 mu) / (s^2 + sigma^2),
so sample statistics and the ODE endpoint can be checked exactly.
"""
import math

import numpy as np

from petcascade import diffusion as dif

mu, s = 0.4, 0.7


def denoise(x, sigma):
    sig = np.asarray(sigma).reshape(-1, 1)
    return (s * s * x + sig * sig * mu) / (s * s + sig * sig)


for n in (5, 10, 20, 35, 40):
    sched = dif.build_schedule(n)
    x = dif.sample_ode(denoise, (1, 10_000), sched, dif.SamplerConfig(n_steps=n, seed=0))
    x_T = dif.per_sample_normal(0, None, 0, dif.ROLE_INIT, (1, 10_000)) * sched.sigma_max
    exact = mu + (x_T - mu) * s / math.sqrt(s * s + sched.sigma_max ** 2)
    print(f"{n:3d} steps  mean {x.mean():+.4f}  std {x.std():.4f}  "
          f"max endpoint error {np.max(np.abs(x - exact)):.2e}")
print(f"target     mean {mu:+.4f}  std {s:.4f}")
