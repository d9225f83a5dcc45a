"""Forward sampling, forward SDE simulation and reverse Euler restoration."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, DomainError, SamplerDivergence, ShapeError
from .schedule import ProcessSchedule, backward_coeffs

log = logging.getLogger(__name__)

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 100
    rng_seed: int = 0
    stochastic: bool = True
    # noise on the step that lands on t = 0
    final_noise: bool = False

    def validate(self) -> None:
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"sampler n_steps must be >= 1, got {self.n_steps}")


def _check_same_shape(a, b, what="x0 and xT"):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def eval_index(t_index, n_steps: int):
    """Grid index at which the model and drift are evaluated for step ``t_index``.

    The score is undefined at ``T``, so the step leaving ``T`` uses the
    coefficients one node earlier.
    """
    if isinstance(t_index, torch.Tensor):
        return torch.clamp(t_index, max=n_steps - 1)
    return np.minimum(t_index, n_steps - 1)


def sample_forward(sched: ProcessSchedule, x0, xT, t, noise):
    """Draw ``x_t`` from the closed-form bridge marginal given ``x_0`` and ``x_T``.

    ``t`` is a grid time, or a 1-D array of grid times (one per batch item).
    Works on numpy arrays and torch tensors alike.
    """
    _check_same_shape(x0, xT)
    _check_same_shape(x0, noise, "x0 and noise")
    if not sched.on_grid(t):
        raise DomainError(f"t={t} is not a grid time")
    c0, cT = sched.mean_coeffs(t)
    sd = np.sqrt(sched.sigma2_prime(t))
    c0, cT, sd = (_bcast(c, x0) for c in (c0, cT, sd))
    return c0 * x0 + cT * xT + sd * noise


def _bcast(coef, like):
    coef = np.asarray(coef, dtype=float)
    if coef.ndim == 0:
        return float(coef)
    coef = coef.reshape((-1,) + (1,) * (like.ndim - 1))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(coef, dtype=like.dtype, device=like.device)
    return coef


def simulate_forward_em(
    sched: ProcessSchedule,
    x0,
    xT,
    n_substeps: int,
    rng_seed: int,
) -> np.ndarray:
    """Euler-Maruyama integration of the forward bridge SDE.

    Returns the states at the ``n_steps + 1`` schedule nodes, stacked along a
    new leading axis. Intended as an independent check of the closed form,
    not as a production path.
    """
    x0 = np.asarray(x0, dtype=float)
    xT = np.asarray(xT, dtype=float)
    _check_same_shape(x0, xT)
    if n_substeps < sched.n_steps or n_substeps % sched.n_steps:
        raise ConfigError("n_substeps must be a positive multiple of the schedule's n_steps")
    per_node = n_substeps // sched.n_steps
    h = sched.T / n_substeps
    times = np.arange(n_substeps) * h
    gains = np.asarray(sched.drift_gain(times)) * h
    noise_sd = np.sqrt(np.asarray(sched.g2(times)) * h)
    rng = np.random.default_rng(rng_seed)

    out = np.empty((sched.n_steps + 1,) + x0.shape)
    out[0] = x0
    x = x0.copy()
    for j in range(n_substeps):
        x += gains[j] * (xT - x) + noise_sd[j] * rng.standard_normal(x.shape)
        if (j + 1) % per_node == 0:
            out[(j + 1) // per_node] = x
    if not np.all(np.isfinite(out)):
        raise SamplerDivergence(int(np.argmax(~np.isfinite(out).reshape(len(out), -1).all(1))))
    return out


def score_from_eps(eps, sigma_prime_t):
    """Conditional score ``grad log p(x_t | x_T) = -eps / sigma_prime_t``."""
    sp = np.asarray(sigma_prime_t, dtype=float)
    if np.any(sp <= 0):
        raise DomainError("score is undefined where sigma_prime_t <= 0 (t = 0 or t = T)")
    return -eps / _bcast(sp, eps)


def reverse_euler_sample(
    sched: ProcessSchedule,
    model: EpsModel,
    xT: torch.Tensor,
    cfg: SamplerConfig = SamplerConfig(),
    trajectory: list | None = None,
) -> torch.Tensor:
    """Restore ``x_0`` from ``x_T`` by integrating the reverse bridge SDE.

    ``model(x_t, x_T, t)`` returns the predicted noise; ``t`` is passed as a
    tensor of shape ``(batch,)``. If ``trajectory`` is a list, ``(t, x_t)``
    pairs are appended after every step, starting with ``(T, x_T)``.
    """
    cfg.validate()
    if sched.n_steps % cfg.n_steps:
        raise ConfigError(
            f"sampler n_steps={cfg.n_steps} must divide the schedule's {sched.n_steps}"
        )
    stride = sched.n_steps // cfg.n_steps
    dt = sched.dt * stride
    gen = torch.Generator(device=xT.device).manual_seed(int(cfg.rng_seed))
    batch = xT.shape[0]

    x = xT.clone()
    if trajectory is not None:
        trajectory.append((sched.T, x.clone()))
    with torch.no_grad():
        for k in range(cfg.n_steps, 0, -1):
            # the step leaving T is evaluated one (coarse) node earlier
            idx = k * stride if k < cfg.n_steps else (k - 1) * stride
            t = float(sched.time(idx))
            gain = float(sched.drift_gain(t))
            g2 = float(sched.g2(t))
            sp = float(np.sqrt(sched.sigma2_prime(t)))
            t_vec = torch.full((batch,), t, dtype=xT.dtype, device=xT.device)
            eps = model(x, xT, t_vec)
            if tuple(eps.shape) != tuple(x.shape):
                raise ShapeError(f"model returned {tuple(eps.shape)}, expected {tuple(x.shape)}")
            drift = gain * (xT - x) - g2 * score_from_eps(eps, sp)
            x = x - drift * dt
            inject = cfg.stochastic and (k > 1 or cfg.final_noise)
            if inject:
                z = torch.randn(x.shape, generator=gen, dtype=x.dtype, device=x.device)
                x = x + float(np.sqrt(g2 * dt)) * z
            if not torch.isfinite(x).all():
                raise SamplerDivergence(k)
            if trajectory is not None:
                trajectory.append((float(sched.time((k - 1) * stride)), x.clone()))
    return x


# -- batched coefficient tables for training ---------------------------------


class BridgeTables:
    """Per-grid-index coefficient vectors as torch tensors, for batched losses.

    Entries at index 0 are placeholders; losses are only defined for
    ``t_index >= 1``.
    """

    def __init__(self, sched: ProcessSchedule, dtype=torch.float32, device="cpu"):
        n = sched.n_steps
        grid = sched.grid
        c0, cT = sched.mean_coeffs(grid)
        sp2 = sched.sigma2_prime(grid)
        gain = np.asarray(sched.drift_gain(grid[:-1]), dtype=float)
        a = np.zeros(n + 1)
        b = np.zeros(n + 1)
        pv = np.zeros(n + 1)
        for i in range(1, n + 1):
            a[i], b[i], pv[i] = backward_coeffs(sched, i)

        def tt(v):
            return torch.tensor(np.array(v, dtype=float), dtype=dtype, device=device)

        self.n_steps = n
        self.dt = sched.dt
        self.t = tt(grid)
        self.c0 = tt(c0)
        self.cT = tt(cT)
        self.sp2 = tt(sp2)
        self.sp = tt(np.sqrt(sp2))
        self.g2 = tt(sched.g2(grid))
        self.gain = tt(np.append(gain, np.inf))
        self.a = tt(a)
        self.b = tt(b)
        self.post_var = tt(pv)

    def gather(self, name: str, index: torch.Tensor, ndim: int) -> torch.Tensor:
        v = getattr(self, name)[index]
        return v.reshape((-1,) + (1,) * (ndim - 1))
