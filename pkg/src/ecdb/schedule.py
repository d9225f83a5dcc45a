"""Time-dependent coefficients of the generalized Ornstein-Uhlenbeck bridge.

The bridge is driven by a scalar mean-reversion rate ``theta(t)`` and a
diffusion coefficient ``g(t)`` tied to it through ``g(t)**2 = 2 * lambda_sq *
theta(t)``. Every closed-form quantity the samplers and losses need is a
function of the cumulative rate ``theta_bar(s, t) = int_s^t theta``:

* ``sigma2(s, t) = lambda_sq * (1 - exp(-2 theta_bar(s, t)))``
* ``sigma2_prime(t) = sigma2(0, t) * sigma2(t, T) / sigma2(0, T)``, the
  variance of ``x_t`` given both endpoints
* ``mean_coeffs(t) = (c0, cT)`` so that ``E[x_t | x_0, x_T] = c0 x_0 + cT x_T``
* ``drift_gain(t)``, the factor multiplying ``(x_T - x_t)`` in the bridge SDE.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError

SCHEDULE_CSV_HEADER = (
    "t", "theta_bar_0t", "sigma2_0t", "sigma2_tT", "sigma2_prime", "c0", "cT", "drift_gain",
)


@dataclass(frozen=True)
class ProcessConfig:
    """Bridge process hyperparameters.

    ``theta`` is used when ``theta_table`` is None (constant profile);
    otherwise ``theta_table`` gives the rate at each of the ``n_steps + 1``
    grid nodes and is linearly interpolated in between.
    """

    lambda_sq: float = 1.0
    theta: float = 1.0
    theta_table: tuple[float, ...] | None = None
    T: float = 1.0
    n_steps: int = 100

    def validate(self) -> None:
        if not self.lambda_sq > 0:
            raise ConfigError(f"lambda_sq must be positive, got {self.lambda_sq}")
        if not self.T > 0:
            raise ConfigError(f"T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ConfigError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        if self.theta_table is None:
            if not self.theta > 0:
                raise ConfigError(f"theta must be positive, got {self.theta}")
        else:
            table = np.asarray(self.theta_table, dtype=float)
            if table.shape != (self.n_steps + 1,):
                raise ConfigError(
                    f"theta_table needs {self.n_steps + 1} entries, got {table.size}"
                )
            if not np.all(table > 0):
                raise ConfigError("theta_table entries must be positive")


@dataclass(frozen=True, eq=False)
class ProcessSchedule:
    """Immutable coefficient accessors on ``[0, T]``.

    All accessors accept scalars or numpy arrays of times and broadcast.
    """

    cfg: ProcessConfig
    grid: np.ndarray = field(repr=False)
    _theta_nodes: np.ndarray = field(repr=False)
    _cum_nodes: np.ndarray = field(repr=False)

    @property
    def T(self) -> float:
        return self.cfg.T

    @property
    def n_steps(self) -> int:
        return self.cfg.n_steps

    @property
    def lambda_sq(self) -> float:
        return self.cfg.lambda_sq

    @property
    def dt(self) -> float:
        return self.cfg.T / self.cfg.n_steps

    @property
    def constant(self) -> bool:
        return self.cfg.theta_table is None

    # -- rate profile -----------------------------------------------------

    def theta(self, t):
        t = np.asarray(t, dtype=float)
        if self.constant:
            return np.full_like(t, self.cfg.theta)
        return np.interp(t, self.grid, self._theta_nodes)

    def g2(self, t):
        return 2.0 * self.cfg.lambda_sq * self.theta(t)

    def _cumulative(self, t):
        # exact integral of the piecewise-linear interpolant; equals the
        # trapezoid rule at grid nodes
        t = np.asarray(t, dtype=float)
        h = self.dt
        k = np.clip(np.floor(t / h).astype(int), 0, self.n_steps - 1)
        tau = t - self.grid[k]
        th0 = self._theta_nodes[k]
        th1 = self._theta_nodes[k + 1]
        return self._cum_nodes[k] + th0 * tau + (th1 - th0) * tau * tau / (2.0 * h)

    def theta_bar(self, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(t < s):
            raise DomainError("theta_bar(s, t) requires s <= t")
        if np.any(s < 0) or np.any(t > self.T * (1 + 1e-12)):
            raise DomainError(f"times must lie in [0, {self.T}]")
        if self.constant:
            return self.cfg.theta * (t - s)
        return self._cumulative(t) - self._cumulative(s)

    def sigma2(self, s, t):
        return self.cfg.lambda_sq * -np.expm1(-2.0 * self.theta_bar(s, t))

    # -- bridge marginal ----------------------------------------------------

    def sigma2_prime(self, t):
        t = np.asarray(t, dtype=float)
        return self.sigma2(0.0, t) * self.sigma2(t, self.T) / self.sigma2(0.0, self.T)

    def mean_coeffs(self, t):
        t = np.asarray(t, dtype=float)
        s2_t = self.sigma2(0.0, t)
        s2_tT = self.sigma2(t, self.T)
        s2_T = self.sigma2(0.0, self.T)
        tb_t = self.theta_bar(0.0, t)
        tb_tT = self.theta_bar(t, self.T)
        c0 = np.exp(-tb_t) * s2_tT / s2_T
        cT = -np.expm1(-tb_t) * s2_tT / s2_T + np.exp(-2.0 * tb_tT) * s2_t / s2_T
        return c0, cT

    def drift_gain(self, t):
        """Gain of the ``(x_T - x_t)`` drift; infinite at ``t = T``."""
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            return self.theta(t) + self.g2(t) * np.exp(-2.0 * self.theta_bar(t, self.T)) / self.sigma2(
                t, self.T
            )

    # -- grid helpers -------------------------------------------------------

    def time(self, index):
        index = np.asarray(index)
        if np.any(index < 0) or np.any(index > self.n_steps):
            raise DomainError(f"grid index out of range [0, {self.n_steps}]")
        return self.grid[index]

    def on_grid(self, t) -> bool:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.rint(t / self.dt)
        return bool(np.all(np.abs(k * self.dt - t) <= 1e-9 * self.T) and np.all((k >= 0) & (k <= self.n_steps)))


def build_schedule(cfg: ProcessConfig) -> ProcessSchedule:
    cfg.validate()
    grid = np.linspace(0.0, cfg.T, cfg.n_steps + 1)
    if cfg.theta_table is None:
        nodes = np.full(cfg.n_steps + 1, float(cfg.theta))
        cum = cfg.theta * grid
    else:
        nodes = np.asarray(cfg.theta_table, dtype=float)
        h = cfg.T / cfg.n_steps
        cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (nodes[1:] + nodes[:-1]))])
    for arr in (grid, nodes, cum):
        arr.setflags(write=False)
    return ProcessSchedule(cfg, grid, nodes, cum)


def backward_coeffs(sched: ProcessSchedule, t_index: int) -> tuple[float, float, float]:
    """One-step posterior ``p(x_{t-1} | x_t, x_0, x_T)`` coefficients.

    Returns ``(a, b, posterior_var)`` such that the posterior mean is::

        (sigma2_prime(t-1) * a * (x_t - b * x_T)
         + (sigma2_prime(t) - a**2 * sigma2_prime(t-1)) * m(t-1)) / sigma2_prime(t)

    where ``m(t-1) = c0(t-1) x_0 + cT(t-1) x_T``. Here ``a`` and ``b`` are the
    coefficients of the bridge transition ``x_{t-1} -> x_t``, whose mean is
    ``a x_{t-1} + b x_T``. At ``t = T`` the transition is deterministic
    (``a = 0``) and the posterior equals the marginal at ``t - 1``.
    """
    if int(t_index) != t_index or not 1 <= t_index <= sched.n_steps:
        raise DomainError(f"t_index must be in [1, {sched.n_steps}], got {t_index}")
    s = sched.time(t_index - 1)
    t = sched.time(t_index)
    prior_var = float(sched.sigma2_prime(s))
    s2_tT = float(sched.sigma2(t, sched.T))
    if s2_tT == 0.0:
        return 0.0, 1.0, prior_var
    a = float(np.exp(-sched.theta_bar(s, t)) * s2_tT / sched.sigma2(s, sched.T))
    trans_var = float(sched.sigma2(s, t) * s2_tT / sched.sigma2(s, sched.T))
    # the marginal variance at t is a**2 * prior_var + trans_var
    post_var = prior_var * trans_var / (trans_var + a * a * prior_var)
    return a, 1.0 - a, post_var


def posterior_mean(sched: ProcessSchedule, t_index: int, x_t, x0, xT):
    a, b, _ = backward_coeffs(sched, t_index)
    c0p, cTp = sched.mean_coeffs(sched.time(t_index - 1))
    m_prev = float(c0p) * x0 + float(cTp) * xT
    sp2 = float(sched.sigma2_prime(sched.time(t_index)))
    if sp2 == 0.0:
        return m_prev
    sp2_prev = float(sched.sigma2_prime(sched.time(t_index - 1)))
    return (sp2_prev * a * (x_t - b * xT) + (sp2 - a * a * sp2_prev) * m_prev) / sp2


def schedule_rows(sched: ProcessSchedule) -> list[tuple[float, ...]]:
    t = sched.grid
    c0, cT = sched.mean_coeffs(t)
    cols = (
        t,
        sched.theta_bar(0.0, t),
        sched.sigma2(0.0, t),
        sched.sigma2(t, sched.T),
        sched.sigma2_prime(t),
        c0,
        cT,
        sched.drift_gain(t),
    )
    return [tuple(float(c[i]) for c in cols) for i in range(t.size)]


def write_schedule_csv(sched: ProcessSchedule, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCHEDULE_CSV_HEADER)
        for row in schedule_rows(sched):
            writer.writerow([format_sig(v) for v in row])
    return path


def format_sig(value: float, digits: int = 12) -> str:
    if np.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.{digits}g}"


def constant_table(theta: float, n_steps: int) -> Sequence[float]:
    """Tabulated profile equal to a constant rate, for quadrature checks."""
    return tuple([float(theta)] * (n_steps + 1))
