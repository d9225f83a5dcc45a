"""Losses, optimizer schedule and the training loop for pretraining and ECDB fine-tuning."""

from __future__ import annotations

import csv
import dataclasses
import functools
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bridge import BridgeTables, eval_index, sample_forward
from .checkpoint import (
    load_checkpoint,
    load_into,
    restore_generator,
    restore_optimizer,
    save_checkpoint,
)
from .control import ControlBranch, ECDBModel
from .denoiser import UNetDenoiser
from .errors import ConfigError, DomainError, TrainingDivergence
from .schedule import ProcessSchedule

log = logging.getLogger(__name__)

LOSS_KINDS = ("eq4_full", "eps_mse")
PHASE_LR = {"pretrain": 1e-4, "ecdb": 2e-5}


@dataclass
class TrainConfig:
    total_steps: int = 20_000
    # None: the phase default from PHASE_LR
    lr_initial: float | None = None
    # None: halve at 1/4, 1/2 and 3/4 of total_steps (distinct, positive)
    lr_halve_at: tuple[int, ...] | None = None
    batch_size: int = 8
    loss_kind: str = "eq4_full"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    checkpoint_every: int = 0
    log_every: int = 50
    history: int = 1000
    chm: bool = True
    dfm: bool = True
    fusion_schedule: bool = True

    def halve_points(self) -> tuple[int, ...]:
        if self.lr_halve_at is not None:
            return tuple(int(h) for h in self.lr_halve_at)
        n = self.total_steps
        # very short runs would repeat a point or halve before step 1
        return tuple(sorted({h for h in (n // 4, n // 2, 3 * n // 4) if h > 0}))

    def for_phase(self, phase: str) -> "TrainConfig":
        if self.lr_initial is not None:
            return self
        return dataclasses.replace(self, lr_initial=PHASE_LR[phase])

    def validate(self) -> None:
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.lr_initial is not None and not self.lr_initial > 0:
            raise ConfigError("lr_initial must be positive")
        h = self.halve_points()
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ConfigError(f"lr_halve_at must be strictly increasing, got {h}")
        if h and h[-1] >= self.total_steps:
            raise ConfigError("lr_halve_at entries must be below total_steps")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for optimizer update number ``step`` (1-based)."""
    if cfg.lr_initial is None:
        raise ConfigError("lr_initial is unresolved; call TrainConfig.for_phase first")
    passed = sum(step > h for h in cfg.halve_points())
    return cfg.lr_initial * 0.5**passed


@functools.lru_cache(maxsize=32)
def _tables(sched: ProcessSchedule, dtype: torch.dtype) -> BridgeTables:
    return BridgeTables(sched, dtype=dtype)


def _as_index(t_index, batch: int) -> torch.Tensor:
    idx = torch.as_tensor(t_index, dtype=torch.long).reshape(-1)
    if idx.numel() == 1:
        idx = idx.expand(batch)
    return idx


def _draw(sched, x0, xT, idx, generator, noise):
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = sample_forward(sched, x0, xT, sched.grid[idx.numpy()], noise)
    return x_t, noise


def loss_eq4(sched: ProcessSchedule, model, x0, xT, t_index, generator=None, noise=None):
    """Posterior-mean matching loss.

    The model's Euler step from ``x_t`` is compared against the exact
    Gaussian posterior mean of ``x_{t-1}`` given ``(x_t, x_0, x_T)``. The
    squared residual, summed over pixels, is weighted by ``1 / (2 g_t^2)``
    and averaged over the batch.
    """
    idx = _as_index(t_index, x0.shape[0])
    if torch.any(idx < 1) or torch.any(idx > sched.n_steps):
        raise DomainError(f"t_index must be in [1, {sched.n_steps}]")
    tab = _tables(sched, x0.dtype)
    nd = x0.ndim
    e = eval_index(idx, sched.n_steps)
    x_t, _ = _draw(sched, x0, xT, idx, generator, noise)

    eps = model(x_t, xT, tab.t[e])

    a = tab.gather("a", idx, nd)
    b = tab.gather("b", idx, nd)
    sp2 = tab.gather("sp2", idx, nd)
    sp2_prev = tab.gather("sp2", idx - 1, nd)
    m_prev = tab.gather("c0", idx - 1, nd) * x0 + tab.gather("cT", idx - 1, nd) * xT
    pinned = sp2 == 0
    denom = torch.where(pinned, torch.ones_like(sp2), sp2)
    post = (sp2_prev * a * (x_t - b * xT) + (sp2 - a * a * sp2_prev) * m_prev) / denom
    post = torch.where(pinned, m_prev, post)

    gain = tab.gather("gain", e, nd)
    g2 = tab.gather("g2", e, nd)
    sp = tab.gather("sp", e, nd)
    pred = x_t - (gain * (xT - x_t) + g2 * eps / sp) * tab.dt
    resid = post - pred
    per_item = resid.pow(2).flatten(1).sum(1) / (2.0 * g2.flatten())
    return per_item.mean()


def loss_eps_mse(sched: ProcessSchedule, model, x0, xT, t_index, generator=None, noise=None):
    """Mean squared error between predicted and injected noise.

    ``t_index = n_steps`` is mapped to ``n_steps - 1`` where the noise is
    identifiable (the state is pinned at ``T``).
    """
    idx = _as_index(t_index, x0.shape[0])
    if torch.any(idx < 1) or torch.any(idx > sched.n_steps):
        raise DomainError(f"t_index must be in [1, {sched.n_steps}]")
    e = eval_index(idx, sched.n_steps)
    tab = _tables(sched, x0.dtype)
    x_t, noise = _draw(sched, x0, xT, e, generator, noise)
    eps = model(x_t, xT, tab.t[e])
    return (eps - noise).pow(2).mean()


LOSSES = {"eq4_full": loss_eq4, "eps_mse": loss_eps_mse}


# -- datasets ------------------------------------------------------------------


def as_tensors(dataset, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Accept a ``(hq, lq)`` pair or any object with ``hq``/``lq`` arrays."""
    if isinstance(dataset, (tuple, list)):
        hq, lq = dataset
    else:
        hq, lq = dataset.hq, dataset.lq
    hq = torch.as_tensor(np.asarray(hq) if not isinstance(hq, torch.Tensor) else hq, dtype=dtype)
    lq = torch.as_tensor(np.asarray(lq) if not isinstance(lq, torch.Tensor) else lq, dtype=dtype)
    if hq.shape != lq.shape:
        raise ConfigError(f"hq {tuple(hq.shape)} and lq {tuple(lq.shape)} differ")
    if hq.shape[0] == 0:
        raise ConfigError("dataset is empty")
    return hq, lq


def validation_loss(sched, model, dataset, seed: int = 1234, loss_kind: str = "eps_mse",
                    batch_size: int = 64) -> float:
    """Deterministic validation loss: fixed ``t_index`` and noise per item."""
    hq, lq = as_tensors(dataset, next(model.parameters()).dtype)
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randint(1, sched.n_steps + 1, (hq.shape[0],), generator=gen)
    noise = torch.randn(hq.shape, generator=gen, dtype=hq.dtype)
    fn = LOSSES[loss_kind]
    total = 0.0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for lo in range(0, hq.shape[0], batch_size):
            sl = slice(lo, lo + batch_size)
            n = hq[sl].shape[0]
            total += float(fn(sched, model, hq[sl], lq[sl], idx[sl], noise=noise[sl])) * n
    model.train(was_training)
    return total / hq.shape[0]


# -- loop -------------------------------------------------------------------------


@dataclass
class TrainRun:
    net: torch.nn.Module
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    param_names: list[str]
    step: int = 0
    lr: float = 0.0
    losses: deque = field(default_factory=lambda: deque(maxlen=1000))
    first_loss: float | None = None
    checkpoint_paths: list[Path] = field(default_factory=list)


def _trainable(net: torch.nn.Module) -> tuple[list[str], list[torch.nn.Parameter]]:
    named = [(n, p) for n, p in net.named_parameters() if p.requires_grad]
    return [n for n, _ in named], [p for _, p in named]


def _ckpt_name(step: int) -> str:
    return f"step_{step:07d}.ckpt"


def train_loop(
    cfg: TrainConfig,
    sched: ProcessSchedule,
    model: UNetDenoiser,
    dataset,
    branch: ControlBranch | None = None,
    run_dir: str | Path | None = None,
    resume: str | Path | None = None,
    config_hash: str | None = None,
    meta: dict | None = None,
    callback=None,
) -> TrainRun:
    """Train the denoiser (no branch) or the control branch against a frozen denoiser.

    Writes ``metrics.csv`` (``step,loss,lr,seconds``) and checkpoints under
    ``run_dir/checkpoints`` when ``run_dir`` is given. ``callback(step,
    loss)`` is invoked after every update.
    """
    cfg = cfg.for_phase("ecdb" if branch is not None else "pretrain")
    cfg.validate()
    if branch is not None:
        if not model.frozen:
            raise ConfigError("ECDB training requires a frozen denoiser")
        branch.fusion = dataclasses.replace(
            branch.fusion, chm=cfg.chm, dfm=cfg.dfm, schedule=cfg.fusion_schedule
        )
        net: torch.nn.Module = ECDBModel(model, branch)
    else:
        if model.frozen:
            raise ConfigError("pretraining requires an unfrozen denoiser")
        net = model
    dtype = next(net.parameters()).dtype
    hq, lq = as_tensors(dataset, dtype)
    loss_fn = LOSSES[cfg.loss_kind]

    names, params = _trainable(net)
    if not params:
        raise ConfigError("no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=cfg.lr_initial, betas=cfg.betas, eps=cfg.adam_eps)
    generator = torch.Generator().manual_seed(int(cfg.seed))
    run = TrainRun(net, optimizer, generator, names, losses=deque(maxlen=cfg.history))

    if resume is not None:
        ckpt = load_checkpoint(resume)
        load_into(net, ckpt)
        restore_optimizer(optimizer, names, ckpt)
        restore_generator(generator, ckpt)
        run.step = ckpt.step

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = writer = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.csv"
        fresh = resume is None or not metrics_path.exists()
        metrics_fh = metrics_path.open("w" if fresh else "a", newline="")
        writer = csv.writer(metrics_fh)
        if fresh:
            writer.writerow(["step", "loss", "lr", "seconds"])

    def checkpoint(step):
        path = run_dir / "checkpoints" / _ckpt_name(step)
        save_checkpoint(path, net, step, optimizer, names, generator, config_hash, meta)
        run.checkpoint_paths.append(path)

    n = hq.shape[0]
    start = time.perf_counter()
    net.train()
    try:
        for step in range(run.step + 1, cfg.total_steps + 1):
            lr = lr_at(step, cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            pick = torch.randint(0, n, (cfg.batch_size,), generator=generator)
            t_index = torch.randint(1, sched.n_steps + 1, (cfg.batch_size,), generator=generator)
            loss = loss_fn(sched, net, hq[pick], lq[pick], t_index, generator=generator)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingDivergence(step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.max_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(params, cfg.max_grad_norm)
            optimizer.step()

            run.step, run.lr = step, lr
            run.losses.append(value)
            if run.first_loss is None:
                run.first_loss = value
            if writer is not None and (step % cfg.log_every == 0 or step == cfg.total_steps):
                writer.writerow([step, f"{value:.8g}", f"{lr:.8g}", f"{time.perf_counter() - start:.3f}"])
                metrics_fh.flush()
            if step % max(cfg.log_every, 1) == 0:
                log.info("step %d loss %.5g lr %.3g", step, value, lr)
            if run_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoint(step)
            if callback is not None:
                callback(step, value)
        if run_dir is not None and (not run.checkpoint_paths or run.checkpoint_paths[-1].name != _ckpt_name(run.step)):
            checkpoint(run.step)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    net.eval()
    return run


def pretrain_dm(model: UNetDenoiser, dataset, train_cfg: TrainConfig, sched: ProcessSchedule,
                **kwargs) -> UNetDenoiser:
    """Train the denoiser alone; the returned model is ready to be frozen."""
    train_loop(train_cfg, sched, model, dataset, branch=None, **kwargs)
    return model
