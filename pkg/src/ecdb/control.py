"""Zero-initialized conditional control branch and the DFM fusion schedule.

The branch has three parts. Two hint stacks read the condition: one on
``x_T`` (CHM) and one on the residual ``x_T - x_t`` (DFM). They are fused at
the bottleneck with a projection of ``x_t``. A control module (CM), a copy of
the denoiser's decoder, turns the fused features into one additive injection
per decoder scale through zero-initialized taps. At initialization every
injection is exactly zero, so the composed model reproduces the frozen
denoiser bit for bit.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import EncoderState, UNetDenoiser
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class FusionSchedule:
    a: float = 5.0
    T: float = 1.0
    chm: bool = True
    dfm: bool = True
    # False: DFM features are added with unit weight
    schedule: bool = True

    def validate(self) -> None:
        if not self.a > 0:
            raise ConfigError(f"fusion rate a must be positive, got {self.a}")


def fusion_weight(t, a: float = 5.0, T: float = 1.0):
    """DFM weight ``exp(-a s) - exp(-a) s`` at normalized time ``s = t / T``.

    Equals 1 at ``t = 0`` and 0 at ``t = T``. Accepts floats, numpy arrays
    and torch tensors.
    """
    s = t / T
    if isinstance(s, torch.Tensor):
        return torch.exp(-a * s) - math.exp(-a) * s
    s = np.asarray(s, dtype=float)
    out = np.exp(-a * s) - np.exp(-a) * s
    return float(out) if out.ndim == 0 else out


def hint_strides(n_scales: int) -> list[int]:
    n_layers = max(4, n_scales + 1)
    return [1] + [2] * (n_scales - 1) + [1] * (n_layers - n_scales)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class HintStack(nn.Module):
    """Conv ladder down to the bottleneck resolution, SiLU between layers.

    With ``zero_out`` the final 3x3 conv starts at exactly zero.
    """

    def __init__(self, in_ch: int, widths: tuple[int, ...], out_ch: int, zero_out: bool = True):
        super().__init__()
        n_scales = len(widths)
        layers = []
        ch, scale = in_ch, 0
        for stride in hint_strides(n_scales):
            scale += stride == 2
            layers.append(nn.Conv2d(ch, widths[scale], 3, stride=stride, padding=1))
            ch = widths[scale]
        self.layers = nn.ModuleList(layers)
        self.out = nn.Conv2d(ch, out_ch, 3, padding=1)
        if zero_out:
            zero_module(self.out)

    def forward(self, x):
        for conv in self.layers:
            x = F.silu(conv(x))
        return self.out(x)


class ControlModule(nn.Module):
    """Decoder-copy trunk with one zero conv tap per decoder scale.

    The trunk starts at the bottleneck and mirrors the denoiser's decoder
    (the scale-0 stage is omitted because nothing taps its output). It
    reuses the denoiser's encoder skips.
    """

    def __init__(self, dm: UNetDenoiser):
        super().__init__()
        n = dm.arch.n_scales
        self.n_scales = n
        self.trunk = nn.ModuleList(copy.deepcopy(dm.dec[s]) for s in range(1, n))
        self.trunk_up = nn.ModuleList(copy.deepcopy(dm.up[s]) for s in range(1, n))
        self.taps = nn.ModuleList(
            zero_module(nn.Conv2d(c, c, 1)) for c in dm.decoder_in_channels
        )
        self.trunk.requires_grad_(True)
        self.trunk_up.requires_grad_(True)

    def forward(self, fused, temb, skips) -> list[torch.Tensor]:
        injections: list[torch.Tensor | None] = [None] * self.n_scales
        h = fused
        for s in reversed(range(self.n_scales)):
            if h.shape[1] != self.taps[s].in_channels:
                raise ShapeError(
                    f"CM input at scale {s} has {h.shape[1]} channels, expected {self.taps[s].in_channels}"
                )
            injections[s] = self.taps[s](h)
            if s > 0:
                h = self.trunk[s - 1](h, skips[s], temb)
                h = self.trunk_up[s - 1](h)
        return injections


def cm_forward(cm: ControlModule, fused, time_embedding, skips) -> list[torch.Tensor]:
    return cm(fused, time_embedding, skips)


class ControlBranch(nn.Module):
    """CHM, DFM, the ``x_t`` projection and CM, built against a given denoiser."""

    def __init__(self, dm: UNetDenoiser, fusion: FusionSchedule = FusionSchedule()):
        super().__init__()
        fusion.validate()
        arch = dm.arch
        widths = arch.widths
        c = arch.image_channels
        bottleneck = widths[-1]
        self.fusion = fusion
        self.x_proj = HintStack(c, widths, bottleneck, zero_out=False)
        self.chm = HintStack(c, widths, bottleneck)
        self.dfm = HintStack(c, widths, bottleneck)
        self.cm = ControlModule(dm)

    def fuse(self, x_t, x_T, t) -> torch.Tensor:
        return fuse(x_t, x_T, t, self.x_proj, self.chm, self.dfm, self.fusion)

    def injections(self, x_t, x_T, t, state: EncoderState) -> list[torch.Tensor]:
        return self.cm(self.fuse(x_t, x_T, t), state.temb, state.skips)


def fuse(x_t, x_T, t, x_proj: HintStack, chm: HintStack, dfm: HintStack, fs: FusionSchedule):
    """``proj(x_t) + CHM(x_T) + W(t) * DFM(x_T - x_t)`` with ablation toggles."""
    if x_t.shape != x_T.shape:
        raise ShapeError(f"x_t {tuple(x_t.shape)} and x_T {tuple(x_T.shape)} differ")
    fused = x_proj(x_t)
    if fs.chm:
        fused = fused + chm(x_T)
    if fs.dfm:
        feat = dfm(x_T - x_t)
        if fs.schedule:
            t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
            w = fusion_weight(t, fs.a, fs.T)
            feat = w.reshape(-1, 1, 1, 1) * feat
        fused = fused + feat
    return fused


class ECDBModel(nn.Module):
    """Frozen denoiser plus trainable control branch; same call signature as the denoiser."""

    def __init__(self, dm: UNetDenoiser, branch: ControlBranch | None = None,
                 fusion: FusionSchedule = FusionSchedule()):
        super().__init__()
        self.dm = dm.freeze()
        self.branch = branch if branch is not None else ControlBranch(dm, fusion)

    @property
    def arch(self):
        return self.dm.arch

    def forward(self, x_t, x_T, t):
        state = self.dm.encode(x_t, x_T, t)
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x_t.shape[0])
        inj = self.branch.injections(x_t, x_T, t, state)
        return self.dm.decode(state, inj)

    def trainable_parameters(self):
        return [p for p in self.branch.parameters() if p.requires_grad]


def dfm_feature_probe(dfm: HintStack, x_T: torch.Tensor, x_t_series) -> list[tuple[float, torch.Tensor]]:
    """DFM features for each ``(t, x_t)`` in ``x_t_series``."""
    out = []
    with torch.no_grad():
        for t, x_t in x_t_series:
            out.append((float(t), dfm(x_T - x_t)))
    return out
