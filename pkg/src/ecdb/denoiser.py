"""Small time-conditioned U-Net predicting the bridge noise ``eps(x_t, x_T, t)``."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class DenoiserArch:
    image_channels: int = 3
    base_width: int = 32
    n_scales: int = 3
    time_embed_dim: int = 64
    blocks_per_scale: int = 1
    channel_mult: tuple[int, ...] | None = None
    T: float = 1.0

    @property
    def in_channels(self) -> int:
        return 2 * self.image_channels

    @property
    def widths(self) -> tuple[int, ...]:
        mult = self.channel_mult or tuple(min(2**s, 2) for s in range(self.n_scales))
        return tuple(self.base_width * m for m in mult)

    def validate(self) -> None:
        if self.n_scales < 1 or self.base_width < 1 or self.blocks_per_scale < 1:
            raise ConfigError("n_scales, base_width and blocks_per_scale must be positive")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.channel_mult is not None and len(self.channel_mult) != self.n_scales:
            raise ConfigError("channel_mult must have one entry per scale")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.widths_mult())
        return d

    def widths_mult(self) -> tuple[int, ...]:
        return tuple(w // self.base_width for w in self.widths)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserArch":
        d = dict(d)
        if d.get("channel_mult") is not None:
            d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


def num_groups(channels: int, max_groups: int = 8) -> int:
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


def sinusoidal_features(t_norm: torch.Tensor, dim: int) -> torch.Tensor:
    """``[sin(t w_k), cos(t w_k)]`` with ``w_k = 10000**(-k / (dim/2))``."""
    half = dim // 2
    k = torch.arange(half, dtype=t_norm.dtype, device=t_norm.device)
    freqs = torch.exp(-math.log(10000.0) * k / half)
    args = t_norm.reshape(-1, 1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int, T: float = 1.0):
        super().__init__()
        self.dim = dim
        self.T = T
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_features(t / self.T, self.dim))


def time_embed(t, dim: int, mlp: TimeEmbedding | None = None) -> torch.Tensor:
    """Embed times ``t`` (scalar or ``(batch,)``); without ``mlp`` return the raw sinusoids."""
    t = torch.as_tensor(t, dtype=torch.get_default_dtype()).reshape(-1)
    if dim % 2:
        raise ConfigError("embedding dimension must be even")
    if mlp is None:
        return sinusoidal_features(t, dim)
    return mlp(t.to(next(mlp.parameters()).dtype))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(num_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(num_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DecoderStage(nn.Module):
    """Decoder blocks of one scale: the first block consumes ``cat(h, skip)``."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, temb_dim: int, n_blocks: int):
        super().__init__()
        blocks = [ResBlock(in_ch + skip_ch, out_ch, temb_dim)]
        blocks += [ResBlock(out_ch, out_ch, temb_dim) for _ in range(n_blocks - 1)]
        self.blocks = nn.ModuleList(blocks)

    def forward(self, h, skip, temb):
        h = torch.cat([h, skip], dim=1)
        for blk in self.blocks:
            h = blk(h, temb)
        return h


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


@dataclass
class EncoderState:
    """Everything the decoder (and a control branch) needs from the encoder."""

    skips: list[torch.Tensor]
    bottleneck: torch.Tensor
    temb: torch.Tensor
    shape: tuple[int, ...] = field(default=())


class UNetDenoiser(nn.Module):
    """U-Net over ``cat(x_t, x_T)`` with additive injection points at decoder inputs.

    ``decoder_in_channels[s]`` is the channel count of the tensor entering
    the decoder at scale ``s``; control injections must match it.
    """

    def __init__(self, arch: DenoiserArch = DenoiserArch()):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.frozen = False
        w = arch.widths
        n = arch.n_scales
        d = arch.time_embed_dim

        self.time_mlp = TimeEmbedding(d, arch.T)
        self.conv_in = nn.Conv2d(arch.in_channels, w[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        ch = w[0]
        for s in range(n):
            blocks = nn.ModuleList()
            for _ in range(arch.blocks_per_scale):
                blocks.append(ResBlock(ch, w[s], d))
                ch = w[s]
            self.enc.append(blocks)
            if s < n - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = ResBlock(ch, ch, d)

        self.decoder_in_channels = tuple(w[s + 1] if s < n - 1 else w[n - 1] for s in range(n))
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for s in range(n):
            self.dec.append(
                DecoderStage(self.decoder_in_channels[s], w[s], w[s], d, arch.blocks_per_scale)
            )
            self.up.append(Upsample(w[s]) if s > 0 else nn.Identity())
        self.norm_out = nn.GroupNorm(num_groups(w[0]), w[0])
        self.conv_out = nn.Conv2d(w[0], arch.image_channels, 3, padding=1)

    # -- passes ---------------------------------------------------------------

    def check_input(self, x_t: torch.Tensor, x_T: torch.Tensor) -> None:
        if x_t.shape != x_T.shape:
            raise ShapeError(f"x_t {tuple(x_t.shape)} and x_T {tuple(x_T.shape)} differ")
        if x_t.ndim != 4 or x_t.shape[1] != self.arch.image_channels:
            raise ShapeError(
                f"expected (B, {self.arch.image_channels}, H, W), got {tuple(x_t.shape)}"
            )
        f = 2 ** (self.arch.n_scales - 1)
        if x_t.shape[2] % f or x_t.shape[3] % f:
            raise ShapeError(f"spatial size {tuple(x_t.shape[2:])} not divisible by {f}")

    def encode(self, x_t, x_T, t) -> EncoderState:
        self.check_input(x_t, x_T)
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x_t.shape[0])
        temb = self.time_mlp(t)
        h = self.conv_in(torch.cat([x_t, x_T], dim=1))
        skips = []
        for s, blocks in enumerate(self.enc):
            for blk in blocks:
                h = blk(h, temb)
            skips.append(h)
            if s < self.arch.n_scales - 1:
                h = self.down[s](h)
        h = self.mid(h, temb)
        return EncoderState(skips, h, temb, tuple(x_t.shape))

    def decode(self, state: EncoderState, injections=None) -> torch.Tensor:
        n = self.arch.n_scales
        if injections is not None and len(injections) != n:
            raise ShapeError(f"expected {n} injection maps, got {len(injections)}")
        h = state.bottleneck
        for s in reversed(range(n)):
            if injections is not None and injections[s] is not None:
                inj = injections[s]
                if inj.shape != h.shape:
                    raise ShapeError(
                        f"injection at scale {s} has shape {tuple(inj.shape)}, expected {tuple(h.shape)}"
                    )
                h = h + inj
            h = self.dec[s](h, state.skips[s], state.temb)
            h = self.up[s](h)
        return self.conv_out(F.silu(self.norm_out(h)))

    def forward(self, x_t, x_T, t, control_injections=None) -> torch.Tensor:
        return self.decode(self.encode(x_t, x_T, t), control_injections)

    # -- parameter bookkeeping -------------------------------------------------

    def freeze(self) -> "UNetDenoiser":
        self.requires_grad_(False)
        self.frozen = True
        return self

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def checksum(self) -> str:
        return module_checksum(self)


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def dm_forward(model: UNetDenoiser, x_t, x_T, t, control_injections=None) -> torch.Tensor:
    return model(x_t, x_T, t, control_injections)
