"""PSNR and single-scale SSIM, with the BT.601 luma convention used for deraining."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, ShapeError


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_plane(x, y, win, c1, c2) -> float:
    def filt(z):
        return fftconvolve(z, win, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0) -> float:
    """Mean SSIM over all fully-contained windows, averaged over channels.

    Accepts ``(H, W)`` or ``(C, H, W)`` arrays.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeError(f"image {a.shape[-2:]} is smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = [_ssim_plane(a[c], b[c], win, c1, c2) for c in range(a.shape[0])]
    return float(np.clip(np.mean(vals), -1.0, 1.0))


def to_y_channel(rgb) -> np.ndarray:
    """BT.601 luma with studio-swing output: ``(65.481 R + 128.553 G + 24.966 B + 16) / 255``.

    Input is ``(3, H, W)`` in ``[0, 1]``; returns ``(1, H, W)`` in ``[16/255, 235/255]``.
    """
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) RGB, got {rgb.shape}")
    r, g, b = rgb
    return ((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)[None]


def quantize_float(x) -> np.ndarray:
    return np.rint(np.clip(np.asarray(x, dtype=float), 0, 1) * 255.0) / 255.0


@dataclass
class MetricReport:
    ids: list[str]
    psnr: list[float]
    ssim: list[float]
    channel_mode: str = "rgb"
    extra: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def aggregate(self) -> dict:
        return {
            "n": len(self.ids),
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "channel_mode": self.channel_mode,
            **self.extra,
        }


def evaluate_images(restored, reference, ids=None, channel_mode: str = "rgb",
                    quantize: bool = True) -> MetricReport:
    """Per-image PSNR/SSIM over batches ``(N, C, H, W)``.

    Values are quantized to 8 bits first unless ``quantize`` is False.
    """
    restored, reference = _pair(restored, reference)
    if channel_mode not in ("rgb", "y_channel"):
        raise ConfigError(f"channel_mode must be 'rgb' or 'y_channel', got {channel_mode!r}")
    ids = list(ids) if ids is not None else [f"{i:06d}" for i in range(restored.shape[0])]
    ps, ss = [], []
    for x, y in zip(restored, reference):
        if quantize:
            x, y = quantize_float(x), quantize_float(y)
        if channel_mode == "y_channel":
            x, y = to_y_channel(x), to_y_channel(y)
        ps.append(psnr(x, y))
        ss.append(ssim(x, y))
    return MetricReport(ids, ps, ss, channel_mode)
