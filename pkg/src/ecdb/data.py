"""Synthetic paired restoration datasets: generation, degradation and PNG persistence.

Images are float arrays of shape ``(N, C, H, W)`` in ``[0, 1]``. On disk a
dataset is ``root/{split}/{hq,lq}/{id}.png`` (8-bit) plus ``root/manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from skimage.draw import line as draw_line

from .errors import ConfigError, PairingError

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DEGRADATIONS = ("mask", "streaks", "downsample")


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "mask"
    # mask
    coverage: float = 0.15
    stroke_width: int = 1
    # streaks
    angle: float = 75.0
    density: float = 0.08
    intensity: float = 0.6
    # downsample
    factor: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in DEGRADATIONS:
            raise ConfigError(f"unknown degradation {self.kind!r}; expected one of {DEGRADATIONS}")
        if self.kind == "mask":
            if not 0 <= self.coverage < 1:
                raise ConfigError(f"mask coverage must lie in [0, 1), got {self.coverage}")
            if self.stroke_width < 1:
                raise ConfigError("stroke_width must be >= 1")
        elif self.kind == "streaks":
            if not 0 < self.intensity <= 1:
                raise ConfigError(f"streak intensity must lie in (0, 1], got {self.intensity}")
            if not 0 < self.density < 1:
                raise ConfigError(f"streak density must lie in (0, 1), got {self.density}")
        elif self.factor not in (2, 4):
            raise ConfigError(f"downsample factor must be 2 or 4, got {self.factor}")


def _image_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# -- HQ synthesis ------------------------------------------------------------------


def _one_hq(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((channels, size, size))
    for c in range(channels):
        gx, gy = rng.uniform(-1, 1, 2)
        img[c] = rng.uniform(0, 1) + gx * xx + gy * yy
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, channels)[:, None, None]
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.08, 0.35, 2)
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            hy, hx = rng.uniform(0.05, 0.3, 2)
            m = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        img = np.where(m[None], 0.4 * img + 0.6 * 2 * color, img)
    noise = ndimage.gaussian_filter(rng.standard_normal((channels, size, size)), sigma=(0, 1.5, 1.5))
    img = img + 0.5 * noise / (noise.std() + 1e-12) * rng.uniform(0.05, 0.25)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def synthesize_hq(n: int, size: int = 32, seed: int = 0, channels: int = 3) -> np.ndarray:
    """Procedural stand-ins for natural images: ramps, shapes and band-limited noise.

    Each image is rescaled to span ``[0, 1]`` exactly.
    """
    out = np.empty((n, channels, size, size))
    for i, rng in enumerate(_image_rngs(seed, n)):
        out[i] = _one_hq(rng, size, channels)
    return out


# -- degradations ------------------------------------------------------------------


def stroke_mask(rng: np.random.Generator, size: int, coverage: float, width: int) -> np.ndarray:
    """Boolean mask of thin random strokes covering about ``coverage`` of the pixels."""
    mask = np.zeros((size, size), dtype=bool)
    if coverage <= 0:
        return mask
    struct = np.ones((width, width), dtype=bool)
    target = coverage * size * size
    while mask.sum() < target:
        canvas = np.zeros_like(mask)
        y, x = rng.uniform(0, size - 1, 2)
        for _ in range(rng.integers(1, 4)):
            ang = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(0.15, 0.5) * size
            y2 = float(np.clip(y + length * math.sin(ang), 0, size - 1))
            x2 = float(np.clip(x + length * math.cos(ang), 0, size - 1))
            rr, cc = draw_line(int(round(y)), int(round(x)), int(round(y2)), int(round(x2)))
            canvas[rr, cc] = True
            y, x = y2, x2
        if width > 1:
            canvas = ndimage.binary_dilation(canvas, structure=struct)
        new = mask | canvas
        if new.sum() > target and mask.sum() > 0:
            # keep whichever side of the target is closer
            if new.sum() - target > target - mask.sum():
                break
        mask = new
    return mask


def streak_layer(rng: np.random.Generator, size: int, angle: float, density: float) -> np.ndarray:
    """Parallel bright segments at ``angle`` degrees covering about ``density`` of the pixels."""
    layer = np.zeros((size, size))
    if density <= 0:
        return layer
    rad = math.radians(angle)
    dy, dx = math.sin(rad), math.cos(rad)
    target = density * size * size
    while (layer > 0).sum() < target:
        length = rng.uniform(0.2, 0.6) * size
        y0, x0 = rng.uniform(0, size - 1, 2)
        y1 = float(np.clip(y0 + length * dy, 0, size - 1))
        x1 = float(np.clip(x0 + length * dx, 0, size - 1))
        rr, cc = draw_line(int(round(y0)), int(round(x0)), int(round(y1)), int(round(x1)))
        layer[rr, cc] = np.maximum(layer[rr, cc], rng.uniform(0.6, 1.0))
    return layer


def _bicubic(x: np.ndarray, size: tuple[int, int], antialias: bool) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))
    return F.interpolate(t, size=size, mode="bicubic", align_corners=False, antialias=antialias).numpy()


def degrade(hq: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply the degradation to a batch ``(N, C, H, W)``; deterministic per ``spec.seed``."""
    spec.validate()
    hq = np.asarray(hq, dtype=float)
    n, c, h, w = hq.shape
    if spec.kind == "downsample":
        small = _bicubic(hq, (h // spec.factor, w // spec.factor), antialias=True)
        return np.clip(_bicubic(small, (h, w), antialias=False), 0.0, 1.0)
    lq = hq.copy()
    for i, rng in enumerate(_image_rngs(spec.seed, n)):
        if spec.kind == "mask":
            m = stroke_mask(rng, h, spec.coverage, spec.stroke_width)
            lq[i][:, m] = 0.0
        else:
            layer = streak_layer(rng, h, spec.angle, spec.density)
            lq[i] = np.clip(lq[i] + spec.intensity * layer[None], 0.0, 1.0)
    return lq


# -- persistence --------------------------------------------------------------------


@dataclass
class PairedDataset:
    hq: np.ndarray
    lq: np.ndarray
    ids: list[str]
    split: str = "train"
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def __post_init__(self):
        if self.hq.shape != self.lq.shape:
            raise PairingError(f"hq {self.hq.shape} and lq {self.lq.shape} differ")
        if len(self.ids) != self.hq.shape[0]:
            raise PairingError("number of ids does not match number of images")

    def shuffled_ids(self, seed: int) -> list[str]:
        order = np.random.default_rng(seed).permutation(len(self.ids))
        return [self.ids[i] for i in order]


def quantize(x: np.ndarray) -> np.ndarray:
    """Float ``[0, 1]`` to uint8 with round-half-to-even."""
    return np.rint(np.clip(np.asarray(x, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float) / 255.0


def save_png(img: np.ndarray, path: str | Path, text: dict | None = None) -> None:
    """Write a ``(C, H, W)`` float image as 8-bit PNG (grayscale for C=1)."""
    from PIL.PngImagePlugin import PngInfo

    q = quantize(img)
    arr = q[0] if q.shape[0] == 1 else np.transpose(q, (1, 2, 0))
    info = None
    if text:
        info = PngInfo()
        for k, v in text.items():
            info.add_text(k, str(v))
    Image.fromarray(arr).save(path, pnginfo=info)


def load_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except (OSError, SyntaxError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise OSError(f"{path} is not an 8-bit image")
    arr = arr[None] if arr.ndim == 2 else np.transpose(arr[..., :3], (2, 0, 1))
    return dequantize(arr)


def save_pairs(dataset: PairedDataset, root: str | Path, split: str | None = None) -> Path:
    split = split or dataset.split
    base = Path(root) / split
    for sub in ("hq", "lq"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for i, ident in enumerate(dataset.ids):
        save_png(dataset.hq[i], base / "hq" / f"{ident}.png")
        save_png(dataset.lq[i], base / "lq" / f"{ident}.png")
    return base


def load_pairs(root: str | Path, split: str) -> PairedDataset:
    base = Path(root) / split
    hq_dir, lq_dir = base / "hq", base / "lq"
    if not hq_dir.is_dir() or not lq_dir.is_dir():
        raise PairingError(f"{base} lacks hq/ and lq/ directories")
    hq_ids = {p.stem for p in hq_dir.glob("*.png")}
    lq_ids = {p.stem for p in lq_dir.glob("*.png")}
    orphans = sorted(hq_ids ^ lq_ids)
    if orphans:
        side = "hq" if orphans[0] in hq_ids else "lq"
        raise PairingError(f"image {orphans[0]!r} in {side}/ has no counterpart")
    ids = sorted(hq_ids)
    if not ids:
        return PairedDataset(np.zeros((0, 3, 0, 0)), np.zeros((0, 3, 0, 0)), [], split, Path(root))
    hq = np.stack([load_png(hq_dir / f"{i}.png") for i in ids])
    lq = np.stack([load_png(lq_dir / f"{i}.png") for i in ids])
    if hq.shape != lq.shape:
        raise PairingError(f"hq and lq shapes differ in {base}")
    if hq.min() < 0 or hq.max() > 1 or lq.min() < 0 or lq.max() > 1:
        raise PairingError(f"values out of [0, 1] in {base}")
    return PairedDataset(hq, lq, ids, split, Path(root))


# -- task assembly ------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    task: str = "inpaint"
    size: int = 32
    channels: int = 3
    n_train: int = 4000
    n_val: int = 200
    n_test: int = 100
    seed: int = 0
    degradation: DegradationSpec = field(default_factory=DegradationSpec)

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


TASK_KINDS = {"inpaint": "mask", "derain": "streaks", "sr": "downsample"}


def make_task(cfg: DataConfig) -> dict[str, PairedDataset]:
    """Generate all three splits; ids are globally unique so splits are disjoint."""
    cfg.degradation.validate()
    out = {}
    offset = 0
    for k, split in enumerate(SPLITS):
        n = cfg.counts()[split]
        split_seed = int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0])
        hq = synthesize_hq(n, cfg.size, split_seed, cfg.channels)
        deg_seed = int(np.random.SeedSequence([cfg.degradation.seed, cfg.seed, k]).generate_state(1)[0])
        spec = DegradationSpec(**{**asdict(cfg.degradation), "seed": deg_seed})
        lq = degrade(hq, spec)
        ids = [f"{offset + i:06d}" for i in range(n)]
        offset += n
        out[split] = PairedDataset(hq, lq, ids, split)
    return out


def manifest(cfg: DataConfig) -> dict:
    return {
        "task": cfg.task,
        "spec": asdict(cfg.degradation),
        "counts": cfg.counts(),
        "seeds": {"data": cfg.seed, "degradation": cfg.degradation.seed},
        "size": cfg.size,
        "channels": cfg.channels,
        "format_version": FORMAT_VERSION,
    }


def write_task(cfg: DataConfig, root: str | Path, extra: dict | None = None) -> dict:
    root = Path(root)
    splits = make_task(cfg)
    for split, ds in splits.items():
        save_pairs(ds, root, split)
    man = manifest(cfg)
    if extra:
        man.update(extra)
    (root / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
    return man


def ids_hash(ids: list[str]) -> str:
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()
