"""Self-describing binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"ECDBCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header, keys sorted
    20+H    ...   payload: segments back to back, in header order

The header holds ``arch`` (denoiser architecture), ``fusion`` (control
branch settings, or null), ``step``, ``config_hash``, ``meta``, an
``optimizer`` block (hyperparameters, per-parameter step counts, parameter
order), and ``segments``: a list of ``{name, dtype, shape, offset, nbytes}``
with ``offset`` relative to the payload start. Segment names are prefixed
by group: ``model/`` (denoiser), ``branch/`` (control branch), ``optim/``
(Adam moments as ``optim/<param>/exp_avg`` and ``.../exp_avg_sq``) and
``rng/torch`` (generator state, uint8). Parameters and moments are stored
as ``<f4``. The file contains no timestamps, so identical training state
gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .control import ControlBranch, ECDBModel, FusionSchedule
from .denoiser import DenoiserArch, UNetDenoiser
from .errors import CheckpointError

MAGIC = b"ECDBCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    header: dict
    segments: dict[str, np.ndarray] = field(repr=False)

    @property
    def arch(self) -> DenoiserArch:
        return DenoiserArch.from_dict(self.header["arch"])

    @property
    def fusion(self) -> FusionSchedule | None:
        f = self.header.get("fusion")
        return None if f is None else FusionSchedule(**f)

    @property
    def step(self) -> int:
        return int(self.header["step"])

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.segments.items() if k.startswith(p)}


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        k: v.detach().cpu().numpy().astype("<f4")
        for k, v in module.state_dict().items()
    }


def save_checkpoint(
    path: str | Path,
    model: UNetDenoiser | ECDBModel,
    step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    param_names: list[str] | None = None,
    generator: torch.Generator | None = None,
    config_hash: str | None = None,
    meta: dict | None = None,
) -> Path:
    """Write ``model`` (and optionally optimizer/RNG state) atomically to ``path``.

    ``param_names`` lists the names of the optimizer's parameters, in the
    optimizer's order, relative to ``model``.
    """
    path = Path(path)
    segments: list[tuple[str, np.ndarray]] = []
    if isinstance(model, ECDBModel):
        dm, branch, fusion = model.dm, model.branch, model.branch.fusion
    else:
        dm, branch, fusion = model, None, None
    segments += [(f"model/{k}", v) for k, v in _state_arrays(dm).items()]
    if branch is not None:
        segments += [(f"branch/{k}", v) for k, v in _state_arrays(branch).items()]

    optim_header = None
    if optimizer is not None:
        if param_names is None:
            raise CheckpointError("param_names required when saving optimizer state")
        params = [p for g in optimizer.param_groups for p in g["params"]]
        if len(params) != len(param_names):
            raise CheckpointError("param_names does not match the optimizer's parameters")
        group = optimizer.param_groups[0]
        steps = {}
        for name, p in zip(param_names, params):
            st = optimizer.state.get(p)
            if not st:
                continue
            steps[name] = float(st["step"])
            segments.append((f"optim/{name}/exp_avg", st["exp_avg"].detach().cpu().numpy().astype("<f4")))
            segments.append((f"optim/{name}/exp_avg_sq", st["exp_avg_sq"].detach().cpu().numpy().astype("<f4")))
        optim_header = {
            "lr": float(group["lr"]),
            "betas": [float(b) for b in group["betas"]],
            "eps": float(group["eps"]),
            "params": list(param_names),
            "steps": steps,
        }
    if generator is not None:
        segments.append(("rng/torch", generator.get_state().numpy().astype(np.uint8)))

    seg_meta = []
    offset = 0
    for name, arr in segments:
        arr = np.ascontiguousarray(arr)
        seg_meta.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": int(arr.nbytes),
        })
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "arch": dm.arch.to_dict(),
        "fusion": None if fusion is None else asdict(fusion),
        "step": int(step),
        "config_hash": config_hash,
        "meta": meta or {},
        "optimizer": optim_header,
        "segments": seg_meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in segments:
            fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path} is truncated")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header") from exc
    base = start + hlen
    segments = {}
    for seg in header["segments"]:
        lo = base + seg["offset"]
        hi = lo + seg["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"segment {seg['name']} runs past end of file")
        arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(seg["dtype"])).reshape(seg["shape"])
        segments[seg["name"]] = arr.copy()
    return Checkpoint(header, segments)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], what: str) -> None:
    expected = module.state_dict()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(expected))[:3]
        raise CheckpointError(f"{what} segments mismatch (missing {missing}, unexpected {extra})")
    state = {}
    for k, ref in expected.items():
        arr = arrays[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{what} segment {k} has shape {arr.shape}, expected {tuple(ref.shape)}")
        state[k] = torch.from_numpy(arr.astype(np.float32)).to(ref.dtype)
    module.load_state_dict(state)


def load_into(model: UNetDenoiser | ECDBModel, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into an existing model; arch must match."""
    if ckpt.arch.to_dict() != model.arch.to_dict():
        raise CheckpointError(f"architecture mismatch: checkpoint {ckpt.arch} vs model {model.arch}")
    if isinstance(model, ECDBModel):
        _load_state(model.dm, ckpt.group("model"), "model")
        branch = ckpt.group("branch")
        if branch:
            _load_state(model.branch, branch, "branch")
    else:
        _load_state(model, ckpt.group("model"), "model")


def build_model(ckpt: Checkpoint) -> UNetDenoiser | ECDBModel:
    """Instantiate the model a checkpoint describes (ECDB if it carries a branch)."""
    dm = UNetDenoiser(ckpt.arch)
    _load_state(dm, ckpt.group("model"), "model")
    if not ckpt.group("branch"):
        return dm
    fusion = ckpt.fusion or FusionSchedule()
    model = ECDBModel(dm, ControlBranch(dm, fusion))
    _load_state(model.branch, ckpt.group("branch"), "branch")
    return model


def restore_optimizer(optimizer: torch.optim.Optimizer, param_names: list[str], ckpt: Checkpoint) -> None:
    info = ckpt.header.get("optimizer")
    if info is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    if list(info["params"]) != list(param_names):
        raise CheckpointError("optimizer parameter list differs from checkpoint")
    params = [p for g in optimizer.param_groups for p in g["params"]]
    moments = ckpt.group("optim")
    for name, p in zip(param_names, params):
        if name not in info["steps"]:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(info["steps"][name], dtype=torch.float32),
            "exp_avg": torch.from_numpy(moments[f"{name}/exp_avg"].astype(np.float32)).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(moments[f"{name}/exp_avg_sq"].astype(np.float32)).to(p.dtype),
        }
    for g in optimizer.param_groups:
        g["lr"] = info["lr"]


def restore_generator(generator: torch.Generator, ckpt: Checkpoint) -> None:
    state = ckpt.segments.get("rng/torch")
    if state is None:
        raise CheckpointError("checkpoint carries no RNG state")
    generator.set_state(torch.from_numpy(state.astype(np.uint8)))
