"""Checkpoint directory format.

A checkpoint is a directory holding manifest.json plus one binary file per
parameter group (and per optimizer). Group files are a concatenation of
array records in manifest order; each record is:

    uint64 LE rank | rank x uint64 LE dims | float32 LE row-major data

The manifest carries the architecture spec, iteration counter, seeds, regime
and variant flags, group array names, optimizer descriptors, and a sha256
fingerprint over the parameter-group files. Bit-exact across platforms.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CrossganError

FORMAT = "crossgan-checkpoint-v1"


def write_record(f, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<Q", arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_record(f) -> np.ndarray:
    head = f.read(8)
    if len(head) != 8:
        raise CrossganError("truncated array record")
    rank = struct.unpack("<Q", head)[0]
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(f.read(4 * count), dtype="<f4", count=count)
    return data.reshape(shape).copy()


def write_arrays(path: Path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        for arr in arrays.values():
            write_record(f, arr)


def read_arrays(path: Path, names: list[str]) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as f:
        for name in names:
            out[name] = read_record(f)
        if f.read(1):
            raise CrossganError(f"{path}: trailing bytes after {len(names)} records")
    return out


def _group_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """State-dict tensors as float32 arrays; BN batch counters are excluded
    (unused under momentum-based running stats and not float-representable)."""
    out = {}
    for name, tensor in module.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        if tensor.dtype != torch.float32:
            raise CrossganError(f"checkpoint arrays must be float32, got {tensor.dtype} for {name}")
        out[name] = tensor.detach().cpu().numpy()
    return out


def _fingerprint(ckpt_dir: Path, group_names: list[str]) -> str:
    h = hashlib.sha256()
    for group in sorted(group_names):
        h.update(group.encode())
        h.update((ckpt_dir / f"{group}.bin").read_bytes())
    return h.hexdigest()


def save_checkpoint(
    ckpt_dir: str | Path,
    groups: dict[str, nn.Module],
    optimizers: dict,
    manifest_extra: dict,
) -> str:
    """Write a checkpoint; returns the parameter fingerprint."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest_extra)
    manifest["format"] = FORMAT
    manifest["groups"] = {}
    for group, module in groups.items():
        arrays = _group_arrays(module)
        manifest["groups"][group] = list(arrays)
        write_arrays(ckpt_dir / f"{group}.bin", arrays)
    manifest["optimizers"] = {}
    for label, opt in optimizers.items():
        arrays = {k: t.detach().cpu().numpy() for k, t in opt.state_arrays().items()}
        manifest["optimizers"][label] = {
            "algo": type(opt).__name__.lower(),
            "lr": opt.lr,
            "betas": list(getattr(opt, "betas", ())),
            "t": opt.t,
            "arrays": list(arrays),
        }
        write_arrays(ckpt_dir / f"opt_{label}.bin", arrays)
    manifest["fingerprint"] = _fingerprint(ckpt_dir, list(groups))
    (ckpt_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest["fingerprint"]


def read_manifest(ckpt_dir: str | Path) -> dict:
    path = Path(ckpt_dir) / "manifest.json"
    if not path.is_file():
        raise CrossganError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise CrossganError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_group(ckpt_dir: str | Path, manifest: dict, group: str,
               module: nn.Module):
    """Restore one parameter group into a live module, in place."""
    ckpt_dir = Path(ckpt_dir)
    names = manifest["groups"].get(group)
    if names is None:
        raise CrossganError(f"checkpoint has no parameter group {group!r}")
    arrays = read_arrays(ckpt_dir / f"{group}.bin", names)
    state = module.state_dict()
    with torch.no_grad():
        for name, arr in arrays.items():
            if name not in state:
                raise CrossganError(f"group {group!r} array {name!r} not in module")
            if tuple(state[name].shape) != arr.shape:
                raise CrossganError(
                    f"shape mismatch restoring {group}.{name}: "
                    f"{tuple(state[name].shape)} vs {arr.shape}"
                )
            state[name].copy_(torch.from_numpy(arr))


def load_optimizer(ckpt_dir: str | Path, manifest: dict, label: str, opt):
    desc = manifest["optimizers"].get(label)
    if desc is None:
        raise CrossganError(f"checkpoint has no optimizer state {label!r}")
    arrays = read_arrays(Path(ckpt_dir) / f"opt_{label}.bin", desc["arrays"])
    opt.load_state_arrays({k: torch.from_numpy(v) for k, v in arrays.items()}, desc["t"])


def fingerprint(ckpt_dir: str | Path) -> str:
    manifest = read_manifest(ckpt_dir)
    return manifest["fingerprint"]
