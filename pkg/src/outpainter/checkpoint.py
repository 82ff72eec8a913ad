"""Checkpoint serialization.

Weights go into an uncompressed npz written with pinned zip metadata so the
same state always produces byte-identical files; everything needed to rebuild
the modules (denoiser shape, schedule, fusion mode, ablation flags) goes into
a JSON sidecar next to it.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .conditioning import AblationFlags, Conditioner
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule
from .validation import ValidationError

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, arrays: dict[str, np.ndarray]):
    """Write an npz with sorted entries and a fixed zip timestamp."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {name: data[name] for name in data.files}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sidecar_path(checkpoint_path) -> Path:
    return Path(checkpoint_path).with_suffix(".json")


def _optimizer_arrays(optimizer: torch.optim.Optimizer, named_params: list) -> dict[str, np.ndarray]:
    arrays = {}
    for name, param in named_params:
        state = optimizer.state.get(param)
        if not state:
            continue
        for key, value in state.items():
            tensor = value if torch.is_tensor(value) else torch.tensor(float(value))
            arrays[f"optim/{name}/{key}"] = tensor.detach().cpu().numpy().astype("<f4")
    return arrays


def save_checkpoint(path, denoiser: Denoiser, conditioner: Conditioner,
                    schedule: NoiseSchedule, optimizer=None, meta: dict | None = None) -> str:
    """Persist model weights plus rebuild metadata; returns the file digest."""
    path = Path(path)
    arrays = {}
    for prefix, module in (("denoiser", denoiser), ("conditioner", conditioner)):
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy().astype("<f4")
    named = [(f"denoiser/{n}", p) for n, p in denoiser.named_parameters()]
    named += [(f"conditioner/{n}", p) for n, p in conditioner.named_parameters()]
    if optimizer is not None:
        arrays.update(_optimizer_arrays(optimizer, named))
    save_arrays(path, arrays)

    sidecar = {
        "denoiser": denoiser.config.to_dict(),
        "schedule": schedule.to_dict(),
        "conditioner": {
            "tokens": conditioner.tokens,
            "embed_dim": conditioner.embed_dim,
            "mode": conditioner.mode,
            "hidden": conditioner.hidden,
            "flags": conditioner.flags.to_dict(),
        },
        "meta": meta or {},
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return file_digest(path)


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild (denoiser, conditioner, schedule, optimizer, meta) from disk.

    `optimizer_factory` maps a parameter list to a fresh optimizer; when given,
    saved moment estimates are restored into it.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists() or not side.exists():
        raise ValidationError(f"checkpoint {path} or its sidecar is missing")
    info = json.loads(side.read_text())

    denoiser = Denoiser(DenoiserConfig.from_dict(info["denoiser"]))
    cond_info = info["conditioner"]
    conditioner = Conditioner(
        tokens=cond_info["tokens"],
        embed_dim=cond_info["embed_dim"],
        mode=cond_info["mode"],
        hidden=cond_info["hidden"],
        flags=AblationFlags(**cond_info["flags"]),
    )
    schedule = NoiseSchedule.from_dict(info["schedule"])

    arrays = load_arrays(path)
    for prefix, module in (("denoiser", denoiser), ("conditioner", conditioner)):
        state = {
            name[len(prefix) + 1:]: torch.from_numpy(arr.copy())
            for name, arr in arrays.items()
            if name.startswith(prefix + "/")
        }
        module.load_state_dict(state)

    optimizer = None
    if optimizer_factory is not None:
        params = list(denoiser.parameters()) + list(conditioner.parameters())
        optimizer = optimizer_factory(params)
        named = [(f"denoiser/{n}", p) for n, p in denoiser.named_parameters()]
        named += [(f"conditioner/{n}", p) for n, p in conditioner.named_parameters()]
        for name, param in named:
            entries = {
                key.rsplit("/", 1)[1]: arr
                for key, arr in arrays.items()
                if key.startswith(f"optim/{name}/")
            }
            if entries:
                optimizer.state[param] = {
                    key: torch.from_numpy(arr.copy()) for key, arr in entries.items()
                }
    return denoiser, conditioner, schedule, optimizer, info.get("meta", {})
