"""Checkpoint directories: one tensor file per parameter plus a JSON manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import NotReady
from .tensorio import TensorContainer, encode_tensor, load_array, save_tensor

VERSION = "0.1.0"


def content_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(encode_tensor(TensorContainer.from_array(np.asarray(params[name]))))
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def state_to_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def arrays_to_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for k, v in module.state_dict().items():
        arr = arrays[prefix + k]
        state[k] = torch.as_tensor(arr, dtype=v.dtype).reshape(v.shape)
    module.load_state_dict(state)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_checkpoint(directory, params: dict[str, np.ndarray], manifest: dict) -> str:
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    for name, arr in params.items():
        save_tensor(np.asarray(arr), d / "params" / f"{name}.tns")
    digest = content_hash(params)
    write_json(d / "manifest.json", {**manifest, "content_hash": digest, "params": sorted(params), "version": VERSION})
    return digest


def load_checkpoint(directory, stage: str) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise NotReady(stage, f"no checkpoint manifest in {d}")
    manifest = json.loads((d / "manifest.json").read_text())
    params = {name: load_array(d / "params" / f"{name}.tns") for name in manifest["params"]}
    return params, manifest
