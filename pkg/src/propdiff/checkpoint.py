"""Single-file checkpoints: a JSON header plus named float arrays in one ``.npz``."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, config: dict, arrays: dict[str, np.ndarray], extra: dict | None = None):
    header = {"format_version": FORMAT_VERSION, "kind": kind, "config": config, "extra": extra or {}}
    payload = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, arr in arrays.items():
        if name.startswith("__"):
            raise CheckpointError(f"reserved array name {name!r}")
        payload[name] = np.asarray(arr)
    path = Path(path)
    # np.savez appends .npz to bare names; write through a handle to keep the exact path
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``; rejects unknown versions and mismatched kinds."""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            arrays = {k: data[k] for k in data.files if k != "__header__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')!r}")
    return header, arrays


def state_to_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def arrays_to_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = ""):
    own = module.state_dict()
    state = {}
    for name, ref in own.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"parameter {key!r} has shape {tuple(arr.shape)}, model expects {tuple(ref.shape)}"
            )
        state[name] = torch.as_tensor(arr, dtype=ref.dtype)
    module.load_state_dict(state)
