"""Deterministic checkpoint archives.

A checkpoint is a zip file holding ``config.json`` plus one entry per tensor
under ``tensors/<name>``, stored as raw little-endian float32.  Entry
timestamps are pinned so that identical state produces identical bytes, and
``param_hash`` (sha256 over sorted name/shape/payload triples) is stored in
the config and re-verified on load.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """Module state as name -> float32 array, in state_dict order."""
    return {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in module.state_dict().items()
    }


def param_hash(arrays: Mapping[str, np.ndarray]) -> str:
    """Content hash independent of insertion order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(",".join(str(d) for d in arr.shape).encode("ascii"))
        h.update(b"\x00")
        h.update(arr.tobytes())
    return h.hexdigest()


def module_hash(module: nn.Module) -> str:
    return param_hash(state_arrays(module))


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(
    path: str | Path, arrays: Mapping[str, np.ndarray], config: dict
) -> None:
    """Write the archive; `config` must be JSON-serializable."""
    config = dict(config)
    config["param_hash"] = param_hash(arrays)
    config["tensors"] = {
        name: list(np.asarray(arrays[name]).shape) for name in sorted(arrays)
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_entry(
            zf,
            "config.json",
            json.dumps(config, indent=2, sort_keys=True).encode("utf-8"),
        )
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            _write_entry(zf, f"tensors/{name}", arr.tobytes())
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify an archive; returns (config, arrays)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            config = json.loads(zf.read("config.json"))
            shapes = config.get("tensors")
            if not isinstance(shapes, dict):
                raise CheckpointError(f"{path}: config.json lacks a tensor table")
            arrays = {}
            for name, shape in shapes.items():
                raw = zf.read(f"tensors/{name}")
                arr = np.frombuffer(raw, dtype="<f4")
                expected = int(np.prod(shape)) if shape else 1
                if arr.size != expected:
                    raise CheckpointError(
                        f"{path}: tensor {name!r} has {arr.size} values, "
                        f"config says shape {shape}"
                    )
                arrays[name] = arr.reshape(shape)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    stored = config.get("param_hash")
    actual = param_hash(arrays)
    if stored is not None and stored != actual:
        raise CheckpointError(
            f"{path}: parameter hash mismatch (stored {stored[:12]}..., "
            f"actual {actual[:12]}...)"
        )
    return config, arrays


def load_into_module(module: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy arrays into a module, validating names and shapes."""
    state = {}
    for name, arr in arrays.items():
        # copy: zip-backed buffers are read-only, which torch cannot wrap
        state[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"state does not fit module: {exc}") from exc
