"""Single-file checkpoint archives.

A checkpoint is an uncompressed zip holding one ``.npy`` member per named array
plus ``manifest.json``. Member timestamps are pinned so identical contents give
identical bytes, which makes the file hash a usable reproducibility fingerprint.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)
MANIFEST = "manifest.json"


class CheckpointError(RuntimeError):
    pass


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], manifest: dict[str, Any]) -> str:
    """Write atomically (temp file + rename) and return the sha256 of the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name in sorted(arrays):
            if name == MANIFEST or "/" in name:
                raise CheckpointError(f"illegal array name {name!r}")
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                raise CheckpointError(f"array {name!r} contains non-finite values")
            member = io.BytesIO()
            np.lib.format.write_array(member, arr, allow_pickle=False)
            zf.writestr(_member(name + ".npy"), member.getvalue())
        body = dict(manifest)
        body["arrays"] = sorted(arrays)
        zf.writestr(_member(MANIFEST), json.dumps(body, sort_keys=True, indent=1))
    data = buf.getvalue()
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST))
            arrays = {}
            for name in manifest["arrays"]:
                with zf.open(name + ".npy") as fh:
                    arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return arrays, manifest


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> torch.nn.Module:
    head = prefix + "."
    state = {k[len(head):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(head)}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{prefix}: missing weights {sorted(missing)[:5]}")
    module.load_state_dict(state)
    return module


def tensor_digest(*modules: torch.nn.Module) -> str:
    """Hash of all parameters and buffers, used to assert frozen weights stay frozen."""
    h = hashlib.sha256()
    for m in modules:
        for k, v in sorted(m.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
