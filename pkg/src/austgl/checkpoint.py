"""Versioned checkpoint container.

A checkpoint is a zip archive holding ``manifest.json`` and one ``.npy`` file
per parameter under ``tensors/``. Both members are language-neutral, so other
tools can read the manifest and weights without this package.
"""
from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import torch

FORMAT = "austgl-checkpoint"
VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _write_member(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, state_dict, *, kind, config, step=0, metrics=None):
    """Write ``state_dict`` and a manifest echoing ``config``. Output is byte-stable."""
    tensors = {k: v.detach().cpu().numpy() for k, v in state_dict.items()}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "step": int(step),
        "config": config,
        "metrics": metrics or {},
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in tensors.items()],
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, arr in tensors.items():
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            _write_member(zf, f"tensors/{name}.npy", buf.getvalue())
    return manifest


def read_manifest(path):
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an {FORMAT} file")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path} has format version {manifest.get('version')}, expected {VERSION}")
    return manifest


def load_checkpoint(path, kind=None):
    """Return ``(manifest, state_dict)``; rejects foreign formats, versions and kinds."""
    manifest = read_manifest(path)
    if kind is not None and manifest["kind"] != kind:
        raise CheckpointError(f"{path} holds a {manifest['kind']!r} checkpoint, expected {kind!r}")
    state = {}
    with zipfile.ZipFile(path) as zf:
        for entry in manifest["tensors"]:
            arr = np.load(io.BytesIO(zf.read(f"tensors/{entry['name']}.npy")), allow_pickle=False)
            if list(arr.shape) != entry["shape"]:
                raise CheckpointError(f"tensor {entry['name']} shape {arr.shape} disagrees with manifest")
            state[entry["name"]] = torch.from_numpy(arr.copy())
    return manifest, state
