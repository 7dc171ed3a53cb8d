"""Checkpoint archives: parameter tensors keyed by module path plus a JSON manifest."""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Optional, Tuple

import torch
from torch import nn

FORMAT_VERSION = 1


class CheckpointIncompatibleError(ValueError):
    pass


def save_checkpoint(path, state: Dict[str, torch.Tensor], manifest: dict) -> Path:
    """Write ``manifest.json`` and ``tensors.pt`` into one zip archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest, version=FORMAT_VERSION)
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu() for k, v in state.items()}, buf)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_fixed_info("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        zf.writestr(_fixed_info("tensors.pt"), buf.getvalue())
    return path


def _fixed_info(name: str) -> zipfile.ZipInfo:
    # constant timestamp keeps archives byte-reproducible
    return zipfile.ZipInfo(name, date_time=(2000, 1, 1, 0, 0, 0))


def load_checkpoint(path, expect: Optional[dict] = None) -> Tuple[Dict[str, torch.Tensor], dict]:
    """Read an archive; every key in ``expect`` must match the manifest."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        state = torch.load(io.BytesIO(zf.read("tensors.pt")), map_location="cpu", weights_only=True)
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointIncompatibleError(f"checkpoint version {manifest.get('version')} != {FORMAT_VERSION}")
    for key, value in (expect or {}).items():
        got = manifest.get(key)
        if _norm(got) != _norm(value):
            raise CheckpointIncompatibleError(f"manifest {key}={got!r}, expected {value!r}")
    return state, manifest


def _norm(v):
    return json.loads(json.dumps(v))


def model_manifest(model, origin: str, **extra) -> dict:
    cfg = model.cfg
    return {
        "preset": cfg.preset,
        "widths": list(cfg.widths),
        "gp_strides": list(cfg.gp_strides),
        "network": cfg.to_dict(),
        "origin": origin,
        **extra,
    }


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
