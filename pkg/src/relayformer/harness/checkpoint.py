"""Checkpoint directories: one RTNS file per tensor plus ``manifest.json``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from relayformer.config import ModelConfig, RunConfig
from relayformer.errors import ContractError
from relayformer.model import RelayFormer
from relayformer.numerics import rtns

MANIFEST = "manifest.json"
FORMAT = "relayformer-checkpoint/1"


def save_checkpoint(directory: str | Path, model: RelayFormer, run: RunConfig | None = None, extra: dict | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        fname = f"{name}.rtns"
        rtns.save(out / fname, p)
        entries.append({"name": name, "dims": list(p.shape), "dtype": p.dtype, "file": fname})
    manifest = {
        "format": FORMAT,
        "model": model.config.to_dict(),
        "run": run.to_dict() if run is not None else None,
        "tensors": entries,
        "total_elements": int(sum(int(np.prod(e["dims"], dtype=np.int64)) for e in entries)),
    }
    if extra:
        manifest["extra"] = extra
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise ContractError(f"{directory}: no {MANIFEST}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{path}: unrecognized checkpoint format {manifest.get('format')!r}")
    return manifest


def manifest_element_count(manifest: dict) -> int:
    return sum(int(np.prod(e["dims"], dtype=np.int64)) for e in manifest["tensors"])


def load_checkpoint(directory: str | Path) -> RelayFormer:
    """Rebuild the model from the manifest's config and fill every tensor."""
    manifest = read_manifest(directory)
    model = RelayFormer(ModelConfig.from_dict(manifest["model"]))
    params = model.parameters()
    listed = {e["name"] for e in manifest["tensors"]}
    if listed != set(params):
        missing, unknown = set(params) - listed, listed - set(params)
        raise ContractError(f"checkpoint/model mismatch: missing {sorted(missing)}, unknown {sorted(unknown)}")
    for e in manifest["tensors"]:
        t = rtns.load(Path(directory) / e["file"])
        p = params[e["name"]]
        if t.shape != p.shape or t.dtype != p.dtype:
            raise ContractError(f"{e['name']}: stored {t.shape}/{t.dtype}, model wants {p.shape}/{p.dtype}")
        p.data[...] = t.data
    return model
