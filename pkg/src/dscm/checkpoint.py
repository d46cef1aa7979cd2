"""Model checkpoints: a JSON manifest plus a float32 little-endian tensor blob.

The blob holds every named tensor of the SCM (learnable parameters and the
fixed normalisation constants) in manifest order, optionally followed by
the Adam moment buffers so training can resume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import GraphConfig, build_scm, config_hash, parse_config
from .numerics import Adam
from .scm import Scm

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "CheckpointError"]

FORMAT = "dscm-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: GraphConfig
    scm: Scm
    step: int = 0
    history: list = field(default_factory=list)
    optimizer: Adam | None = None
    extra: dict = field(default_factory=dict)


def _layout(names_shapes):
    entries, offset = [], 0
    for name, shape in names_shapes:
        size = int(np.prod(shape)) if shape else 1
        entries.append({"name": name, "shape": list(shape), "offset": offset, "size": size})
        offset += size
    return entries, offset


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write ``manifest.json`` and ``params.bin`` into directory ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    tensors = ckpt.scm.named_tensors()
    entries, total = _layout((k, t.data.shape) for k, t in tensors.items())
    chunks = [np.asarray(t.data, dtype="<f4").reshape(-1) for t in tensors.values()]
    moments = []
    opt = ckpt.optimizer
    if opt is not None:
        ids = {id(t): k for k, t in tensors.items()}
        for group, (params, state) in opt.groups.items():
            if not state.m:
                continue
            names = [ids[id(p)] for p in params]
            m_entries, m_total = _layout((f"{group}.m.{n}", p.data.shape) for n, p in zip(names, params))
            moments.append({"group": group, "lr": state.lr, "step": state.step, "params": names, "offset": total, "size": 2 * m_total})
            chunks.extend(np.asarray(m, dtype="<f4").reshape(-1) for m in state.m)
            chunks.extend(np.asarray(v, dtype="<f4").reshape(-1) for v in state.v)
            total += 2 * m_total
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.astype("<f4").tofile(d / BLOB)
    manifest = {
        "format": FORMAT,
        "config_hash": config_hash(ckpt.config.raw),
        "config": ckpt.config.raw,
        "step": int(ckpt.step),
        "history": ckpt.history,
        "tensors": entries,
        "optimizer": moments,
        "extra": ckpt.extra,
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_checkpoint(path, expected: GraphConfig | None = None) -> Checkpoint:
    """Rebuild the SCM from the stored config and restore every tensor.

    Raises :class:`CheckpointError` when ``expected`` describes a different
    graph, or when the manifest does not match its own config or blob.
    """
    d = Path(path)
    try:
        manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{d}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{d / MANIFEST}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{d}: unsupported checkpoint format {manifest.get('format')!r}")
    stored = manifest["config_hash"]
    # hash before parsing, so tampering is reported as such
    if config_hash(manifest["config"]) != stored:
        raise CheckpointError(f"{d}: manifest config does not hash to {stored}")
    cfg = parse_config(manifest["config"])
    if expected is not None and expected.hash != stored:
        raise CheckpointError(f"{d}: checkpoint config hash {stored} differs from expected {expected.hash}")
    blob = np.fromfile(d / BLOB, dtype="<f4")
    scm = build_scm(cfg)
    tensors = scm.named_tensors()
    listed = [e["name"] for e in manifest["tensors"]]
    if listed != list(tensors):
        raise CheckpointError(f"{d}: tensor names do not match the graph built from config {stored}")
    for e in manifest["tensors"]:
        t = tensors[e["name"]]
        if list(t.data.shape) != e["shape"]:
            raise CheckpointError(f"{d}: tensor {e['name']} has shape {e['shape']}, model expects {list(t.data.shape)}")
        if e["offset"] + e["size"] > blob.size:
            raise CheckpointError(f"{d}: {BLOB} is truncated")
        t.data[...] = blob[e["offset"] : e["offset"] + e["size"]].reshape(t.data.shape).astype(np.float64)
    optimizer = None
    if manifest.get("optimizer"):
        groups = {}
        for g in manifest["optimizer"]:
            params = [tensors[n] for n in g["params"]]
            groups[g["group"]] = (params, g["lr"])
        optimizer = Adam(groups)
        for g in manifest["optimizer"]:
            params, state = optimizer.groups[g["group"]]
            state.step = int(g["step"])
            off = g["offset"]
            state.m, state.v = [], []
            for bucket in (state.m, state.v):
                for p in params:
                    n = p.data.size
                    bucket.append(blob[off : off + n].reshape(p.data.shape).astype(np.float64))
                    off += n
    return Checkpoint(cfg, scm, int(manifest["step"]), list(manifest.get("history", [])), optimizer, dict(manifest.get("extra", {})))
