"""Versioned checkpoints: a JSON manifest plus one file of concatenated tensor blobs.

The manifest records the model config, every parameter's name/shape/frozen
flag, batch-norm buffers, optimizer and schedule state, training progress,
and sha256 digests of the blob file and the eigenlane basis.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from omrlane.autodiff import ParamStore
from omrlane.autodiff.serialize import tensors_from_bytes, tensors_to_bytes
from omrlane.config import ModelConfig
from omrlane.eigenlane import EigenlaneBasis
from omrlane.errors import CompatibilityError, IntegrityError, StorageError

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ParamStore
    basis: EigenlaneBasis
    optimizer: dict | None = None      # AdamW.state_dict()
    schedule: dict | None = None
    progress: dict = field(default_factory=dict)   # {"step": 1|2, "epoch": next epoch index, ...}


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(ckpt: Checkpoint, root) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    store = ckpt.params
    arrays, params_meta, stats_meta = [], [], []
    for name, t in store.items():
        params_meta.append({"name": name, "shape": list(t.shape), "frozen": name in store.frozen})
        arrays.append(t.data)
    for name, st in store.stat_items():
        stats_meta.append({"name": name, "channels": int(st.mean.shape[0])})
        arrays += [st.mean, st.var]
    opt_meta = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        names = sorted(o["m"])
        opt_meta = {"lr": o["lr"], "t": o["t"], "skipped": o["skipped"], "moment_names": names}
        for n in names:
            arrays += [o["m"][n], o["v"][n]]
    blob = tensors_to_bytes(arrays)
    basis_blob = ckpt.basis.to_bytes()
    (root / "tensors.bin").write_bytes(blob)
    (root / "basis.bin").write_bytes(basis_blob)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.cfg.to_dict(),
        "params": params_meta,
        "stats": stats_meta,
        "optimizer": opt_meta,
        "schedule": ckpt.schedule,
        "progress": ckpt.progress,
        "sha256": {"tensors.bin": _sha(blob), "basis.bin": _sha(basis_blob)},
    }
    (root / "manifest.json").write_bytes(json.dumps(manifest, sort_keys=True, indent=1).encode())
    return manifest


def _read(path: Path, digest: str | None = None) -> bytes:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if digest is not None and _sha(data) != digest:
        raise IntegrityError(f"{path} does not match its manifest hash")
    return data


def read_checkpoint_manifest(root) -> dict:
    try:
        manifest = json.loads(_read(Path(root) / "manifest.json"))
    except ValueError as exc:
        raise IntegrityError(f"corrupt checkpoint manifest in {root}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(root, store: ParamStore) -> Checkpoint:
    """Restore into a store built for the same config; names and shapes must match exactly."""
    root = Path(root)
    manifest = read_checkpoint_manifest(root)
    arrays = tensors_from_bytes(_read(root / "tensors.bin", manifest["sha256"]["tensors.bin"]))
    basis = EigenlaneBasis.load_bytes(_read(root / "basis.bin", manifest["sha256"]["basis.bin"]))
    cfg = ModelConfig.from_dict(manifest["config"])

    want = {m["name"]: tuple(m["shape"]) for m in manifest["params"]}
    have = {n: t.shape for n, t in store.items()}
    if want != have:
        missing = sorted(set(have) - set(want))[:5]
        extra = sorted(set(want) - set(have))[:5]
        wrong = sorted(n for n in set(want) & set(have) if want[n] != have[n])[:5]
        raise CompatibilityError(f"checkpoint/model mismatch: missing={missing} extra={extra} shape={wrong}")

    it = iter(arrays)
    params = {m["name"]: next(it) for m in manifest["params"]}
    stats = {m["name"]: (next(it), next(it)) for m in manifest["stats"]}
    store.load_arrays(params, stats)
    store.unfreeze_all()
    store.freeze([m["name"] for m in manifest["params"] if m["frozen"]])

    optimizer = None
    if manifest["optimizer"] is not None:
        o = manifest["optimizer"]
        m, v = {}, {}
        for n in o["moment_names"]:
            m[n] = next(it)
            v[n] = next(it)
        optimizer = {"lr": o["lr"], "t": o["t"], "skipped": o["skipped"], "m": m, "v": v}
    if next(it, None) is not None:
        raise IntegrityError(f"checkpoint {root} has trailing tensors")
    return Checkpoint(cfg, store, basis, optimizer, manifest.get("schedule"), manifest.get("progress", {}))


def params_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray], names) -> bool:
    return all(np.array_equal(a[n], b[n]) and a[n].tobytes() == b[n].tobytes() for n in names)


def load_pretrained(root, store: ParamStore, skip_prefixes: tuple = ("omr.",)) -> Checkpoint:
    """Copy every parameter and buffer outside `skip_prefixes` from a checkpoint into `store`.

    Used to start step 2 from a step-1 checkpoint when the refinement module's
    own layout (obstacle branch, memory) may differ from what step 1 carried.
    """
    root = Path(root)
    manifest = read_checkpoint_manifest(root)
    arrays = tensors_from_bytes(_read(root / "tensors.bin", manifest["sha256"]["tensors.bin"]))
    basis = EigenlaneBasis.load_bytes(_read(root / "basis.bin", manifest["sha256"]["basis.bin"]))
    it = iter(arrays)
    saved = {m["name"]: next(it) for m in manifest["params"]}
    saved_stats = {m["name"]: (next(it), next(it)) for m in manifest["stats"]}

    def wanted(name):
        return not name.startswith(skip_prefixes)

    params = {n: saved.get(n) for n, _ in store.items() if wanted(n)}
    bad = sorted(n for n, t in store.items() if wanted(n) and (params[n] is None or params[n].shape != t.shape))
    stats = {n: saved_stats.get(n) for n, _ in store.stat_items() if wanted(n)}
    bad += sorted(n for n, v in stats.items() if v is None)
    if bad:
        raise CompatibilityError(f"checkpoint {root} lacks or mis-shapes: {bad[:5]}")
    store.load_arrays(params, stats)
    return Checkpoint(ModelConfig.from_dict(manifest["config"]), store, basis, None, None,
                      manifest.get("progress", {}))
