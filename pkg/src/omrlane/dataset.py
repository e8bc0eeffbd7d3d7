"""Synthetic clip datasets: in-memory construction and the hashed on-disk layout.

Layout of a dataset directory::

    manifest.json            version, config, clip list with track ids and sha256 of every file
    basis.bin                eigenlane basis (JSON header line + tensor blob)
    clip_000/spec.json       SceneSpec
    clip_000/frames.bin      (T,3,H0,W0) tensor
    clip_000/gt.bin          P (T,H,W), C (T,M,H,W), S (T,H,W), owner (T,H,W) tensors
    clip_000/lanes.json      per frame: [{track_id, xs, valid}]
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from omrlane.autodiff.serialize import tensor_to_bytes, tensors_from_bytes, tensors_to_bytes
from omrlane.config import ModelConfig
from omrlane.eigenlane import EigenlaneBasis, LaneCurve, fit_basis
from omrlane.errors import CompatibilityError, InputError, IntegrityError, StorageError
from omrlane.scenegen import GroundTruth, SceneSpec, all_lane_curves, generate_video, sample_scene
from omrlane.seeding import derive_seed

FORMAT_VERSION = 1
CLIP_FILES = ("spec.json", "frames.bin", "gt.bin", "lanes.json")


@dataclass
class Clip:
    name: str
    spec: SceneSpec
    frames: np.ndarray        # (T,3,H0,W0)
    gts: list                 # GroundTruth per frame

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def track_ids(self) -> list[int]:
        return sorted({tid for gt in self.gts for tid, _ in gt.lanes})


@dataclass
class Dataset:
    clips: list
    basis: EigenlaneBasis
    cfg: ModelConfig

    def __len__(self) -> int:
        return len(self.clips)

    def frame_index(self) -> list[tuple[int, int]]:
        return [(c, t) for c, clip in enumerate(self.clips) for t in range(clip.num_frames)]


def sample_specs(seed: int, cfg: ModelConfig, num_clips: int, num_frames: int,
                 occlusion: str = "light", split: int = 0) -> list[SceneSpec]:
    return [sample_scene(derive_seed(seed, "datagen", split, i), cfg, num_frames, occlusion)
            for i in range(num_clips)]


def build_dataset(seed: int, cfg: ModelConfig, num_clips: int, num_frames: int,
                  occlusion: str = "light", split: int = 0,
                  basis: EigenlaneBasis | None = None) -> Dataset:
    """Sample and render clips; the basis is fit on this dataset's lanes unless one is given."""
    if num_clips < 1:
        raise InputError("a dataset needs at least one clip")
    if num_frames < 1:
        raise InputError("clips need at least one frame")
    specs = sample_specs(seed, cfg, num_clips, num_frames, occlusion, split)
    if basis is None:
        basis = fit_basis(all_lane_curves(specs, cfg), cfg.M)
    clips = []
    for i, spec in enumerate(specs):
        frames, gts = generate_video(spec, basis, cfg)
        clips.append(Clip(f"clip_{i:03d}", spec, frames, gts))
    return Dataset(clips, basis, cfg)


# ---- serialization -----------------------------------------------------------------
def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=1).encode()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _clip_blobs(clip: Clip) -> dict[str, bytes]:
    gts = clip.gts
    gt_blob = tensors_to_bytes([
        np.stack([g.P for g in gts]),
        np.stack([g.C for g in gts]),
        np.stack([g.S for g in gts]),
        np.stack([g.owner for g in gts]).astype(np.float64),
    ])
    lanes = [[{"track_id": int(tid), "xs": [float(x) for x in ln.xs], "valid": list(map(int, ln.valid))}
              for tid, ln in g.lanes] for g in gts]
    return {
        "spec.json": _dumps(clip.spec.to_dict()),
        "frames.bin": tensor_to_bytes(clip.frames),
        "gt.bin": gt_blob,
        "lanes.json": _dumps(lanes),
    }


def dataset_digest(ds: Dataset) -> str:
    """Content digest of an in-memory dataset; equals for datasets that would save identically."""
    h = hashlib.sha256()
    h.update(ds.basis.to_bytes())
    for clip in ds.clips:
        h.update(clip.name.encode())
        for fname, blob in sorted(_clip_blobs(clip).items()):
            h.update(fname.encode())
            h.update(_sha(blob).encode())
    return h.hexdigest()


def save_dataset(ds: Dataset, root) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ds.basis.save(root / "basis.bin")
    entries = []
    for clip in ds.clips:
        d = root / clip.name
        d.mkdir(exist_ok=True)
        hashes = {}
        for fname, blob in _clip_blobs(clip).items():
            (d / fname).write_bytes(blob)
            hashes[fname] = _sha(blob)
        entries.append({"name": clip.name, "num_frames": clip.num_frames,
                        "track_ids": clip.track_ids(),
                        "num_occluders": len(clip.spec.occluders), "sha256": hashes})
    manifest = {
        "version": FORMAT_VERSION,
        "config": ds.cfg.to_dict(),
        "basis_sha256": _sha((root / "basis.bin").read_bytes()),
        "clips": entries,
    }
    (root / "manifest.json").write_bytes(_dumps(manifest))
    return manifest


def dataset_hash(root) -> str:
    """Digest of the manifest, which itself pins every file's hash."""
    return _sha((Path(root) / "manifest.json").read_bytes())


def _read_verified(path: Path, expected: str) -> bytes:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if _sha(data) != expected:
        raise IntegrityError(f"{path} does not match its manifest hash")
    return data


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_bytes())
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read dataset manifest {path}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported dataset version {manifest.get('version')}")
    return manifest


def load_clip(root, entry: dict, cfg: ModelConfig) -> Clip:
    d = Path(root) / entry["name"]
    blobs = {f: _read_verified(d / f, entry["sha256"][f]) for f in CLIP_FILES}
    spec = SceneSpec.from_dict(json.loads(blobs["spec.json"]))
    (frames,) = tensors_from_bytes(blobs["frames.bin"])
    P, C, S, owner = tensors_from_bytes(blobs["gt.bin"])
    lanes = json.loads(blobs["lanes.json"])
    gts = []
    for t in range(len(frames)):
        items = [(ln["track_id"], LaneCurve(np.array(ln["xs"]), tuple(ln["valid"]))) for ln in lanes[t]]
        gts.append(GroundTruth(P[t], C[t], S[t], items, owner[t].astype(np.int64)))
    return Clip(entry["name"], spec, frames, gts)


def load_dataset(root, cfg: ModelConfig | None = None) -> Dataset:
    """Load and hash-verify a dataset; `cfg`, when given, must agree on geometry."""
    root = Path(root)
    manifest = read_manifest(root)
    stored = ModelConfig.from_dict(manifest["config"])
    if cfg is not None:
        check_compatible(cfg, stored, "dataset")
    else:
        cfg = stored
    basis = EigenlaneBasis.load_bytes(_read_verified(root / "basis.bin", manifest["basis_sha256"]))
    clips = [load_clip(root, e, cfg) for e in manifest["clips"]]
    return Dataset(clips, basis, cfg)


GEOMETRY_FIELDS = ("image_h", "image_w", "H", "W", "M", "N", "horizon_frac")


def check_compatible(a: ModelConfig, b: ModelConfig, what: str) -> None:
    diffs = [f"{k}: {getattr(a, k)} vs {getattr(b, k)}" for k in GEOMETRY_FIELDS if getattr(a, k) != getattr(b, k)]
    if diffs:
        raise CompatibilityError(f"{what} geometry differs from the model config ({'; '.join(diffs)})")
