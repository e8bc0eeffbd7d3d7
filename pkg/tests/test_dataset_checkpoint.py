import numpy as np
import pytest

from omrlane.checkpoint import Checkpoint, load_checkpoint, load_pretrained, params_equal, save_checkpoint
from omrlane.config import ModelConfig
from omrlane.dataset import (
    build_dataset,
    check_compatible,
    dataset_digest,
    dataset_hash,
    load_dataset,
    read_manifest,
    save_dataset,
)
from omrlane.errors import CompatibilityError, InputError, IntegrityError, StorageError
from omrlane.optim import AdamW
from omrlane.training import init_model

CFG = ModelConfig(image_h=64, image_w=64, K=8, H=8, W=8, M=3, N=10, backbone=(4, 4, 8, 8, 8))


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def ds():
    return build_dataset(3, CFG, 3, 4, "light")


def test_same_seed_gives_byte_identical_trees(tmp_path, ds):
    save_dataset(ds, tmp_path / "a")
    save_dataset(build_dataset(3, CFG, 3, 4, "light"), tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")


def test_different_seed_or_split_differs(ds):
    assert dataset_digest(build_dataset(4, CFG, 3, 4, "light")) != dataset_digest(ds)
    assert dataset_digest(build_dataset(3, CFG, 3, 4, "light", split=1)) != dataset_digest(ds)


def test_round_trip(tmp_path, ds):
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert len(read_manifest(tmp_path)["clips"]) == 3
    assert np.array_equal(back.basis.U, ds.basis.U)
    for a, b in zip(ds.clips, back.clips):
        assert a.frames.tobytes() == b.frames.tobytes()
        for ga, gb in zip(a.gts, b.gts):
            assert np.array_equal(ga.P, gb.P) and np.array_equal(ga.C, gb.C) and np.array_equal(ga.S, gb.S)
            assert np.array_equal(ga.owner, gb.owner)
            assert [t for t, _ in ga.lanes] == [t for t, _ in gb.lanes]
            assert all(np.array_equal(x.xs, y.xs) and x.valid == y.valid for (_, x), (_, y) in zip(ga.lanes, gb.lanes))
    assert dataset_digest(back) == dataset_digest(ds)


def test_tampered_file_fails_hash_check(tmp_path, ds):
    save_dataset(ds, tmp_path)
    f = tmp_path / ds.clips[1].name / "frames.bin"
    raw = bytearray(f.read_bytes())
    raw[-1] ^= 1
    f.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_dataset(tmp_path)


def test_missing_manifest_is_storage_error(tmp_path):
    with pytest.raises(StorageError):
        load_dataset(tmp_path)


def test_empty_requests_rejected():
    with pytest.raises(InputError):
        build_dataset(0, CFG, 0, 4)
    with pytest.raises(InputError):
        build_dataset(0, CFG, 2, 0)


def test_geometry_mismatch_detected():
    with pytest.raises(CompatibilityError):
        check_compatible(CFG, ModelConfig(), "dataset")
    check_compatible(CFG, ModelConfig(**{**CFG.to_dict(), "nms_threshold": 0.6}), "dataset")


# ---- checkpoints -----------------------------------------------------------------------------
def _trained_store(ds):
    store = init_model(CFG, 0)
    rng = np.random.default_rng(0)
    opt = AdamW(store)
    for _, t in store.items():
        t.grad = rng.normal(size=t.shape)
    opt.step()
    store.zero_grad()
    for _, st in store.stat_items():
        st.mean = rng.normal(size=st.mean.shape)
    store.freeze_prefix("enc.")
    return store, opt


def test_checkpoint_round_trip(tmp_path, ds):
    store, opt = _trained_store(ds)
    ck = Checkpoint(CFG, store, ds.basis, opt.state_dict(), {"best": 1.0}, {"step": 1, "epoch": 3})
    save_checkpoint(ck, tmp_path)
    fresh = init_model(CFG, 5)
    back = load_checkpoint(tmp_path, fresh)
    names = [n for n, _ in store.items()]
    assert params_equal(store.snapshot(), fresh.snapshot(), names)
    assert all(np.array_equal(a.mean, b.mean) for (_, a), (_, b) in zip(store.stat_items(), fresh.stat_items()))
    assert fresh.frozen == store.frozen
    assert back.progress == {"step": 1, "epoch": 3} and back.schedule == {"best": 1.0}
    assert back.optimizer["t"] == 1 and all(np.array_equal(back.optimizer["m"][n], opt.m[n]) for n in opt.m)
    assert np.array_equal(back.basis.U, ds.basis.U)


def test_checkpoint_save_is_deterministic(tmp_path, ds):
    store, opt = _trained_store(ds)
    for d in ("a", "b"):
        save_checkpoint(Checkpoint(CFG, store, ds.basis, opt.state_dict(), None, {"step": 1}), tmp_path / d)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_checkpoint_corruption_and_mismatch(tmp_path, ds):
    store, _ = _trained_store(ds)
    save_checkpoint(Checkpoint(CFG, store, ds.basis), tmp_path)
    with pytest.raises(CompatibilityError):
        load_checkpoint(tmp_path, init_model(ModelConfig(**{**CFG.to_dict(), "K": 12}), 0))
    raw = bytearray((tmp_path / "tensors.bin").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "tensors.bin").write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path, init_model(CFG, 0))


def test_pretrained_load_skips_refinement_module(tmp_path, ds):
    store, _ = _trained_store(ds)
    save_checkpoint(Checkpoint(CFG, store, ds.basis), tmp_path)
    variant = ModelConfig(**{**CFG.to_dict(), "use_obstacle": False})
    target = init_model(variant, 1)
    omr_before = {n: t.data.copy() for n, t in target.items() if n.startswith("omr.")}
    load_pretrained(tmp_path, target)
    src = store.snapshot()
    for n, t in target.items():
        expect = omr_before[n] if n.startswith("omr.") else src[n]
        assert np.array_equal(t.data, expect)
