import json

import pytest

from omrlane.checkpoint import load_checkpoint
from omrlane.cli import main
from omrlane.config import ModelConfig
from omrlane.training import init_model

SMALL = {"image_h": 64, "image_w": 64, "K": 8, "H": 8, "W": 8, "M": 3, "N": 10, "backbone": [4, 4, 8, 8, 8]}


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> train step 1 -> train step 2 on a tiny model."""
    root = tmp_path_factory.mktemp("pipe")
    gen_cfg = root / "gen.json"
    gen_cfg.write_text(json.dumps({"model": SMALL, "clips": 3, "frames": 4, "seed": 7}))
    assert run("generate", "--config", gen_cfg, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--out", root / "s1", "--step", 1, "--epochs", 2,
               "--batch-size", 4) == 0
    assert run("train", "--data", root / "data", "--out", root / "s2", "--step", 2, "--epochs", 1,
               "--batch-size", 2, "--window", 2, "--init", root / "s1" / "checkpoint") == 0
    return root


def test_generate_twice_is_byte_identical(pipeline, tmp_path):
    assert run("generate", "--config", pipeline / "data" / "run_config.json", "--out", tmp_path / "again") == 0
    a, b = tree_bytes(pipeline / "data"), tree_bytes(tmp_path / "again")
    a.pop("run_config.json")
    b.pop("run_config.json")
    assert a == b
    manifest = json.loads((pipeline / "data" / "manifest.json").read_text())
    assert len(manifest["clips"]) == 3


def test_generate_zero_clips_exit_2(tmp_path):
    assert run("generate", "--out", tmp_path / "d", "--clips", 0) == 2


def test_generate_refuses_non_empty_dir(pipeline, capsys):
    assert run("generate", "--out", pipeline / "data", "--clips", 1) == 2
    assert "--force" in capsys.readouterr().err


def test_step2_without_init_exit_3(pipeline, tmp_path):
    assert run("train", "--data", pipeline / "data", "--out", tmp_path / "x", "--step", 2) == 3
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "y") == 3


def test_train_outputs(pipeline):
    s1 = pipeline / "s1"
    cfg = json.loads((s1 / "run_config.json").read_text())
    assert cfg["command"] == "train" and cfg["step"] == 1 and cfg["epochs"] == 2
    lines = (s1 / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 3  # 12 frames in batches of 4
    manifest = json.loads((s1 / "checkpoint" / "manifest.json").read_text())
    assert manifest["progress"] == {"step": 1, "epoch": 2, "epochs": 2}


def test_freeze_contract_across_checkpoints(pipeline):
    cfg = ModelConfig(**SMALL)
    a, b = init_model(cfg, 0), init_model(cfg, 0)
    load_checkpoint(pipeline / "s1" / "checkpoint", a)
    load_checkpoint(pipeline / "s2" / "checkpoint", b)
    for n, t in a.items():
        same = t.data.tobytes() == b[n].data.tobytes()
        assert same != n.startswith("omr."), n


def test_resume_matches_uninterrupted(pipeline, tmp_path):
    data = pipeline / "data"
    assert run("train", "--data", data, "--out", tmp_path / "part", "--epochs", 1, "--batch-size", 4) == 0
    assert run("train", "--data", data, "--out", tmp_path / "part", "--epochs", 2, "--batch-size", 4,
               "--resume") == 0
    assert (tmp_path / "part" / "loss_log.jsonl").read_bytes() == (pipeline / "s1" / "loss_log.jsonl").read_bytes()
    assert tree_bytes(tmp_path / "part" / "checkpoint") == tree_bytes(pipeline / "s1" / "checkpoint")


def test_eval_report_and_render(pipeline, tmp_path):
    out = tmp_path / "ev"
    assert run("eval", "--data", pipeline / "data", "--ckpt", pipeline / "s2" / "checkpoint", "--out", out,
               "--render", "--render-clips", 1, "--workers", 2) == 0
    report = json.loads((out / "report.json").read_text())
    for c in report["per_clip"]:
        st = c["stability"]
        assert st["N"] == st["N_S"] + st["N_F"] + st["N_M"]
    frames = sorted((out / "render" / "clip_000").glob("*"))
    names = {p.name.split("_", 1)[1] for p in frames}
    assert names == {"overlay.ppm", "O_tilde.pgm", "F_tilde.pgm", "F.pgm", "P_tilde.pgm", "P.pgm"}
    assert frames[0].read_bytes().startswith(b"P")
    # a single worker gives the same report
    assert run("eval", "--data", pipeline / "data", "--ckpt", pipeline / "s2" / "checkpoint",
               "--out", tmp_path / "ev1") == 0
    assert (tmp_path / "ev1" / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_eval_dimension_mismatch_exit_4(pipeline, tmp_path):
    assert run("generate", "--out", tmp_path / "big", "--clips", 1, "--frames", 2) == 0
    assert run("eval", "--data", tmp_path / "big", "--ckpt", pipeline / "s1" / "checkpoint",
               "--out", tmp_path / "ev") == 4


def test_infer_outputs_and_determinism(pipeline, tmp_path):
    clip = pipeline / "data" / "clip_000"
    ck = pipeline / "s2" / "checkpoint"
    assert run("infer", "--ckpt", ck, "--clip", clip, "--out", tmp_path / "a") == 0
    assert run("infer", "--ckpt", ck, "--clip", clip / "frames.bin", "--out", tmp_path / "b") == 0
    la = (tmp_path / "a" / "lanes.jsonl").read_bytes()
    assert la == (tmp_path / "b" / "lanes.jsonl").read_bytes()
    frames = [json.loads(x) for x in la.decode().splitlines()]
    assert len(frames) == 4 and all(len(f["lanes"]) <= 8 for f in frames)
    timing = json.loads((tmp_path / "a" / "timing.json").read_text())
    stages = timing["stages"]
    assert [s["label"] for s in stages] == ["Encoding", "LOD", "OMR", "Decoding", "Total"]
    assert abs(sum(s["seconds"] for s in stages[:4]) - stages[4]["seconds"]) < 1e-12


def test_infer_unreadable_clip_exit_5(pipeline, tmp_path):
    bad = tmp_path / "junk.bin"
    bad.write_bytes(b"not a tensor")
    ck = pipeline / "s1" / "checkpoint"
    assert run("infer", "--ckpt", ck, "--clip", bad, "--out", tmp_path / "o") == 5
    assert run("infer", "--ckpt", ck, "--clip", tmp_path / "missing", "--out", tmp_path / "o") == 5


def test_output_root_env(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("OMRLANE_OUTPUT_ROOT", str(tmp_path))
    assert run("generate", "--out", "rel", "--clips", 1, "--frames", 1, "--config",
               pipeline / "data" / "run_config.json") == 0
    assert (tmp_path / "rel" / "manifest.json").exists()


def test_full_pipeline_reproducible(pipeline, tmp_path):
    root = tmp_path
    gen = pipeline / "data" / "run_config.json"
    assert run("generate", "--config", gen, "--out", root / "data") == 0
    assert run("train", "--config", pipeline / "s1" / "run_config.json", "--data", root / "data",
               "--out", root / "s1") == 0
    assert run("train", "--config", pipeline / "s2" / "run_config.json", "--data", root / "data",
               "--out", root / "s2", "--init", root / "s1" / "checkpoint") == 0
    assert run("eval", "--data", root / "data", "--ckpt", root / "s2" / "checkpoint", "--out", root / "ev") == 0
    assert run("eval", "--data", pipeline / "data", "--ckpt", pipeline / "s2" / "checkpoint",
               "--out", pipeline / "ev_ref") == 0
    for sub in ("s1/checkpoint", "s2/checkpoint"):
        assert tree_bytes(root / sub) == tree_bytes(pipeline / sub)
    for sub in ("s1/loss_log.jsonl", "s2/loss_log.jsonl", "ev/report.json", "data/manifest.json"):
        ref = "ev_ref/report.json" if sub.startswith("ev/") else sub
        assert (root / sub).read_bytes() == (pipeline / ref).read_bytes(), sub


def test_ablate_emits_comparable_reports(tmp_path):
    cfg = tmp_path / "ab.json"
    cfg.write_text(json.dumps({"model": SMALL, "seeds": [0], "train_clips": 2, "test_clips": 2, "frames": 3,
                               "step1_epochs": 1, "step2_epochs": 1}))
    assert run("ablate", "--config", cfg, "--out", tmp_path / "ab") == 0
    reports = sorted((tmp_path / "ab").glob("report_seed0_*.json"))
    assert len(reports) == 4
    hashes = {json.loads(p.read_text())["meta"]["test_dataset"] for p in reports}
    assert len(hashes) == 1
    summary = json.loads((tmp_path / "ab" / "summary.json").read_text())
    assert set(summary) == {"intra", "no_obstacle", "no_aug", "full"}
