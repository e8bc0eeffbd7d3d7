"""Command-line entry point: generate, train, eval, infer, ablate.

Exit codes: 0 ok, 1 training diverged, 2 bad input, 3 missing prerequisite,
4 incompatible artifacts, 5 unreadable or corrupt file.

Relative output paths resolve against $OMRLANE_OUTPUT_ROOT when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from omrlane.autodiff import no_grad
from omrlane.autodiff.serialize import tensors_from_bytes
from omrlane.checkpoint import Checkpoint, load_checkpoint, load_pretrained, read_checkpoint_manifest, save_checkpoint
from omrlane.config import ModelConfig
from omrlane.dataset import (
    Dataset,
    build_dataset,
    check_compatible,
    dataset_hash,
    load_clip,
    load_dataset,
    read_manifest,
    save_dataset,
)
from omrlane.errors import (
    CompatibilityError,
    ConfigError,
    DimensionError,
    DivergenceError,
    InputError,
    StorageError,
)
from omrlane.experiment import AblationConfig, VARIANT_SPECS, evaluate, run_ablation
from omrlane.network import LaneNet
from omrlane.omr import OMR, STAGES, intra_frame_lanes
from omrlane.scenegen import OCCLUSION_LEVELS
from omrlane.training import TrainConfig, init_model, train_step1, train_step2

logger = logging.getLogger("omrlane")

OUTPUT_ROOT_ENV = "OMRLANE_OUTPUT_ROOT"
EXIT_OK, EXIT_DIVERGED, EXIT_INPUT, EXIT_PREREQ, EXIT_COMPAT, EXIT_IO = 0, 1, 2, 3, 4, 5
DEFAULT_EPOCHS = {1: 16, 2: 6}
RECORDED_ONLY = ("command", "init_sha256")


class PrerequisiteError(Exception):
    """A dataset or checkpoint the command depends on does not exist."""


# ---- helpers ----------------------------------------------------------------------------
def out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"{what} not found: {path}")
    return path


def prepare_output_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise InputError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < explicit flags. Flags left at None are not explicit."""
    cfg = dict(defaults)
    file_cfg = load_config_file(getattr(args, "config", None))
    # a saved run_config.json also carries bookkeeping keys; they are recomputed
    for key in RECORDED_ONLY:
        file_cfg.pop(key, None)
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise InputError(f"unknown config keys for {args.command}: {unknown}")
    cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def model_config(run: dict, base: ModelConfig | None = None) -> ModelConfig:
    overrides = dict(run.get("model") or {})
    for flag, key in (("no_obstacle", "use_obstacle"), ("no_memory", "use_memory")):
        if run.get(flag):
            overrides[key] = False
    if run.get("convlstm_variant"):
        overrides["convlstm_variant"] = run["convlstm_variant"]
    if base is None:
        return ModelConfig.from_dict(overrides)
    return replace(base, **{k: v for k, v in overrides.items() if k in base.to_dict()})


def finish_run_config(run: dict, out: Path, command: str) -> None:
    write_json(out / "run_config.json", {"command": command, **run})


# ---- generate -------------------------------------------------------------------------
GENERATE_DEFAULTS = {"out": None, "seed": 0, "clips": 24, "frames": 8, "occlusion": "moderate", "split": 0,
                     "basis_from": None, "model": {}}


def cmd_generate(args) -> int:
    run = resolve(args, GENERATE_DEFAULTS)
    if run["clips"] < 1 or run["frames"] < 1:
        raise InputError("need at least one clip and one frame")
    out = out_path(run["out"])
    cfg = model_config(run)
    basis = None
    if run["basis_from"]:
        src = require(Path(run["basis_from"]), "basis source dataset")
        basis = load_dataset(src, cfg).basis
    ds = build_dataset(run["seed"], cfg, run["clips"], run["frames"], run["occlusion"], run["split"], basis=basis)
    prepare_output_dir(out, args.force)
    save_dataset(ds, out)
    finish_run_config(run, out, "generate")
    lanes = sum(len(g.lanes) for c in ds.clips for g in c.gts)
    occluders = sum(len(c.spec.occluders) for c in ds.clips)
    print(f"clips {len(ds.clips)}  frames {sum(c.num_frames for c in ds.clips)}  "
          f"lane instances {lanes}  occluders {occluders}")
    print(f"dataset {out}  sha256 {dataset_hash(out)}")
    return EXIT_OK


# ---- train ----------------------------------------------------------------------------
TRAIN_DEFAULTS = {"data": None, "out": None, "step": 1, "init": None, "seed": 0, "epochs": None,
                  "batch_size": 4, "lr": 1e-3, "weight_decay": 1e-4, "window": 4, "no_augment": False,
                  "aug_prob": 1.0, "halve_every": None, "no_obstacle": False, "no_memory": False,
                  "convlstm_variant": None, "model": {}}


def cmd_train(args) -> int:
    run = resolve(args, TRAIN_DEFAULTS)
    step = int(run["step"])
    if step not in (1, 2):
        raise InputError(f"--step must be 1 or 2, got {step}")
    if run["epochs"] is None:
        run["epochs"] = DEFAULT_EPOCHS[step]
    data = require(Path(run["data"]), "dataset")
    out = out_path(run["out"])
    ckpt_dir, log_path = out / "checkpoint", out / "loss_log.jsonl"

    if step == 2:
        if not run["init"]:
            raise PrerequisiteError("step 2 needs --init pointing at a step-1 checkpoint")
        require(Path(run["init"]) / "manifest.json", "step-1 checkpoint")
        run["init_sha256"] = read_checkpoint_manifest(run["init"])["sha256"]

    ds = load_dataset(data)
    cfg = model_config(run, ds.cfg)
    check_compatible(cfg, ds.cfg, "dataset")
    tcfg = TrainConfig(epochs=run["epochs"], batch_size=run["batch_size"], lr=run["lr"],
                       weight_decay=run["weight_decay"], window=run["window"], augment=not run["no_augment"],
                       aug_prob=run["aug_prob"], halve_every=run["halve_every"], seed=run["seed"])

    store = init_model(cfg, run["seed"])
    basis, start, opt_state, sched_state = ds.basis, 0, None, None
    if args.resume:
        require(ckpt_dir / "manifest.json", "checkpoint to resume")
        ck = load_checkpoint(ckpt_dir, store)
        if ck.progress.get("step") != step:
            raise CompatibilityError(f"checkpoint in {ckpt_dir} is from step {ck.progress.get('step')}, not {step}")
        basis, start, opt_state, sched_state = ck.basis, ck.progress["epoch"], ck.optimizer, ck.schedule
    else:
        prepare_output_dir(out, args.force)
        if step == 2:
            pre = load_pretrained(run["init"], store)
            check_compatible(cfg, pre.cfg, "step-1 checkpoint")
            basis = pre.basis
    finish_run_config(run, out, "train")

    def save(epoch, tr):
        progress = {"step": step, "epoch": epoch + 1, "epochs": tcfg.epochs}
        save_checkpoint(Checkpoint(cfg, store, basis, tr.opt.state_dict(), tr.schedule.state_dict(), progress),
                        ckpt_dir)

    train_ds = Dataset(ds.clips, basis, cfg)
    fn = train_step1 if step == 1 else train_step2
    t0 = time.perf_counter()
    tr = fn(train_ds, store, tcfg, log_path=log_path, start_epoch=start, optimizer_state=opt_state,
            schedule_state=sched_state, on_epoch=save)
    if start >= tcfg.epochs:
        print(f"checkpoint already at epoch {start}; nothing to do")
    else:
        print(f"step {step}: epochs {start}..{tcfg.epochs - 1}  steps {len(tr.history)}  "
              f"final loss {tr.history[-1]['total']:.5f}  skipped {tr.opt.skipped}  "
              f"time {time.perf_counter() - t0:.1f}s")
    print(f"checkpoint {ckpt_dir}")
    return EXIT_OK


# ---- eval -----------------------------------------------------------------------------
EVAL_DEFAULTS = {"data": None, "ckpt": None, "out": None, "intra": False, "workers": 1, "render": False,
                 "render_clips": 2}


def load_model(ckpt_dir: str) -> tuple[ModelConfig, Checkpoint]:
    root = require(Path(ckpt_dir) / "manifest.json", "checkpoint").parent
    cfg = ModelConfig.from_dict(read_checkpoint_manifest(root)["config"])
    store = init_model(cfg, 0)
    return cfg, load_checkpoint(root, store)


def cmd_eval(args) -> int:
    run = resolve(args, EVAL_DEFAULTS)
    data = require(Path(run["data"]), "dataset")
    cfg, ck = load_model(run["ckpt"])
    ds_cfg = ModelConfig.from_dict(read_manifest(data)["config"])
    check_compatible(cfg, ds_cfg, "dataset")
    ds = load_dataset(data, cfg)
    out = out_path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {"dataset": dataset_hash(data), "checkpoint": read_checkpoint_manifest(run["ckpt"])["sha256"]}
    report = evaluate(ds, ck.params, ck.basis, refined=not run["intra"], cfg=cfg, meta=meta,
                      workers=max(1, run["workers"]))
    write_json(out / "report.json", report)
    finish_run_config(run, out, "eval")
    if run["render"]:
        render_clips(ds, cfg, ck, out / "render", run["render_clips"], refined=not run["intra"])
    ov = report["overall"]
    print(f"{report['meta']['pipeline']}  clips {len(report['per_clip'])}  "
          f"P {ov['precision']:.4f}  R {ov['recall']:.4f}  F1 {ov['f1']:.4f}  "
          f"R_F {_fmt(ov['R_F'])}  R_M {_fmt(ov['R_M'])}")
    print(f"report {out / 'report.json'}")
    return EXIT_OK


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# portable pixmaps: binary PPM (color) and PGM (gray), no codec dependencies
def write_ppm(path: Path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm(path: Path, gray: np.ndarray) -> None:
    img = np.clip(np.round(gray * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def draw_lane(img: np.ndarray, lane, rows: np.ndarray, color) -> None:
    """Draw a lane polyline into an (h, w, 3) image, one dot per image row."""
    h, w = img.shape[:2]
    lo, hi = lane.valid
    ys, xs = rows[lo:hi + 1], lane.xs[lo:hi + 1]
    if len(ys) < 2:
        return
    for y in range(int(np.ceil(ys[0])), int(np.floor(ys[-1])) + 1):
        x = int(round(float(np.interp(y, ys, xs))))
        if 0 <= y < h:
            img[y, max(x - 1, 0):min(x + 2, w)] = color


def _feature_image(F: np.ndarray) -> np.ndarray:
    mag = np.abs(F).mean(axis=0)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def render_clips(ds: Dataset, cfg: ModelConfig, ck: Checkpoint, root: Path, limit: int, refined: bool) -> None:
    net = LaneNet(cfg, ck.params)
    omr = OMR(net, ck.basis)
    rows = cfg.sample_rows
    scale = (cfg.image_h // cfg.H, cfg.image_w // cfg.W)
    for clip in ds.clips[:limit]:
        d = root / clip.name
        d.mkdir(parents=True, exist_ok=True)
        outs = omr.process_video(clip.frames, keep_maps=True)
        for t, out in enumerate(outs):
            img = np.ascontiguousarray(np.clip(clip.frames[t].transpose(1, 2, 0), 0, 1))
            for _, gt in clip.gts[t].lanes:
                draw_lane(img, gt, rows, (1.0, 0.1, 0.1))
            if refined:
                pred = [ln for ln, _ in out.lanes[0].lanes]
            else:
                with no_grad():
                    pred = [ln for ln, _ in intra_frame_lanes(net, ck.basis, clip.frames[t]).lanes]
            for ln in pred:
                draw_lane(img, ln, rows, (0.1, 1.0, 0.1))
            write_ppm(d / f"frame{t:03d}_overlay.ppm", img)
            m = out.maps
            grids = {"O_tilde": m["O_tilde"][0, 0], "F_tilde": _feature_image(m["F_tilde"][0]),
                     "F": _feature_image(m["F"][0]), "P_tilde": m["P_tilde"][0, 0], "P": m["P"][0, 0]}
            for name, g in grids.items():
                write_pgm(d / f"frame{t:03d}_{name}.pgm", np.kron(g, np.ones(scale)))


# ---- infer ----------------------------------------------------------------------------
INFER_DEFAULTS = {"ckpt": None, "clip": None, "out": None}


def read_clip_frames(path: Path) -> np.ndarray:
    """Frames from a dataset clip directory (hash-checked when its manifest is present) or a tensor file."""
    if not path.exists():
        raise StorageError(f"clip not found: {path}")
    if path.is_dir():
        manifest_path = path.parent / "manifest.json"
        if manifest_path.exists():
            manifest = read_manifest(path.parent)
            entry = next((e for e in manifest["clips"] if e["name"] == path.name), None)
            if entry is not None:
                return load_clip(path.parent, entry, ModelConfig.from_dict(manifest["config"])).frames
        path = path / "frames.bin"
    try:
        arrays = tensors_from_bytes(path.read_bytes())
    except OSError as exc:
        raise StorageError(f"cannot read clip {path}: {exc}") from exc
    except Exception as exc:  # any decode failure means the file is not a clip
        raise StorageError(f"{path} is not a readable clip: {exc}") from exc
    if len(arrays) != 1 or arrays[0].ndim != 4 or arrays[0].shape[1] != 3:
        raise StorageError(f"{path} does not hold a (T, 3, H, W) frame tensor")
    return arrays[0]


def cmd_infer(args) -> int:
    run = resolve(args, INFER_DEFAULTS)
    cfg, ck = load_model(run["ckpt"])
    frames = read_clip_frames(Path(run["clip"]))
    if frames.shape[2:] != (cfg.image_h, cfg.image_w):
        raise CompatibilityError(f"clip frames are {frames.shape[2:]}, model expects {(cfg.image_h, cfg.image_w)}")
    out = out_path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    omr = OMR(LaneNet(cfg, ck.params), ck.basis)
    timings: list[dict] = []
    outputs = omr.process_video(frames, timings=timings)
    rows = [float(r) for r in cfg.sample_rows]
    lines = []
    for t, o in enumerate(outputs):
        lanes = [{"xs": [float(x) for x in ln.xs], "valid": [int(v) for v in ln.valid], "score": float(s)}
                 for ln, s in o.lanes[0].lanes]
        lines.append(json.dumps({"frame": t, "rows": rows, "lanes": lanes}, sort_keys=True))
    (out / "lanes.jsonl").write_text("\n".join(lines) + "\n")
    per_stage = {s: float(np.mean([d.get(s, 0.0) for d in timings])) for s in STAGES}
    per_stage["Total"] = float(sum(per_stage.values()))
    write_json(out / "timing.json", {"unit": "seconds per frame", "frames": len(frames),
                                     "stages": [{"label": k, "seconds": v} for k, v in per_stage.items()]})
    finish_run_config(run, out, "infer")
    print("  ".join(f"{k} {v:.4f}" for k, v in per_stage.items()) + "  (s/frame)")
    print(f"lanes {out / 'lanes.jsonl'}")
    return EXIT_OK


# ---- ablate ---------------------------------------------------------------------------
ABLATE_DEFAULTS = {"out": None, "seeds": [0, 1, 2], "variants": ["intra", "no_obstacle", "no_aug", "full"],
                   "train_clips": 48, "test_clips": 20, "frames": 8, "step1_epochs": 16, "step2_epochs": 6,
                   "workers": 1, "model": {}}


def cmd_ablate(args) -> int:
    run = resolve(args, ABLATE_DEFAULTS)
    out = out_path(run["out"])
    prepare_output_dir(out, args.force)
    cfg = model_config(run)
    acfg = AblationConfig(seeds=tuple(run["seeds"]), variants=tuple(run["variants"]),
                          train_clips=run["train_clips"], test_clips=run["test_clips"], frames=run["frames"],
                          step1=TrainConfig(epochs=run["step1_epochs"]),
                          step2=TrainConfig(epochs=run["step2_epochs"]))
    finish_run_config(run, out, "ablate")
    t0 = time.perf_counter()
    per_seed, summary = run_ablation(cfg, acfg, workers=max(1, run["workers"]))
    for seed, reports in per_seed.items():
        for variant, report in reports.items():
            write_json(out / f"report_seed{seed}_{variant}.json", report)
    write_json(out / "summary.json", summary)
    print(f"{'variant':<12} {'F1':>7} {'R_F':>7} {'R_M':>7}")
    for v, row in summary.items():
        print(f"{v:<12} {row['f1']:7.4f} {row['R_F']:7.4f} {row['R_M']:7.4f}")
    print(f"{len(per_seed)} seeds in {time.perf_counter() - t0:.0f}s; reports in {out}")
    return EXIT_OK


# ---- parser ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omrlane", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, force=True):
        sp.add_argument("--config", help="JSON file of option values; explicit flags override it")
        if force:
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    g = sub.add_parser("generate", help="render a synthetic clip dataset")
    common(g)
    g.add_argument("--out", help="output dataset directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--clips", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--occlusion", choices=sorted(OCCLUSION_LEVELS))
    g.add_argument("--split", type=int, help="disjoint sub-stream index (e.g. 0 train, 1 test)")
    g.add_argument("--basis-from", help="reuse the eigenlane basis of an existing dataset")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train step 1 (intra-frame) or step 2 (refinement module)")
    common(t)
    t.add_argument("--data", help="training dataset directory")
    t.add_argument("--out", help="run directory (checkpoint/, loss_log.jsonl, run_config.json)")
    t.add_argument("--step", type=int, choices=(1, 2))
    t.add_argument("--init", help="step-1 checkpoint directory (required for step 2)")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--window", type=int, help="truncated backprop window in frames (step 2)")
    t.add_argument("--halve-every", type=int, help="halve lr every N optimizer steps instead of on plateau")
    t.add_argument("--aug-prob", type=float, help="chance a step-2 clip gets synthetic occluders")
    t.add_argument("--no-augment", action="store_const", const=True, help="disable step-2 occluder synthesis")
    t.add_argument("--no-obstacle", action="store_const", const=True, help="drop the obstacle mask from the OMR")
    t.add_argument("--no-memory", action="store_const", const=True, help="drop the ConvLSTM memory")
    t.add_argument("--convlstm-variant", choices=("printed", "standard"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(e, force=False)
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--ckpt", help="checkpoint directory")
    e.add_argument("--out", help="report directory")
    e.add_argument("--intra", action="store_const", const=True, help="image-only pipeline (no refinement)")
    e.add_argument("--workers", type=int, help="clips evaluated concurrently")
    e.add_argument("--render", action="store_const", const=True, help="write overlays and intermediate maps")
    e.add_argument("--render-clips", type=int, help="number of clips to render")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="run the recursive pipeline on one clip with stage timing")
    common(i, force=False)
    i.add_argument("--ckpt", help="checkpoint directory")
    i.add_argument("--clip", help="dataset clip directory or frames tensor file")
    i.add_argument("--out", help="output directory (lanes.jsonl, timing.json)")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train and score the ablation matrix over several seeds")
    common(a)
    a.add_argument("--out", help="output directory")
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--variants", nargs="+", choices=list(VARIANT_SPECS))
    a.add_argument("--train-clips", type=int)
    a.add_argument("--test-clips", type=int)
    a.add_argument("--frames", type=int)
    a.add_argument("--step1-epochs", type=int)
    a.add_argument("--step2-epochs", type=int)
    a.add_argument("--workers", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


REQUIRED = {"generate": ("out",), "train": ("data", "out"), "eval": ("data", "ckpt", "out"),
            "infer": ("ckpt", "clip", "out"), "ablate": ("out",)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        file_cfg = load_config_file(args.config)
        missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None and not file_cfg.get(k)]
        if missing:
            parser.error(f"{args.command} needs " + ", ".join("--" + k.replace("_", "-") for k in missing))
        return args.func(args)
    except PrerequisiteError as exc:
        code, msg = EXIT_PREREQ, exc
    except CompatibilityError as exc:
        code, msg = EXIT_COMPAT, exc
    except StorageError as exc:
        code, msg = EXIT_IO, exc
    except (InputError, ConfigError, DimensionError) as exc:
        code, msg = EXIT_INPUT, exc
    except DivergenceError as exc:
        code, msg = EXIT_DIVERGED, exc
    except OSError as exc:
        code, msg = EXIT_IO, exc
    print(f"omrlane {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
