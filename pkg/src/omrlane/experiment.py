"""Prediction over datasets, metric reports, and the ablation matrix."""
from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from omrlane.autodiff import ParamStore, no_grad
from omrlane.config import ModelConfig
from omrlane.dataset import Clip, Dataset, build_dataset, dataset_digest
from omrlane.eigenlane import EigenlaneBasis
from omrlane.errors import ConfigError
from omrlane.metrics import build_report, clip_report
from omrlane.network import LaneNet
from omrlane.nms import nms_decode
from omrlane.omr import OMR
from omrlane.training import TrainConfig, init_model, train_step1, train_step2

logger = logging.getLogger(__name__)


def predict_intra(net: LaneNet, basis: EigenlaneBasis, clip: Clip) -> list[list]:
    """Per-frame lane curves from the image-only pipeline."""
    with no_grad():
        F = net.encode(clip.frames)
        P = net.decode_prob(F).data
        C = net.decode_coeff(F).data
    return [[ln for ln, _ in nms_decode(P[t, 0], C[t], basis, net.cfg).lanes] for t in range(len(P))]


def predict_refined(omr: OMR, clip: Clip) -> list[list]:
    outs = omr.process_video(clip.frames)
    return [[ln for ln, _ in out.lanes[0].lanes] for out in outs]


def evaluate(ds: Dataset, store: ParamStore, basis: EigenlaneBasis, refined: bool,
             cfg: ModelConfig | None = None, meta: dict | None = None, workers: int = 1) -> dict:
    """Metric report over every clip; clips fan out to `workers` threads, results keep clip order."""
    cfg = cfg or ds.cfg
    net = LaneNet(cfg, store)
    net.training = False
    omr = OMR(net, basis)

    def one(clip: Clip) -> dict:
        preds = predict_refined(omr, clip) if refined else predict_intra(net, basis, clip)
        return clip_report(clip.name, preds, [g.lanes for g in clip.gts], cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            clips = list(pool.map(one, ds.clips))
    else:
        clips = [one(c) for c in ds.clips]
    return build_report(clips, {"pipeline": "refined" if refined else "intra", **(meta or {})})


# ---- ablation ------------------------------------------------------------------------------
# variant -> (model config overrides, synthetic occluder augmentation); None = intra-frame only
VARIANT_SPECS = {
    "intra": None,
    "no_obstacle": ({"use_obstacle": False}, True),
    "no_memory": ({"use_memory": False}, True),
    "no_aug": ({}, False),
    "full": ({}, True),
}


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2)
    variants: tuple = ("intra", "no_aug", "full")
    train_clips: int = 48
    test_clips: int = 20
    frames: int = 8
    train_occlusion: str = "moderate"
    test_occlusion: str = "heavy"
    step1: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=16))
    step2: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6))

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANT_SPECS]
        if unknown:
            raise ConfigError(f"unknown ablation variants {unknown}; choose from {list(VARIANT_SPECS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        d = dict(d)
        for key in ("step1", "step2"):
            if isinstance(d.get(key), dict):
                d[key] = TrainConfig.from_dict(d[key])
        for key in ("seeds", "variants"):
            if key in d:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def variant_model(cfg: ModelConfig, seed: int, variant: str, pretrained: ParamStore) -> tuple[ModelConfig, ParamStore]:
    """Fresh refinement module for `variant` on top of the step-1 intra-frame weights."""
    overrides, _ = VARIANT_SPECS[variant]
    vcfg = replace(cfg, **overrides)
    store = init_model(vcfg, seed)
    store.load_arrays({n: t.data for n, t in pretrained.items() if not n.startswith("omr.")},
                      {n: (st.mean, st.var) for n, st in pretrained.stat_items() if not n.startswith("omr.")})
    return vcfg, store


def run_seed(seed: int, cfg: ModelConfig, acfg: AblationConfig, workers: int = 1,
             stores: dict | None = None) -> dict:
    """Train once through step 1, branch into step-2 variants, and evaluate each on held-out clips.

    When `stores` is a dict it receives the trained parameter store of every variant.
    """
    t0 = time.perf_counter()
    train = build_dataset(seed, cfg, acfg.train_clips, acfg.frames, acfg.train_occlusion, split=0)
    test = build_dataset(seed, cfg, acfg.test_clips, acfg.frames, acfg.test_occlusion, split=1, basis=train.basis)
    meta = {"seed": seed, "test_dataset": dataset_digest(test)}
    store = init_model(cfg, seed)
    train_step1(train, store, _with_seed(acfg.step1, seed))
    reports = {}
    for name in acfg.variants:
        if VARIANT_SPECS[name] is None:
            reports[name] = evaluate(test, store, train.basis, refined=False, meta={**meta, "variant": name},
                                     workers=workers)
            if stores is not None:
                stores[name] = store
            continue
        vcfg, vstore = variant_model(cfg, seed, name, store)
        tc = _with_seed(acfg.step2, seed)
        tc.augment = VARIANT_SPECS[name][1]
        train_step2(Dataset(train.clips, train.basis, vcfg), vstore, tc)
        reports[name] = evaluate(test, vstore, train.basis, refined=True, cfg=vcfg,
                                 meta={**meta, "variant": name}, workers=workers)
        if stores is not None:
            stores[name] = vstore
        logger.info("seed %d variant %s: f1 %.4f R_M %s", seed, name, reports[name]["overall"]["f1"],
                    reports[name]["overall"]["R_M"])
    logger.info("seed %d done in %.1fs", seed, time.perf_counter() - t0)
    return reports


def _with_seed(tc: TrainConfig, seed: int) -> TrainConfig:
    out = copy.deepcopy(tc)
    out.seed = seed
    return out


def summarize_ablation(per_seed: dict[int, dict]) -> dict:
    """Mean F1 / R_M / R_F per variant over seeds."""
    out = {}
    variants = next(iter(per_seed.values())).keys()
    for v in variants:
        rows = [per_seed[s][v]["overall"] for s in per_seed]
        out[v] = {
            "f1": float(np.mean([r["f1"] for r in rows])),
            "R_M": float(np.mean([r["R_M"] for r in rows])),
            "R_F": float(np.mean([r["R_F"] for r in rows])),
            "per_seed_f1": [r["f1"] for r in rows],
            "per_seed_R_M": [r["R_M"] for r in rows],
        }
    return out


def run_ablation(cfg: ModelConfig, acfg: AblationConfig, workers: int = 1,
                 stores: dict | None = None) -> tuple[dict, dict]:
    per_seed = {}
    for s in acfg.seeds:
        seed_stores = {} if stores is not None else None
        per_seed[s] = run_seed(s, cfg, acfg, workers, seed_stores)
        if stores is not None:
            stores[s] = seed_stores
    return per_seed, summarize_ablation(per_seed)
