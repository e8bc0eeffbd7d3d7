"""Two-step training: intra-frame network first, then the refinement module with everything else frozen.

Each epoch draws its shuffling and augmentation from generators keyed by
(seed, stream, step, epoch), so a run resumed from an end-of-epoch
checkpoint replays exactly what an uninterrupted run would have done.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from omrlane.autodiff import ParamStore, Tensor, no_grad
from omrlane.config import ModelConfig
from omrlane.dataset import Dataset
from omrlane.eigenlane import EigenlaneBasis
from omrlane.errors import DivergenceError
from omrlane.losses import LossReport, focal_loss, regression_loss
from omrlane.network import LaneNet, init_network_params
from omrlane.omr import OMR, init_omr_params
from omrlane.optim import AdamW, PlateauHalver
from omrlane.scenegen import OCCLUSION_LEVELS, overlay_occluder, sample_occluder
from omrlane.seeding import stream_rng

logger = logging.getLogger(__name__)

FROZEN_IN_STEP2 = ("enc.", "dec.", "obs.")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    plateau_patience: int = 3
    halve_every: int | None = None      # fixed halving interval in optimizer steps (overrides plateau)
    max_halvings: int = 4
    window: int = 4                     # truncated backprop length in step 2
    augment: bool = True
    aug_prob: float = 1.0
    aug_level: str = "heavy"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def init_model(cfg: ModelConfig, seed: int) -> ParamStore:
    """All parameters (intra-frame network and refinement module) from the `init` stream."""
    store = init_network_params(cfg, stream_rng(seed, "init", 0))
    init_omr_params(cfg, stream_rng(seed, "init", 1), store)
    return store


def _stack_gt(gts: list, attr: str) -> np.ndarray:
    return np.stack([getattr(g, attr) for g in gts])[:, None]


class _Trainer:
    """Shared epoch loop: optimizer, schedule, JSON-lines log, divergence guard."""

    def __init__(self, store: ParamStore, tcfg: TrainConfig, step: int, log_path=None,
                 optimizer_state: dict | None = None, schedule_state: dict | None = None):
        self.store = store
        self.tcfg = tcfg
        self.step = step
        self.log_path = Path(log_path) if log_path is not None else None
        self.opt = AdamW(store, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        self.schedule = PlateauHalver(self.opt, tcfg.plateau_patience, max_halvings=tcfg.max_halvings)
        if optimizer_state is not None:
            self.opt.load_state_dict(optimizer_state)
        if schedule_state is not None:
            self.schedule.load_state_dict(schedule_state)
        self.history: list[dict] = []

    def update(self, total: Tensor, report: LossReport, epoch: int, batch: int) -> None:
        if not report.finite():
            raise DivergenceError(f"non-finite loss at step {self.step}, epoch {epoch}, batch {batch}: {report}")
        total.backward()
        self.opt.step()
        self.store.zero_grad()
        tc = self.tcfg
        if tc.halve_every and self.opt.t % tc.halve_every == 0 and self.schedule.halvings < tc.max_halvings:
            self.opt.lr *= 0.5
            self.schedule.halvings += 1
        line = {"step": self.step, "epoch": epoch, "batch": batch, "lr": self.opt.lr, **report.to_dict()}
        self.history.append(line)
        if self.log_path is not None:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(line, sort_keys=True) + "\n")

    def end_epoch(self, epoch: int, lines: list[dict]) -> float:
        mean = float(np.mean([ln["total"] for ln in lines])) if lines else float("nan")
        if not self.tcfg.halve_every:
            self.schedule.observe(mean)
        logger.info("step %d epoch %d: mean loss %.5f lr %.2e", self.step, epoch, mean, self.opt.lr)
        return mean


EpochHook = Callable[[int, "_Trainer"], None]


# ---- step 1 --------------------------------------------------------------------------
def step1_loss(net: LaneNet, basis: EigenlaneBasis, images: np.ndarray, gts: list):
    F = net.encode(images)
    P = net.decode_prob(F)
    C = net.decode_coeff(F)
    S = net.obstacle_prob(F)
    cls_P = focal_loss(P, _stack_gt(gts, "P"))
    reg_C = regression_loss(C, gts, basis.U, net.cfg)
    cls_S = focal_loss(S, _stack_gt(gts, "S"))
    total = cls_P + reg_C + cls_S
    return total, LossReport.from_parts(cls_P.item(), reg_C.item(), cls_S.item())


def step1_batches(ds: Dataset, tcfg: TrainConfig, epoch: int) -> list[list[tuple[int, int]]]:
    index = ds.frame_index()
    order = stream_rng(tcfg.seed, "shuffle", 1, epoch).permutation(len(index))
    bs = tcfg.batch_size
    return [[index[i] for i in order[k:k + bs]] for k in range(0, len(order), bs)]


def train_step1(ds: Dataset, store: ParamStore, tcfg: TrainConfig, log_path=None, start_epoch: int = 0,
                optimizer_state=None, schedule_state=None, on_epoch: EpochHook | None = None) -> _Trainer:
    """Frames are independent samples; minimizes focal(P) + LIoU(C) + focal(S)."""
    store.unfreeze_all()
    net = LaneNet(ds.cfg, store)
    net.training = True
    tr = _Trainer(store, tcfg, 1, log_path, optimizer_state, schedule_state)
    for epoch in range(start_epoch, tcfg.epochs):
        lines = []
        for b, batch in enumerate(step1_batches(ds, tcfg, epoch)):
            images = np.stack([ds.clips[c].frames[t] for c, t in batch])
            gts = [ds.clips[c].gts[t] for c, t in batch]
            total, report = step1_loss(net, ds.basis, images, gts)
            tr.update(total, report, epoch, b)
            lines.append(tr.history[-1])
        tr.end_epoch(epoch, lines)
        if on_epoch is not None:
            on_epoch(epoch, tr)
    net.training = False
    return tr


# ---- step 2 --------------------------------------------------------------------------
def augment_clip(frames: np.ndarray, gts: list, cfg: ModelConfig, rng: np.random.Generator,
                 level: str = "heavy"):
    """Overlay one or more new moving occluders on a clip (lane labels are kept)."""
    (lo, hi), *_ = OCCLUSION_LEVELS[level]
    count = int(rng.integers(max(lo, 1), max(hi, 1) + 1))
    horizon = float(cfg.sample_rows[0])
    for _ in range(count):
        track = sample_occluder(rng, cfg.image_h, cfg.image_w, horizon, len(frames), level)
        frames, gts = overlay_occluder(frames, gts, track, cfg)
    return frames, gts


def step2_batches(ds: Dataset, tcfg: TrainConfig, epoch: int) -> list[list[int]]:
    order = stream_rng(tcfg.seed, "shuffle", 2, epoch).permutation(len(ds.clips))
    bs = tcfg.batch_size
    return [[int(i) for i in order[k:k + bs]] for k in range(0, len(order), bs)]


def step2_window_loss(omr: OMR, F_tilde: Tensor, O: np.ndarray, gts: list, state):
    """Unroll one truncated window; F_tilde (B,T,K,H,W) and O (B,T,1,H,W) are precomputed."""
    cls_sum, reg_sum, total = None, None, None
    T = F_tilde.shape[1]
    for t in range(T):
        out = omr.step(None, state, F_tilde=Tensor(F_tilde.data[:, t]), O=O[:, t])
        frame_gts = [g[t] for g in gts]
        cls_P = focal_loss(out.P, _stack_gt(frame_gts, "P"))
        reg_C = regression_loss(out.C, frame_gts, omr.basis.U, omr.cfg)
        loss = cls_P + reg_C
        total = loss if total is None else total + loss
        cls_sum = cls_P.item() if cls_sum is None else cls_sum + cls_P.item()
        reg_sum = reg_C.item() if reg_sum is None else reg_sum + reg_C.item()
        state = out.state
    total = total * (1.0 / T)
    report = LossReport.from_parts(cls_sum / T, reg_sum / T)
    return total, report, state


def encode_clips(net: LaneNet, frames: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Intra-frame features and obstacle masks for (B,T,3,H0,W0) frames, untracked."""
    B, T = frames.shape[:2]
    with no_grad():
        F = net.encode(frames.reshape(B * T, *frames.shape[2:]))
        O = net.detect_obstacles(F).O
    return Tensor(F.data.reshape(B, T, *F.shape[1:])), O.reshape(B, T, *O.shape[1:])


def train_step2(ds: Dataset, store: ParamStore, tcfg: TrainConfig, log_path=None, start_epoch: int = 0,
                optimizer_state=None, schedule_state=None, on_epoch: EpochHook | None = None) -> _Trainer:
    """Unrolls the recursion over clips; only `omr.*` parameters move."""
    store.unfreeze_all()
    store.freeze_prefix(*FROZEN_IN_STEP2)
    cfg = ds.cfg
    net = LaneNet(cfg, store)
    net.training = False
    omr = OMR(net, ds.basis)
    tr = _Trainer(store, tcfg, 2, log_path, optimizer_state, schedule_state)
    for epoch in range(start_epoch, tcfg.epochs):
        lines, b = [], 0
        for k, clip_ids in enumerate(step2_batches(ds, tcfg, epoch)):
            rng = stream_rng(tcfg.seed, "augment", epoch, k)
            frames, gts = [], []
            for c in clip_ids:
                clip = ds.clips[c]
                f, g = clip.frames, clip.gts
                if tcfg.augment and rng.random() < tcfg.aug_prob:
                    f, g = augment_clip(f, g, cfg, rng, tcfg.aug_level)
                frames.append(f)
                gts.append(g)
            lengths = {len(f) for f in frames}
            T = min(lengths)
            F_tilde, O = encode_clips(net, np.stack([f[:T] for f in frames]))
            state = None
            for w0 in range(0, T, tcfg.window):
                w1 = min(w0 + tcfg.window, T)
                total, report, state = step2_window_loss(
                    omr, Tensor(F_tilde.data[:, w0:w1]), O[:, w0:w1], [g[w0:w1] for g in gts], state)
                tr.update(total, report, epoch, b)
                lines.append(tr.history[-1])
                state = state.detach()
                b += 1
        tr.end_epoch(epoch, lines)
        if on_epoch is not None:
            on_epoch(epoch, tr)
    return tr
