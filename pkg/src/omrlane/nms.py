"""Greedy lane NMS over the probability map, reconstructing each lane from its eigenlane coefficients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from omrlane.config import ModelConfig
from omrlane.eigenlane import EigenlaneBasis, LaneCurve
from omrlane.raster import stripe_mask


@dataclass
class LaneMask:
    L: np.ndarray                      # (H, W) binary
    lanes: list = field(default_factory=list)   # [(LaneCurve, score)]
    seeds: list = field(default_factory=list)   # [(row, col)] of each selected pixel


def render_lane_mask(lanes, cfg: ModelConfig) -> np.ndarray:
    L = np.zeros((cfg.H, cfg.W))
    rows = cfg.sample_rows
    for lane in lanes:
        xs = lane.xs if isinstance(lane, LaneCurve) else lane
        L[stripe_mask(xs, rows, cfg.H, cfg.W, cfg.image_h, cfg.image_w, cfg.gt_stripe_width)] = 1.0
    return L


def nms_decode(P: np.ndarray, C: np.ndarray, basis: EigenlaneBasis, cfg: ModelConfig) -> LaneMask:
    """Select lanes while the best remaining probability exceeds the threshold.

    P is (H, W) or (1, H, W); C is (M, H, W). Each iteration takes the argmax
    pixel, rebuilds its lane as U @ C(x*), and removes every pixel within the
    dilated lane stripe (plus x* itself) from further consideration.
    """
    P = np.asarray(P).reshape(cfg.H, cfg.W)
    if C.shape[0] != basis.M:
        raise ValueError(f"coefficient map has {C.shape[0]} channels, basis has M={basis.M}")
    rows = cfg.sample_rows
    avail = P.copy()
    alive = np.ones_like(P, dtype=bool)
    lanes, seeds = [], []
    for _ in range(cfg.nms_max_lanes):
        masked = np.where(alive, avail, -np.inf)
        flat = int(np.argmax(masked))
        r, c = divmod(flat, cfg.W)
        score = masked[r, c]
        if not score > cfg.nms_threshold:
            break
        xs = basis.reconstruct(C[:, r, c])
        lanes.append((LaneCurve(xs), float(score)))
        seeds.append((r, c))
        alive &= ~stripe_mask(xs, rows, cfg.H, cfg.W, cfg.image_h, cfg.image_w, 2.0 * cfg.nms_half_width)
        alive[r, c] = False
    L = render_lane_mask([ln for ln, _ in lanes], cfg)
    return LaneMask(L, lanes, seeds)
