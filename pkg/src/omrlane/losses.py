"""Focal classification loss and the line-IoU regression loss, in numpy and autodiff form."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from omrlane.autodiff import Tensor, absolute, as_tensor, clip, log, matmul, take_flat, transpose
from omrlane.errors import DimensionError

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass
class LossReport:
    cls_P: float
    reg_C: float
    cls_S: float | None
    total: float

    @classmethod
    def from_parts(cls, cls_P: float, reg_C: float, cls_S: float | None = None) -> "LossReport":
        total = cls_P + reg_C
        if cls_S is not None:
            total = total + cls_S
        return cls(float(cls_P), float(reg_C), None if cls_S is None else float(cls_S), float(total))

    def finite(self) -> bool:
        vals = [self.cls_P, self.reg_C, self.total] + ([] if self.cls_S is None else [self.cls_S])
        return bool(np.all(np.isfinite(vals)))

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


# ---- focal loss ------------------------------------------------------------------
def focal_loss(pred, gt, gamma: float = FOCAL_GAMMA, alpha: float | None = FOCAL_ALPHA) -> Tensor:
    """Pixel-mean focal loss; `alpha=None` drops the class weighting."""
    pred = as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError("focal_loss", pred.shape, gt.shape)
    p = clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    p_t = p * gt + (1.0 - p) * (1.0 - gt)
    term = -log(p_t)
    if gamma:
        term = (1.0 - p_t) ** gamma * term
    if alpha is not None:
        term = term * (alpha * gt + (1.0 - alpha) * (1.0 - gt))
    return term.mean()


def focal_loss_np(pred, gt, gamma: float = FOCAL_GAMMA, alpha: float | None = FOCAL_ALPHA) -> float:
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    gt = np.asarray(gt, dtype=np.float64)
    p_t = np.where(gt > 0.5, p, 1.0 - p)
    w = 1.0 if alpha is None else np.where(gt > 0.5, alpha, 1.0 - alpha)
    return float(np.mean(-w * (1.0 - p_t) ** gamma * np.log(p_t)))


# ---- line IoU ----------------------------------------------------------------------
def liou(pred_xs, gt_xs, extension: float, rows=None) -> float | None:
    """Line IoU of two curves sampled on the same rows; None when no row is shared.

    Each point widens to [x - e, x + e]; per row the signed overlap is
    2e - |dx| and the union 2e + |dx|, summed before dividing.
    """
    pred_xs = np.asarray(pred_xs, dtype=np.float64)
    gt_xs = np.asarray(gt_xs, dtype=np.float64)
    if pred_xs.shape != gt_xs.shape:
        raise DimensionError("liou", pred_xs.shape, gt_xs.shape)
    if extension <= 0:
        raise ValueError("extension must be positive")
    rows = np.ones(pred_xs.shape, dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
    if not rows.any():
        return None
    d = np.abs(pred_xs - gt_xs)[rows]
    return float(np.sum(2 * extension - d) / np.sum(2 * extension + d))


def liou_loss_curves(pred, gt, extension: float) -> float:
    """1 - LIoU between two LaneCurves over the rows valid in both."""
    rows = pred.valid_mask() & gt.valid_mask()
    value = liou(pred.xs, gt.xs, extension, rows)
    if value is None:
        logger.warning("LIoU: curves share no valid row; loss set to 1")
        return 1.0
    return 1.0 - value


def liou_loss_batch(pred_xs: Tensor, gt_xs: np.ndarray, rows: np.ndarray, extension: float) -> Tensor:
    """Mean (1 - LIoU) over a batch of curve pairs; pred (n, N) tracked, gt/rows (n, N)."""
    rows = np.asarray(rows, dtype=np.float64)
    d = absolute(pred_xs - gt_xs) * rows
    overlap = (2 * extension * rows - d).sum(axis=1)
    union = (2 * extension * rows + d).sum(axis=1)
    return (1.0 - overlap / union).mean()


def gather_lane_targets(gts: list, cfg) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat pixel indices (into a (B*H*W) grid) of GT lane pixels with each pixel's GT curve and valid rows."""
    flat, curves, rows = [], [], []
    hw = cfg.H * cfg.W
    for b, gt in enumerate(gts):
        idx = np.flatnonzero(gt.owner.reshape(-1) >= 0)
        owners = gt.owner.reshape(-1)[idx]
        lanes = [ln for _, ln in gt.lanes]
        flat.append(b * hw + idx)
        curves.extend(lanes[o].xs for o in owners)
        rows.extend(lanes[o].valid_mask() for o in owners)
    flat = np.concatenate(flat) if flat else np.zeros(0, dtype=np.int64)
    if not curves:
        return flat, np.zeros((0, cfg.N)), np.zeros((0, cfg.N), dtype=bool)
    return flat, np.stack(curves), np.stack(rows)


def regression_loss(C: Tensor, gts: list, U: np.ndarray, cfg) -> Tensor:
    """LIoU between curves decoded from C at every GT lane pixel and that pixel's GT curve."""
    flat, gt_xs, rows = gather_lane_targets(gts, cfg)
    if len(flat) == 0:
        return Tensor(0.0)
    B, M = C.shape[0], C.shape[1]
    per_pixel = transpose(C, (0, 2, 3, 1)).reshape(B * cfg.H * cfg.W, M)
    coeffs = take_flat(per_pixel, flat, axis=0)
    pred_xs = matmul(coeffs, U.T)
    return liou_loss_batch(pred_xs, gt_xs, rows, cfg.liou_extension)
