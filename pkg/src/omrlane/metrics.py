"""Lane stripe IoU, precision/recall/F1/mIoU, and flickering / missing rates over tracked GT lanes."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from omrlane.config import ModelConfig
from omrlane.eigenlane import LaneCurve
from omrlane.raster import stripe_mask

IOU_THRESHOLD = 0.5


def lane_stripe(lane: LaneCurve, cfg: ModelConfig, width: float | None = None) -> np.ndarray:
    """Stripe of a curve on the input-image pixel grid."""
    width = cfg.eval_stripe_width if width is None else width
    return stripe_mask(lane.xs, cfg.sample_rows, cfg.image_h, cfg.image_w, cfg.image_h, cfg.image_w,
                       width, lane.valid)


def stripe_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return 0.0 if union == 0 else np.count_nonzero(a & b) / union


def lane_iou(pred: LaneCurve, gt: LaneCurve, cfg: ModelConfig, width: float | None = None) -> float:
    return stripe_iou(lane_stripe(pred, cfg, width), lane_stripe(gt, cfg, width))


def iou_matrix(preds: list, gts: list, cfg: ModelConfig, width: float | None = None) -> np.ndarray:
    ps = [lane_stripe(p, cfg, width) for p in preds]
    gs = [lane_stripe(g, cfg, width) for g in gts]
    out = np.zeros((len(ps), len(gs)))
    for i, p in enumerate(ps):
        for j, g in enumerate(gs):
            out[i, j] = stripe_iou(p, g)
    return out


@dataclass
class MatchResult:
    """One frame: matches as (pred index, gt track id, IoU), unmatched preds and GT track ids."""
    matches: list = field(default_factory=list)
    fp: list = field(default_factory=list)
    fn: list = field(default_factory=list)

    def detected(self) -> set:
        return {tid for _, tid, _ in self.matches}


def greedy_match(iou: np.ndarray, threshold: float = IOU_THRESHOLD) -> list[tuple[int, int, float]]:
    """One-to-one pairs taken in descending IoU order among pairs strictly above the threshold."""
    pairs = [(iou[i, j], i, j) for i in range(iou.shape[0]) for j in range(iou.shape[1]) if iou[i, j] > threshold]
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_p, used_g, out = set(), set(), []
    for v, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, float(v)))
    return out


def match_frame(preds: list, gts: list, cfg: ModelConfig, width: float | None = None) -> MatchResult:
    """`gts` is [(track_id, LaneCurve)]; `preds` is [LaneCurve]."""
    iou = iou_matrix(preds, [g for _, g in gts], cfg, width)
    pairs = greedy_match(iou)
    mp = {i for i, _, _ in pairs}
    mg = {j for _, j, _ in pairs}
    return MatchResult(
        matches=[(i, gts[j][0], v) for i, j, v in pairs],
        fp=[i for i in range(len(preds)) if i not in mp],
        fn=[gts[j][0] for j in range(len(gts)) if j not in mg],
    )


@dataclass
class ImageScores:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    miou: float | None


def image_scores(results: list[MatchResult]) -> ImageScores:
    tp = sum(len(r.matches) for r in results)
    fp = sum(len(r.fp) for r in results)
    fn = sum(len(r.fn) for r in results)
    return scores_from_counts(tp, fp, fn, [v for r in results for _, _, v in r.matches])


def scores_from_counts(tp: int, fp: int, fn: int, ious=()) -> ImageScores:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    ious = list(ious)
    miou = float(np.mean(ious)) if tp and ious else None
    return ImageScores(tp, fp, fn, precision, recall, f1, miou)


@dataclass
class StabilityCounts:
    N: int = 0
    N_S: int = 0
    N_F: int = 0
    N_M: int = 0

    def __add__(self, other: "StabilityCounts") -> "StabilityCounts":
        return StabilityCounts(self.N + other.N, self.N_S + other.N_S, self.N_F + other.N_F, self.N_M + other.N_M)

    @property
    def R_F(self) -> float | None:
        return self.N_F / self.N if self.N else None

    @property
    def R_M(self) -> float | None:
        return self.N_M / self.N if self.N else None


def temporal_stability(results: list[MatchResult], gt_tracks: list[list[int]]) -> StabilityCounts:
    """Classify each GT lane present in two adjacent frames as stable, flickering, or missing."""
    counts = StabilityCounts()
    for t in range(1, len(results)):
        prev_ids = set(gt_tracks[t - 1])
        hit_prev = results[t - 1].detected()
        hit_now = results[t].detected()
        for tid in gt_tracks[t]:
            if tid not in prev_ids:
                continue
            hits = (tid in hit_prev) + (tid in hit_now)
            counts.N += 1
            if hits == 2:
                counts.N_S += 1
            elif hits == 1:
                counts.N_F += 1
            else:
                counts.N_M += 1
    return counts


# ---- reports -------------------------------------------------------------------------
def clip_report(name: str, pred_lanes: list[list[LaneCurve]], gt_lanes: list[list], cfg: ModelConfig) -> dict:
    """Per-clip metrics; `pred_lanes[t]` are curves, `gt_lanes[t]` are (track id, curve) pairs."""
    results = [match_frame(p, g, cfg) for p, g in zip(pred_lanes, gt_lanes)]
    scores = image_scores(results)
    stab = temporal_stability(results, [[tid for tid, _ in g] for g in gt_lanes])
    return {
        "name": name,
        "frames": len(results),
        **asdict(scores),
        "R_F": stab.R_F,
        "R_M": stab.R_M,
        "stability": asdict(stab),
        "matches": [{"matches": [list(m) for m in r.matches], "fp": r.fp, "fn": r.fn} for r in results],
    }


def summarize(clips: list[dict]) -> dict:
    """Pool counts over clips (mIoU pools every TP pair)."""
    tp = sum(c["tp"] for c in clips)
    fp = sum(c["fp"] for c in clips)
    fn = sum(c["fn"] for c in clips)
    ious = [m[2] for c in clips for fr in c["matches"] for m in fr["matches"]]
    scores = scores_from_counts(tp, fp, fn, ious)
    stab = StabilityCounts()
    for c in clips:
        stab = stab + StabilityCounts(**c["stability"])
    return {**asdict(scores), "R_F": stab.R_F, "R_M": stab.R_M, "stability": asdict(stab), "clips": len(clips)}


def build_report(clips: list[dict], meta: dict | None = None) -> dict:
    return {"meta": meta or {}, "overall": summarize(clips), "per_clip": clips}


def recompute_from_matches(clip: dict) -> ImageScores:
    """Rebuild scores from a report's dumped match lists."""
    results = [MatchResult([tuple(m) for m in fr["matches"]], fr["fp"], fr["fn"]) for fr in clip["matches"]]
    return image_scores(results)
