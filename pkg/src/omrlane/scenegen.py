"""Procedural road videos with exact lane / obstacle ground truth.

Lanes are quadratic in the normalized depth coordinate d (0 at the horizon,
1 at the bottom row) with coefficients that drift linearly over frames.
Occluders are rounded-rectangle sprites whose position and size vary
linearly in time.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from omrlane.config import ModelConfig
from omrlane.eigenlane import EigenlaneBasis, LaneCurve, extrapolate_partial
from omrlane.raster import grid_rows_in_image, lane_distance_map

log = logging.getLogger(__name__)

SPRITE_RES = 24


@dataclass
class LaneTrack:
    track_id: int
    coeffs: list            # x = a0 + a1*d + a2*d^2 (input-image pixels)
    drift: list             # per-frame change of (a0, a1, a2)
    dashed: bool = False
    color: list = field(default_factory=lambda: [0.95, 0.95, 0.95])
    dash_phase: float = 0.0
    dash_speed: float = 0.15

    def coeffs_at(self, t: int) -> np.ndarray:
        return np.asarray(self.coeffs) + t * np.asarray(self.drift)


@dataclass
class OccluderTrack:
    pos0: list              # top-left (x, y), image pixels
    velocity: list          # pixels per frame
    size0: list             # (w, h)
    size_rate: list         # pixels per frame
    color: list
    sprite_seed: int = 0

    def rect(self, t: int) -> tuple[float, float, float, float]:
        x = self.pos0[0] + t * self.velocity[0]
        y = self.pos0[1] + t * self.velocity[1]
        w = self.size0[0] + t * self.size_rate[0]
        h = self.size0[1] + t * self.size_rate[1]
        return x, y, w, h

    def sprite(self) -> np.ndarray:
        """(SPRITE_RES, SPRITE_RES, 4) RGBA patch: rounded rectangle with noisy paint and a dark band."""
        rng = np.random.default_rng(self.sprite_seed)
        n = SPRITE_RES
        u = (np.arange(n) + 0.5) / n
        uu, vv = np.meshgrid(u, u)
        r = 0.22
        dx = np.maximum(np.abs(uu - 0.5) - (0.5 - r), 0.0)
        dy = np.maximum(np.abs(vv - 0.5) - (0.5 - r), 0.0)
        alpha = (dx * dx + dy * dy <= r * r).astype(np.float64)
        base = np.asarray(self.color, dtype=np.float64)
        shade = 1.0 + 0.12 * rng.standard_normal((n, n))
        band = (vv > 0.18) & (vv < 0.38)
        shade[band] *= 0.45
        rgb = np.clip(base[None, None, :] * shade[..., None], 0.0, 1.0)
        return np.concatenate([rgb, alpha[..., None]], axis=-1)

    def coverage(self, ys: np.ndarray, xs: np.ndarray, t: int, sprite: np.ndarray | None = None):
        """Sprite lookup at image-space points; returns (covered mask, rgb)."""
        sprite = self.sprite() if sprite is None else sprite
        x0, y0, w, h = self.rect(t)
        u = (xs - x0) / w
        v = (ys - y0) / h
        inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
        ci = np.clip((u * SPRITE_RES).astype(np.int64), 0, SPRITE_RES - 1)
        ri = np.clip((v * SPRITE_RES).astype(np.int64), 0, SPRITE_RES - 1)
        patch = sprite[ri, ci]
        covered = inside & (patch[..., 3] > 0.5)
        return covered, patch[..., :3]


@dataclass
class SceneSpec:
    seed: int
    num_frames: int
    image_h: int
    image_w: int
    horizon_y: float
    lanes: list
    occluders: list
    sky: list = field(default_factory=lambda: [0.62, 0.72, 0.85])
    road: float = 0.42
    noise: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["lanes"] = [LaneTrack(**ln) for ln in d["lanes"]]
        d["occluders"] = [OccluderTrack(**oc) for oc in d["occluders"]]
        return cls(**d)


@dataclass
class GroundTruth:
    P: np.ndarray          # (H, W) binary
    C: np.ndarray          # (M, H, W)
    S: np.ndarray          # (H, W) binary
    lanes: list            # [(track_id, LaneCurve)]
    owner: np.ndarray | None = None   # (H, W) index into `lanes` on lane pixels, -1 elsewhere


# ---- sampling ------------------------------------------------------------------
OCCLUSION_LEVELS = {
    # count range, width fraction range, height/width ratio range, speed range (px/frame)
    "none": ((0, 0), (0.0, 0.0), (1.0, 1.0), (0.0, 0.0)),
    "light": ((0, 1), (0.10, 0.18), (0.6, 0.9), (1.0, 3.0)),
    "moderate": ((0, 2), (0.10, 0.30), (0.6, 1.2), (1.0, 6.0)),
    "heavy": ((1, 3), (0.20, 0.40), (0.9, 1.4), (5.0, 10.0)),
}


def sample_occluder(rng: np.random.Generator, image_h: int, image_w: int, horizon_y: float,
                    num_frames: int, level: str = "heavy") -> OccluderTrack:
    _, wfrac, aspect, speed = OCCLUSION_LEVELS[level]
    w = rng.uniform(*wfrac) * image_w
    h = min(w * rng.uniform(*aspect), 0.9 * (image_h - horizon_y))
    bottom = rng.uniform(horizon_y + 0.55 * (image_h - horizon_y), image_h + 0.15 * h)
    direction = rng.choice([-1.0, 1.0])
    vx = direction * rng.uniform(*speed)
    travel = vx * (num_frames - 1)
    # start so that the sprite crosses the central part of the road during the clip
    center_end = rng.uniform(0.25, 0.75) * image_w
    x0 = center_end - travel - w / 2 + rng.uniform(-0.3, 0.3) * abs(travel)
    grow = rng.uniform(-0.3, 0.6)
    hue = rng.uniform(0.05, 0.75, size=3)
    hue[rng.integers(3)] *= 0.4
    return OccluderTrack(
        pos0=[float(x0), float(bottom - h)],
        velocity=[float(vx), float(rng.uniform(-0.4, 0.4))],
        size0=[float(w), float(h)],
        size_rate=[float(grow), float(grow * h / w)],
        color=[float(c) for c in hue],
        sprite_seed=int(rng.integers(2**31)),
    )


def sample_scene(seed: int, cfg: ModelConfig, num_frames: int, occlusion: str = "light") -> SceneSpec:
    rng = np.random.default_rng(seed)
    W0, H0 = cfg.image_w, cfg.image_h
    horizon = float(cfg.sample_rows[0])
    n_lanes = int(rng.integers(2, 5))
    spacing = rng.uniform(0.30, 0.42) * W0
    center = W0 / 2 + rng.uniform(-0.5, 0.5) * spacing
    vx = W0 / 2 + rng.uniform(-0.12, 0.12) * W0
    kappa = rng.uniform(-0.10, 0.10) * W0
    d_center = rng.uniform(-1.2, 1.2)
    d_vx = rng.uniform(-0.4, 0.4)
    d_kappa = rng.uniform(-0.3, 0.3)
    lanes = []
    for k in range(n_lanes):
        bx = center + (k - (n_lanes - 1) / 2) * spacing
        coeffs = [vx + kappa, bx - vx - 2 * kappa, kappa]
        drift = [d_vx + d_kappa, d_center - d_vx - 2 * d_kappa, d_kappa]
        lanes.append(LaneTrack(
            track_id=k,
            coeffs=[float(c) for c in coeffs],
            drift=[float(c) for c in drift],
            dashed=bool(rng.random() < 0.5),
            color=[0.95, 0.95, 0.95] if rng.random() < 0.8 else [0.95, 0.85, 0.35],
            dash_phase=float(rng.random()),
            dash_speed=float(rng.uniform(0.08, 0.2)),
        ))
    (lo, hi), *_ = OCCLUSION_LEVELS[occlusion]
    n_occ = int(rng.integers(lo, hi + 1))
    occluders = [sample_occluder(rng, H0, W0, horizon, num_frames, occlusion) for _ in range(n_occ)]
    return SceneSpec(
        seed=int(seed), num_frames=int(num_frames), image_h=H0, image_w=W0, horizon_y=horizon,
        lanes=lanes, occluders=occluders,
        sky=[float(c) for c in rng.uniform([0.5, 0.6, 0.75], [0.7, 0.8, 0.95])],
        road=float(rng.uniform(0.3, 0.5)),
    )


# ---- lane geometry ---------------------------------------------------------------
def depth_of_rows(ys: np.ndarray, horizon_y: float, image_h: int) -> np.ndarray:
    return (ys - horizon_y) / (image_h - 1 - horizon_y)


def lane_curves(spec: SceneSpec, cfg: ModelConfig, t: int) -> list[tuple[int, LaneCurve]]:
    """GT lane curves (track id, curve) visible at frame t; lanes never inside the image are dropped."""
    rows = cfg.sample_rows
    d = depth_of_rows(rows, spec.horizon_y, spec.image_h)
    out = []
    for lane in spec.lanes:
        a = lane.coeffs_at(t)
        xs = a[0] + a[1] * d + a[2] * d * d
        inside = (xs >= 0) & (xs <= spec.image_w - 1)
        if inside.sum() < 2:
            log.warning("lane track %d leaves the image at frame %d; dropped", lane.track_id, t)
            continue
        idx = np.flatnonzero(inside)
        # longest contiguous visible run
        breaks = np.flatnonzero(np.diff(idx) > 1)
        starts = np.concatenate([[0], breaks + 1])
        ends = np.concatenate([breaks, [len(idx) - 1]])
        best = int(np.argmax(ends - starts))
        lo, hi = int(idx[starts[best]]), int(idx[ends[best]])
        if hi - lo < 1:
            continue
        valid = np.zeros(len(xs), dtype=bool)
        valid[lo:hi + 1] = True
        out.append((lane.track_id, LaneCurve(extrapolate_partial(xs, valid), (lo, hi))))
    return out


# ---- rendering ---------------------------------------------------------------------
def render_gt_maps(lanes: list, occluder_masks: list, basis: EigenlaneBasis, cfg: ModelConfig) -> GroundTruth:
    """P, C from lane stripes (nearest lane wins overlaps, ties to the lower index); S as footprint union."""
    P = np.zeros((cfg.H, cfg.W))
    C = np.zeros((basis.M, cfg.H, cfg.W))
    S = np.zeros((cfg.H, cfg.W))
    owner = np.full((cfg.H, cfg.W), -1, dtype=np.int64)
    items = [ln if isinstance(ln, tuple) else (i, ln) for i, ln in enumerate(lanes)]
    if items:
        rows = cfg.sample_rows
        dist = np.stack([lane_distance_map(ln.xs, rows, cfg.H, cfg.W, cfg.image_h, cfg.image_w, ln.valid)
                         for _, ln in items])
        nearest = np.argmin(dist, axis=0)
        on = np.min(dist, axis=0) < cfg.gt_stripe_width / 2.0
        coeffs = np.stack([basis.project(ln) for _, ln in items])   # (L, M)
        P[on] = 1.0
        C[:, on] = coeffs[nearest[on]].T
        owner[on] = nearest[on]
    for m in occluder_masks:
        S = np.maximum(S, m)
    return GroundTruth(P, C, S, items, owner)


def occluder_grid_mask(track: OccluderTrack, t: int, cfg: ModelConfig, sprite=None) -> np.ndarray:
    ys = grid_rows_in_image(cfg.H, cfg.image_h)
    xs = grid_rows_in_image(cfg.W, cfg.image_w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    covered, _ = track.coverage(yy, xx, t, sprite)
    return covered.astype(np.float64)


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    H0, W0 = spec.image_h, spec.image_w
    img = np.empty((3, H0, W0))
    ys = np.arange(H0)[:, None] + np.zeros((1, W0))
    sky = ys < spec.horizon_y
    grad = 1.0 - 0.25 * ys / max(spec.horizon_y, 1.0)
    for ch in range(3):
        img[ch] = np.where(sky, spec.sky[ch] * grad, spec.road)
    # static road texture: coarse blotches plus fine grain
    coarse = rng.standard_normal((H0 // 8 + 1, W0 // 8 + 1))
    coarse = np.kron(coarse, np.ones((8, 8)))[:H0, :W0]
    tex = 0.03 * coarse + 0.02 * rng.standard_normal((H0, W0))
    img += np.where(sky, 0.0, tex)[None]
    return img


def render_frame(spec: SceneSpec, t: int, cfg: ModelConfig, background: np.ndarray,
                 rng: np.random.Generator, sprites: list) -> np.ndarray:
    H0, W0 = spec.image_h, spec.image_w
    img = background.copy()
    ys = np.arange(H0, dtype=np.float64)
    d = depth_of_rows(ys, spec.horizon_y, H0)
    below = d >= 0
    xs = np.arange(W0, dtype=np.float64)
    for lane in spec.lanes:
        a = lane.coeffs_at(t)
        lx = a[0] + a[1] * d + a[2] * d * d
        half = 0.35 + 1.5 * np.clip(d, 0, 1)
        cover = np.clip(half[:, None] + 0.5 - np.abs(xs[None, :] - lx[:, None]), 0.0, 1.0)
        cover[~below] = 0.0
        if lane.dashed:
            s = 1.0 / (np.clip(d, 0, 1) + 0.12)
            on = np.mod(s * 0.9 + lane.dash_phase + t * lane.dash_speed, 1.0) < 0.55
            cover *= on[:, None]
        for ch in range(3):
            img[ch] = img[ch] * (1 - cover) + lane.color[ch] * cover
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    for track, sprite in zip(spec.occluders, sprites):
        covered, rgb = track.coverage(yy, xx, t, sprite)
        for ch in range(3):
            img[ch] = np.where(covered, rgb[..., ch], img[ch])
    img += spec.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def all_lane_curves(specs, cfg: ModelConfig) -> list[LaneCurve]:
    return [ln for spec in specs for t in range(spec.num_frames) for _, ln in lane_curves(spec, cfg, t)]


def generate_video(spec: SceneSpec, basis: EigenlaneBasis, cfg: ModelConfig):
    """Render all frames of a scene: returns (frames (T,3,H0,W0), [GroundTruth per frame])."""
    if basis.N != cfg.N:
        raise ValueError(f"basis has N={basis.N}, config samples N={cfg.N} rows")
    rng = np.random.default_rng([spec.seed, 1])
    background = _background(spec, rng)
    sprites = [oc.sprite() for oc in spec.occluders]
    frames, gts = [], []
    for t in range(spec.num_frames):
        frames.append(render_frame(spec, t, cfg, background, rng, sprites))
        masks = [occluder_grid_mask(oc, t, cfg, sp) for oc, sp in zip(spec.occluders, sprites)]
        gts.append(render_gt_maps(lane_curves(spec, cfg, t), masks, basis, cfg))
    return np.stack(frames), gts


def overlay_occluder(frames: np.ndarray, gts: list, track: OccluderTrack, cfg: ModelConfig):
    """Composite a moving sprite over a rendered clip; only the obstacle GT changes."""
    frames = frames.copy()
    sprite = track.sprite()
    H0, W0 = frames.shape[-2:]
    yy, xx = np.meshgrid(np.arange(H0, dtype=np.float64), np.arange(W0, dtype=np.float64), indexing="ij")
    new_gts = []
    for t in range(len(frames)):
        covered, rgb = track.coverage(yy, xx, t, sprite)
        for ch in range(3):
            frames[t, ch] = np.where(covered, rgb[..., ch], frames[t, ch])
        S = np.maximum(gts[t].S, occluder_grid_mask(track, t, cfg, sprite))
        new_gts.append(GroundTruth(gts[t].P, gts[t].C, S, gts[t].lanes, gts[t].owner))
    return frames, new_gts


def image_footprint(track: OccluderTrack, t: int, image_h: int, image_w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(image_h, dtype=np.float64), np.arange(image_w, dtype=np.float64),
                         indexing="ij")
    covered, _ = track.coverage(yy, xx, t)
    return covered
