"""Model geometry and hyperparameters shared by every stage."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from omrlane.errors import ConfigError

PAPER_IMAGE_W = 640


@dataclass
class ModelConfig:
    image_h: int = 96
    image_w: int = 160
    K: int = 16
    H: int = 24
    W: int = 40
    M: int = 6
    N: int = 36
    # first lane sample row as a fraction of image height (horizon)
    horizon_frac: float = 0.375
    backbone: tuple = (8, 16, 24, 32, 32)
    coeff_scale: float = 64.0
    obstacle_threshold: float = 0.3
    nms_threshold: float = 0.5
    nms_max_lanes: int = 8
    # widths in output-grid cells unless noted
    nms_half_width: float | None = None
    gt_stripe_width: float = 4.0
    eval_stripe_width: float | None = None  # input-image pixels
    liou_extension: float | None = None     # input-image pixels
    convlstm_variant: str = "printed"
    use_obstacle: bool = True
    use_memory: bool = True

    def __post_init__(self):
        self.backbone = tuple(self.backbone)
        ratio = self.image_w / PAPER_IMAGE_W
        if self.nms_half_width is None:
            self.nms_half_width = 14.0 * self.W / 160.0
        if self.eval_stripe_width is None:
            self.eval_stripe_width = 30.0 * ratio
        if self.liou_extension is None:
            self.liou_extension = 15.0 * ratio
        self.validate()

    def validate(self) -> None:
        if self.image_h % 32 or self.image_w % 32:
            raise ConfigError(f"input size {self.image_h}x{self.image_w} must be divisible by 32")
        if self.K % 4:
            raise ConfigError(f"K={self.K} must be divisible by 4")
        if self.M > self.N:
            raise ConfigError(f"M={self.M} exceeds N={self.N}")
        if self.convlstm_variant not in ("printed", "standard"):
            raise ConfigError(f"unknown ConvLSTM variant {self.convlstm_variant!r}")
        if len(self.backbone) != 5:
            raise ConfigError("backbone needs 5 widths: stem + 4 stages")

    @property
    def sample_rows(self) -> np.ndarray:
        top = self.horizon_frac * (self.image_h - 1)
        return np.linspace(top, self.image_h - 1, self.N)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = list(self.backbone)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(image_h=384, image_w=640, K=64, H=96, W=160, M=6, N=72,
                    backbone=(32, 64, 128, 256, 512), coeff_scale=256.0)
        base.update(overrides)
        return cls(**base)
