"""Intra-frame network: encoder, lane probability/coefficient decoder, latent obstacle head."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from omrlane.autodiff import (
    ParamStore,
    Tensor,
    batchnorm_relu,
    bilinear_resize,
    concat_channels,
    conv2d,
    deform_conv,
    sigmoid,
)
from omrlane.config import ModelConfig
from omrlane.errors import ConfigError, DimensionError

PRIOR_PROB = 0.1


def _he(rng, shape, gain=2.0):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


def add_conv_bn(store: ParamStore, name: str, c_in: int, c_out: int, k: int, rng) -> None:
    store.add(f"{name}.w", _he(rng, (c_out, c_in, k, k)))
    store.add(f"{name}.gamma", np.ones(c_out))
    store.add(f"{name}.beta", np.zeros(c_out))
    store.add_stats(f"{name}.bn", c_out)


def add_conv(store: ParamStore, name: str, c_in: int, c_out: int, k: int, rng,
             std: float | None = None, bias: float | np.ndarray = 0.0) -> None:
    w = _he(rng, (c_out, c_in, k, k), gain=1.0) if std is None else rng.normal(0.0, std, (c_out, c_in, k, k))
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.broadcast_to(np.asarray(bias, dtype=np.float64), (c_out,)).copy())


def init_network_params(cfg: ModelConfig, rng: np.random.Generator, store: ParamStore | None = None) -> ParamStore:
    store = store or ParamStore()
    K = cfg.K
    c0, c1, c2, c3, c4 = cfg.backbone
    add_conv_bn(store, "enc.stem", 3, c0, 3, rng)
    for i, (ci, co) in enumerate(((c0, c1), (c1, c2), (c2, c3), (c3, c4)), start=1):
        add_conv_bn(store, f"enc.s{i}a", ci, co, 3, rng)
        add_conv_bn(store, f"enc.s{i}b", co, co, 3, rng)
    add_conv(store, "enc.p8", c2, K, 1, rng)
    add_conv(store, "enc.p16", c3, K, 1, rng)
    add_conv(store, "enc.p32", c4, K, 1, rng)
    add_conv_bn(store, "enc.fuse", 3 * K, K, 3, rng)
    add_conv_bn(store, "enc.out", K, K, 3, rng)

    prior = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)
    for head in ("dec.prob", "obs"):
        add_conv_bn(store, f"{head}.c1", K, K, 3, rng)
        add_conv_bn(store, f"{head}.c2", K, K, 3, rng)
        add_conv(store, f"{head}.proj", K, 1, 1, rng, std=0.01, bias=prior)

    add_conv_bn(store, "dec.off.c1", K, K, 3, rng)
    add_conv(store, "dec.off.proj", K, 50, 1, rng, std=0.0)
    add_conv_bn(store, "dec.mod.c1", K, K, 3, rng)
    add_conv(store, "dec.mod.proj", K, 25, 1, rng, std=0.0)
    add_conv_bn(store, "dec.feat.c1", K, K, 3, rng)
    add_conv_bn(store, "dec.feat.c2", K, K, 3, rng)
    store.add("dec.dcn.w", _he(rng, (cfg.M, K, 5, 5), gain=1.0))
    store.add("dec.dcn.b", np.zeros(cfg.M))
    return store


@lru_cache(maxsize=16)
def _positional_bias(H: int, W: int, K: int) -> np.ndarray:
    half = K // 2
    quarter = K // 4
    freqs = 10000.0 ** (-2.0 * np.arange(quarter) / half)
    B = np.empty((K, H, W))
    rows = np.arange(H, dtype=np.float64)
    cols = np.arange(W, dtype=np.float64)
    for i, f in enumerate(freqs):
        B[2 * i] = np.sin(rows * f)[:, None]
        B[2 * i + 1] = np.cos(rows * f)[:, None]
        B[half + 2 * i] = np.sin(cols * f)[None, :]
        B[half + 2 * i + 1] = np.cos(cols * f)[None, :]
    B.setflags(write=False)
    return B


def positional_bias(H: int, W: int, K: int) -> np.ndarray:
    """Sinusoidal (K,H,W) bias: first K/2 channels encode the row, last K/2 the column."""
    if K % 4:
        raise ConfigError(f"K={K} must be divisible by 4")
    return _positional_bias(H, W, K)


@dataclass
class DecodedMaps:
    P: Tensor
    C: Tensor
    B: np.ndarray
    E1: Tensor
    E2: Tensor


@dataclass
class ObstacleOutput:
    S: Tensor
    O: np.ndarray


def threshold_obstacles(S: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    return (S > threshold).astype(np.float64)


class LaneNet:
    """Holds the config and parameter store; `training` selects batch-norm statistics."""

    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params
        self.training = False

    def _cbr(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        p = self.params
        k = p[f"{name}.w"].shape[-1]
        y = conv2d(x, p[f"{name}.w"], None, stride=stride, pad=k // 2)
        return batchnorm_relu(y, p[f"{name}.gamma"], p[f"{name}.beta"], p.stats(f"{name}.bn"), self.training)

    def _conv(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        k = p[f"{name}.w"].shape[-1]
        return conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=1, pad=k // 2)

    # ---- encoder ------------------------------------------------------------
    def encode(self, image) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(image)
        cfg = self.cfg
        h0, w0 = image.shape[-2:]
        if h0 % 32 or w0 % 32:
            raise ConfigError(f"image size {h0}x{w0} is not divisible by 32")
        if image.shape[-3] != 3:
            raise DimensionError("encode", "3-channel image", image.shape)
        x = self._cbr("enc.stem", image, stride=2)
        feats = []
        for i in range(1, 5):
            x = self._cbr(f"enc.s{i}a", x, stride=2)
            x = self._cbr(f"enc.s{i}b", x)
            feats.append(x)
        _, f8, f16, f32 = feats
        h8, w8 = f8.shape[-2:]
        p8 = self._conv("enc.p8", f8)
        p16 = bilinear_resize(self._conv("enc.p16", f16), h8, w8)
        p32 = bilinear_resize(self._conv("enc.p32", f32), h8, w8)
        fused = self._cbr("enc.fuse", concat_channels([p8, p16, p32]))
        up = bilinear_resize(fused, cfg.H, cfg.W)
        return self._cbr("enc.out", up)

    # ---- decoder ------------------------------------------------------------
    def _head(self, prefix: str, F: Tensor) -> Tensor:
        x = self._cbr(f"{prefix}.c1", F)
        x = self._cbr(f"{prefix}.c2", x)
        return sigmoid(self._conv(f"{prefix}.proj", x))

    def decode_prob(self, F: Tensor) -> Tensor:
        return self._head("dec.prob", F)

    def decode_coeff(self, F: Tensor, force_offsets=None, force_modulation=None,
                     return_parts: bool = False):
        cfg = self.cfg
        B = positional_bias(F.shape[-2], F.shape[-1], F.shape[-3])
        G = F + B
        E1 = self._conv("dec.off.proj", self._cbr("dec.off.c1", G))
        E2 = sigmoid(self._conv("dec.mod.proj", self._cbr("dec.mod.c1", G)))
        T = self._cbr("dec.feat.c2", self._cbr("dec.feat.c1", G))
        if force_offsets is not None:
            E1 = Tensor(np.broadcast_to(force_offsets, E1.shape))
        if force_modulation is not None:
            E2 = Tensor(np.broadcast_to(force_modulation, E2.shape))
        bias = self.params["dec.dcn.b"].reshape(-1, 1, 1)
        C = (deform_conv(T, E1, E2, self.params["dec.dcn.w"]) + bias) * cfg.coeff_scale
        if return_parts:
            return C, {"B": B, "E1": E1, "E2": E2, "T": T}
        return C

    def decode(self, F: Tensor) -> DecodedMaps:
        C, parts = self.decode_coeff(F, return_parts=True)
        return DecodedMaps(self.decode_prob(F), C, parts["B"], parts["E1"], parts["E2"])

    # ---- latent obstacles -----------------------------------------------------
    def obstacle_prob(self, F: Tensor) -> Tensor:
        return self._head("obs", F)

    def detect_obstacles(self, F: Tensor) -> ObstacleOutput:
        S = self.obstacle_prob(F)
        return ObstacleOutput(S, threshold_obstacles(S.data, self.cfg.obstacle_threshold))
