"""Occlusion-aware memory-based refinement and the recursive per-video pipeline."""
from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from omrlane.autodiff import ParamStore, Tensor, concat_channels, conv2d, no_grad, relu, sigmoid, tanh
from omrlane.autodiff.serialize import tensor_from_stream, tensor_to_bytes
from omrlane.eigenlane import EigenlaneBasis
from omrlane.errors import DimensionError, InputError
from omrlane.network import LaneNet, ObstacleOutput, add_conv
from omrlane.nms import LaneMask, nms_decode

GATES = ("f", "i", "g", "o")
STAGES = ("Encoding", "LOD", "OMR", "Decoding")


class _StageClock:
    """Accumulates wall time per pipeline stage into `sink` (no-op when sink is None)."""

    def __init__(self, sink: dict | None):
        self.sink = sink
        self.last = time.perf_counter()

    def lap(self, stage: str) -> None:
        if self.sink is None:
            return
        now = time.perf_counter()
        self.sink[stage] = self.sink.get(stage, 0.0) + now - self.last
        self.last = now


def init_omr_params(cfg, rng: np.random.Generator, store: ParamStore) -> ParamStore:
    K, H, W = cfg.K, cfg.H, cfg.W
    lift = K // 4
    add_conv(store, "omr.w2", 1, lift, 3, rng)
    if cfg.use_obstacle:
        add_conv(store, "omr.w3", 1, lift, 3, rng)
    c_in = 2 * K + lift * (2 if cfg.use_obstacle else 1)
    add_conv(store, "omr.w4a", c_in, K, 3, rng)
    add_conv(store, "omr.w4b", K, K, 3, rng)
    if cfg.use_memory:
        # (Z-side, h-side) conv pairs for f, i, g, o; biases live on the Z side
        for gate, (wz, wh) in zip(GATES, ((5, 6), (7, 8), (9, 10), (11, 12))):
            std = 0.0 if gate == "o" else 0.5 / np.sqrt(9 * K)
            store.add(f"omr.w{wz}.w", rng.normal(0.0, std, (K, K, 3, 3)))
            store.add(f"omr.w{wz}.b", np.zeros(K))
            store.add(f"omr.w{wh}.w", rng.normal(0.0, std, (K, K, 3, 3)))
        store.add("omr.h_init", np.zeros((K, H, W)))
        store.add("omr.c_init", np.zeros((K, H, W)))
    return store


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor

    def detach(self) -> "RecurrentState":
        return RecurrentState(self.h.detach(), self.c.detach())


@dataclass
class FrameState:
    """What one frame hands to the next: previous lane mask, refined features, ConvLSTM state."""
    L: np.ndarray          # (N,1,H,W)
    F: Tensor              # (N,K,H,W)
    lstm: RecurrentState | None
    t: int = 0

    def detach(self) -> "FrameState":
        return FrameState(self.L, self.F.detach(), self.lstm.detach() if self.lstm else None, self.t)


@dataclass
class FrameOutput:
    F: Tensor
    lanes: list            # LaneMask per batch item
    state: FrameState
    P: Tensor | None = None
    C: Tensor | None = None
    maps: dict = field(default_factory=dict)


class OMR:
    """Refinement module on top of a LaneNet; shares its parameter store."""

    def __init__(self, net: LaneNet, basis: EigenlaneBasis):
        self.net = net
        self.cfg = net.cfg
        self.params = net.params
        self.basis = basis

    # ---- the three equations -------------------------------------------------
    def _conv(self, name, x, bias=True):
        p = self.params
        return conv2d(x, p[f"{name}.w"], p[f"{name}.b"] if bias else None, stride=1, pad=1)

    def aggregate(self, L_prev, F_prev: Tensor, O, F_tilde: Tensor) -> Tensor:
        L_prev = L_prev if isinstance(L_prev, Tensor) else Tensor(L_prev)
        grid = F_tilde.shape[-2:]
        for name, t in (("L_prev", L_prev), ("F_prev", F_prev), ("F_tilde", F_tilde)):
            if t.shape[-2:] != grid:
                raise DimensionError("aggregate", f"{name} on grid {grid}", t.shape)
        parts = [self._conv("omr.w2", L_prev), F_prev]
        if self.cfg.use_obstacle:
            O = O if isinstance(O, Tensor) else Tensor(O)
            if O.shape[-2:] != grid:
                raise DimensionError("aggregate", f"O on grid {grid}", O.shape)
            parts.append(self._conv("omr.w3", O))
        parts.append(F_tilde)
        x = self._conv("omr.w4a", concat_channels(parts))
        return self._conv("omr.w4b", relu(x))

    def _gate_pre(self, gate: str, Z: Tensor, h: Tensor) -> Tensor:
        wz, wh = {"f": (5, 6), "i": (7, 8), "g": (9, 10), "o": (11, 12)}[gate]
        return self._conv(f"omr.w{wz}", Z) + self._conv(f"omr.w{wh}", h, bias=False)

    def convlstm_step(self, Z: Tensor, state: RecurrentState, return_gates: bool = False):
        if Z.shape != state.h.shape or state.h.shape != state.c.shape:
            raise DimensionError("convlstm_step", Z.shape, (state.h.shape, state.c.shape))
        pre = {g: self._gate_pre(g, Z, state.h) for g in GATES}
        if self.cfg.convlstm_variant == "printed":
            f, i, g = sigmoid(pre["f"]), sigmoid(pre["i"]), sigmoid(pre["g"])
            o = tanh(pre["o"])
            c = f * state.c + i * g
            h = o * c
        else:
            f, i, o = sigmoid(pre["f"]), sigmoid(pre["i"]), sigmoid(pre["o"])
            g = tanh(pre["g"])
            c = f * state.c + i * g
            h = o * tanh(c)
        new = RecurrentState(h, c)
        if return_gates:
            return new, {"f": f, "i": i, "g": g, "o": o}
        return new

    @staticmethod
    def refine(F_tilde: Tensor, h: Tensor) -> Tensor:
        if F_tilde.shape != h.shape:
            raise DimensionError("refine", F_tilde.shape, h.shape)
        return F_tilde + h

    # ---- recursion -----------------------------------------------------------------
    def initial_state(self, batch: int) -> FrameState:
        cfg = self.cfg
        L = np.zeros((batch, 1, cfg.H, cfg.W))
        F = Tensor(np.zeros((batch, cfg.K, cfg.H, cfg.W)))
        lstm = None
        if cfg.use_memory:
            ones = Tensor(np.ones((batch, 1, 1, 1)))
            lstm = RecurrentState(ones * self.params["omr.h_init"], ones * self.params["omr.c_init"])
        return FrameState(L, F, lstm, 0)

    def intra(self, images) -> tuple[Tensor, ObstacleOutput]:
        """Encoder + obstacle head on a batch of frames (no refinement)."""
        F_tilde = self.net.encode(images)
        return F_tilde, self.net.detect_obstacles(F_tilde)

    def refine_step(self, F_tilde: Tensor, O: np.ndarray, state: FrameState) -> tuple[Tensor, RecurrentState | None]:
        Z = self.aggregate(state.L, state.F, O, F_tilde)
        if self.cfg.use_memory:
            lstm = self.convlstm_step(Z, state.lstm)
            return self.refine(F_tilde, lstm.h), lstm
        return self.refine(F_tilde, Z), None

    def step(self, images, state: FrameState | None = None, keep_maps: bool = False,
             F_tilde: Tensor | None = None, O: np.ndarray | None = None,
             timings: dict | None = None) -> FrameOutput:
        """One frame of the recursion for a batch of independent clips.

        `timings`, when given, accumulates seconds spent in each of STAGES.
        """
        clock = _StageClock(timings)
        if F_tilde is None:
            images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
            if images.ndim == 3:
                images = images[None]
            F_tilde = self.net.encode(images)
            clock.lap("Encoding")
            O = self.net.detect_obstacles(F_tilde).O
            clock.lap("LOD")
        elif O is None:
            O = self.net.detect_obstacles(F_tilde).O
            clock.lap("LOD")
        batch = F_tilde.shape[0]
        if state is None:
            state = self.initial_state(batch)
        F, lstm = self.refine_step(F_tilde, O, state)
        clock.lap("OMR")
        P = self.net.decode_prob(F)
        C = self.net.decode_coeff(F)
        lanes = [nms_decode(P.data[b, 0], C.data[b], self.basis, self.cfg) for b in range(batch)]
        clock.lap("Decoding")
        L = np.stack([lm.L for lm in lanes])[:, None]
        new_state = FrameState(L, F, lstm, state.t + 1)
        maps = {}
        if keep_maps:
            with no_grad():
                maps = {"O_tilde": O, "F_tilde": F_tilde.data, "F": F.data,
                        "P_tilde": self.net.decode_prob(F_tilde).data, "P": P.data}
        return FrameOutput(F, lanes, new_state, P, C, maps)

    def process_video(self, frames, keep_maps: bool = False, timings: list | None = None) -> list[FrameOutput]:
        """Run the recursion over one clip; `timings` receives one stage dict per frame."""
        frames = _check_frames(frames)
        outputs, state = [], None
        with no_grad():
            for frame in frames:
                stages = None
                if timings is not None:
                    stages = {}
                    timings.append(stages)
                out = self.step(frame[None], state, keep_maps=keep_maps, timings=stages)
                state = out.state
                outputs.append(out)
        return outputs


def _check_frames(frames) -> list:
    if len(frames) == 0:
        raise InputError("video has no frames")
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    shape = frames[0].shape
    for t, f in enumerate(frames):
        if f.shape != shape:
            raise InputError(f"frame {t} has shape {f.shape}, expected {shape}")
    return frames


def intra_frame_lanes(net: LaneNet, basis: EigenlaneBasis, image) -> LaneMask:
    """The image-only pipeline: encode, decode, NMS."""
    with no_grad():
        img = np.asarray(image, dtype=np.float64)
        F = net.encode(img[None] if img.ndim == 3 else img)
        P = net.decode_prob(F)
        C = net.decode_coeff(F)
    return nms_decode(P.data[0, 0], C.data[0], basis, net.cfg)


# ---- streaming ---------------------------------------------------------------------
class VideoStream:
    """Push frames one at a time; the carried state can be exported as opaque bytes."""

    def __init__(self, omr: OMR, token: bytes | None = None):
        self.omr = omr
        self.state = None if token is None else decode_state(token, omr.cfg)
        self.frame_shape = None

    def push(self, frame) -> FrameOutput:
        frame = np.asarray(frame, dtype=np.float64)
        if self.frame_shape is None:
            self.frame_shape = frame.shape
        elif frame.shape != self.frame_shape:
            raise InputError(f"frame shape {frame.shape} differs from stream shape {self.frame_shape}")
        with no_grad():
            out = self.omr.step(frame[None], self.state)
        self.state = out.state
        return out

    def token(self) -> bytes:
        if self.state is None:
            raise InputError("no frame pushed yet")
        return encode_state(self.state)


def encode_state(state: FrameState) -> bytes:
    arrays = [state.L, state.F.data]
    if state.lstm is not None:
        arrays += [state.lstm.h.data, state.lstm.c.data]
    head = json.dumps({"t": state.t, "lstm": state.lstm is not None}).encode()
    return struct.pack("<q", len(head)) + head + b"".join(tensor_to_bytes(a) for a in arrays)


def decode_state(token: bytes, cfg=None) -> FrameState:
    buf = io.BytesIO(token)
    (n,) = struct.unpack("<q", buf.read(8))
    meta = json.loads(buf.read(n))
    L = tensor_from_stream(buf)
    F = Tensor(tensor_from_stream(buf))
    lstm = None
    if meta["lstm"]:
        lstm = RecurrentState(Tensor(tensor_from_stream(buf)), Tensor(tensor_from_stream(buf)))
    if cfg is not None and F.shape[1:] != (cfg.K, cfg.H, cfg.W):
        raise InputError(f"state token shape {F.shape} does not match model config")
    return FrameState(L, F, lstm, meta["t"])
