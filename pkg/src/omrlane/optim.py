"""AdamW with decoupled weight decay and a halve-on-plateau learning-rate schedule."""
from __future__ import annotations

import logging

import numpy as np

from omrlane.autodiff import ParamStore
from omrlane.errors import GraphError

logger = logging.getLogger(__name__)


class AdamW:
    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.skipped = 0

    def step(self) -> bool:
        """Apply one update from the gradients in the store; returns False if skipped."""
        live = []
        for name, p in self.params.items():
            if name in self.params.frozen:
                if p.grad is not None and np.any(p.grad):
                    raise GraphError(f"frozen parameter {name!r} carries a gradient")
                continue
            if p.grad is not None:
                live.append((name, p))
        if any(not np.all(np.isfinite(p.grad)) for _, p in live):
            self.skipped += 1
            logger.warning("non-finite gradient; optimizer step skipped (%d so far)", self.skipped)
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in live:
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            decayed = p.data * (1.0 - self.lr * self.weight_decay) if self.weight_decay else p.data
            self.params.assign(name, decayed - update)
        return True

    def state_dict(self) -> dict:
        return {"lr": self.lr, "t": self.t, "skipped": self.skipped,
                "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.t = int(state["t"])
        self.skipped = int(state.get("skipped", 0))
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


class PlateauHalver:
    """Halve the optimizer's learning rate after `patience` epochs without improvement."""

    def __init__(self, optimizer: AdamW, patience: int = 2, min_delta: float = 1e-4, max_halvings: int = 4):
        self.optimizer = optimizer
        self.patience = patience
        self.min_delta = min_delta
        self.max_halvings = max_halvings
        self.best = np.inf
        self.bad_epochs = 0
        self.halvings = 0

    def observe(self, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience and self.halvings < self.max_halvings:
            self.optimizer.lr *= 0.5
            self.halvings += 1
            self.bad_epochs = 0
            return True
        return False

    def state_dict(self) -> dict:
        return {"best": float(self.best), "bad_epochs": self.bad_epochs, "halvings": self.halvings}

    def load_state_dict(self, state: dict) -> None:
        self.best = float(state["best"])
        self.bad_epochs = int(state["bad_epochs"])
        self.halvings = int(state["halvings"])
