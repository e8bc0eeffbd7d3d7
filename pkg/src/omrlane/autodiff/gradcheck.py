"""Central finite-difference gradient checks for scalar functions of Tensors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from omrlane.autodiff.tensor import Tensor, record_branches


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.checked > 0


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def relative_error(analytic: float, numeric: float, scale: float) -> float:
    """|a - n| / max(|a|, |n|, floor), with the floor tied to the tensor's gradient scale."""
    denom = max(abs(analytic), abs(numeric), 1e-3 * scale, 1e-10)
    return abs(analytic - numeric) / denom


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare autodiff gradients of `fn()` w.r.t. `inputs` against central differences.

    Coordinates whose +/- step evaluations take a different branch of a piecewise
    op (relu, abs, clip, bilinear cell) than the base point are not smooth there
    and are counted in `skipped_kinks` instead of being compared.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with record_branches() as base_log:
        loss = fn()
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]

    worst, checked, skipped = 0.0, 0, 0
    where: dict = {}
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        scale = float(np.abs(analytic[k]).max())
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with record_branches() as log_p:
                f_p = fn().item()
            flat[i] = orig - step
            with record_branches() as log_m:
                f_m = fn().item()
            flat[i] = orig
            if not (_same_branches(base_log, log_p) and _same_branches(base_log, log_m)):
                skipped += 1
                continue
            numeric = (f_p - f_m) / (2 * step)
            a = float(analytic[k].reshape(-1)[i])
            err = relative_error(a, numeric, scale)
            checked += 1
            if err > worst:
                worst = err
                where = {"input": k, "index": int(i), "analytic": a, "numeric": numeric}
    return GradCheckResult(worst, checked, skipped, where)
