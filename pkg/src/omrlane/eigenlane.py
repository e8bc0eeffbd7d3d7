"""Eigenlane basis: lanes as coefficient vectors over the top singular vectors of the lane matrix."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from omrlane.autodiff.serialize import tensor_from_bytes, tensor_to_bytes
from omrlane.errors import ConfigError, DimensionError

SIGN_CONVENTION = "max-abs-positive"


@dataclass
class LaneCurve:
    """Horizontal coordinates (input-image pixels) at N fixed, uniformly spaced sample rows.

    `valid` is the inclusive (first, last) sample index where the lane is
    actually visible in the image; `xs` outside that range hold extrapolated
    values.
    """

    xs: np.ndarray
    valid: tuple[int, int] | None = None

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        if self.valid is None:
            self.valid = (0, len(self.xs) - 1)
        if not np.all(np.isfinite(self.xs)):
            raise ValueError("lane coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xs)

    def valid_mask(self) -> np.ndarray:
        m = np.zeros(len(self.xs), dtype=bool)
        m[self.valid[0]:self.valid[1] + 1] = True
        return m


def extrapolate_partial(xs: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill rows outside the visible span by extending the end segments linearly."""
    xs = np.asarray(xs, dtype=np.float64).copy()
    idx = np.flatnonzero(valid)
    if len(idx) < 2:
        raise ValueError("need at least two visible rows to extrapolate")
    lo, hi = idx[0], idx[-1]
    rows = np.arange(len(xs))
    head = np.polyfit(idx[:2], xs[idx[:2]], 1)
    tail = np.polyfit(idx[-2:], xs[idx[-2:]], 1)
    xs[:lo] = np.polyval(head, rows[:lo])
    xs[hi + 1:] = np.polyval(tail, rows[hi + 1:])
    inner = (rows >= lo) & (rows <= hi) & ~valid
    if inner.any():
        xs[inner] = np.interp(rows[inner], idx, xs[idx])
    return xs


@dataclass
class EigenlaneBasis:
    U: np.ndarray  # (N, M), orthonormal columns

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.mean = np.zeros(self.U.shape[0])

    @property
    def N(self) -> int:
        return self.U.shape[0]

    @property
    def M(self) -> int:
        return self.U.shape[1]

    def project(self, lane) -> np.ndarray:
        xs = lane.xs if isinstance(lane, LaneCurve) else np.asarray(lane, dtype=np.float64)
        if xs.shape[-1] != self.N:
            raise DimensionError("project", f"lane of length {self.N}", xs.shape)
        return xs @ self.U

    def reconstruct(self, coeff) -> np.ndarray:
        coeff = np.asarray(coeff, dtype=np.float64)
        if coeff.shape[-1] != self.M:
            raise DimensionError("reconstruct", f"coefficients of length {self.M}", coeff.shape)
        return coeff @ self.U.T

    def truncate(self, m: int) -> "EigenlaneBasis":
        return EigenlaneBasis(self.U[:, :m])

    # ---- file format: JSON header line + tensor blob ----------------------
    def to_bytes(self) -> bytes:
        header = json.dumps({"N": self.N, "M": self.M, "sign": SIGN_CONVENTION}, sort_keys=True)
        return header.encode() + b"\n" + tensor_to_bytes(self.U)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load_bytes(cls, raw: bytes) -> "EigenlaneBasis":
        head, blob = raw.split(b"\n", 1)
        meta = json.loads(head)
        U = tensor_from_bytes(blob)
        if U.shape != (meta["N"], meta["M"]) or meta.get("sign") != SIGN_CONVENTION:
            raise ValueError("basis header does not match payload")
        return cls(U)

    @classmethod
    def load(cls, path) -> "EigenlaneBasis":
        return cls.load_bytes(Path(path).read_bytes())


def lane_matrix(lanes: Sequence) -> np.ndarray:
    cols = [ln.xs if isinstance(ln, LaneCurve) else np.asarray(ln, dtype=np.float64) for ln in lanes]
    lengths = {len(c) for c in cols}
    if len(lengths) != 1:
        raise DimensionError("fit_basis", "lanes of one common length", sorted(lengths))
    return np.stack(cols, axis=1)


def fit_basis(lanes: Sequence, M: int) -> EigenlaneBasis:
    """First M left singular vectors of the N x L lane matrix (no centering)."""
    if not lanes:
        raise ConfigError("fit_basis needs at least one lane")
    A = lane_matrix(lanes)
    n_rows, n_lanes = A.shape
    if M < 1 or M > n_rows or M > n_lanes:
        raise ConfigError(f"M={M} must lie in [1, min(N={n_rows}, lanes={n_lanes})]")
    U, _, _ = np.linalg.svd(A, full_matrices=False)
    U = U[:, :M].copy()
    for j in range(M):
        if U[np.argmax(np.abs(U[:, j])), j] < 0:
            U[:, j] = -U[:, j]
    return EigenlaneBasis(U)


def reconstruction_rmse(lanes: Sequence, basis: EigenlaneBasis) -> float:
    A = lane_matrix(lanes)
    R = basis.U @ (basis.U.T @ A)
    return float(np.sqrt(np.mean((A - R) ** 2)))
