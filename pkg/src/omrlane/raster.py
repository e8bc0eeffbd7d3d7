"""Rasterize lane curves as fixed-width horizontal stripes on a pixel grid."""
from __future__ import annotations

import numpy as np


def grid_rows_in_image(grid_h: int, image_h: int) -> np.ndarray:
    """Image-space y of each grid row center."""
    return (np.arange(grid_h) + 0.5) * (image_h / grid_h) - 0.5


def image_x_to_grid(x: np.ndarray, grid_w: int, image_w: int) -> np.ndarray:
    return (np.asarray(x) + 0.5) * (grid_w / image_w) - 0.5


def lane_x_at_grid_rows(xs: np.ndarray, sample_rows: np.ndarray, grid_h: int, image_h: int,
                        valid: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated lane x (image pixels) per grid row, and which grid rows the lane spans."""
    lo, hi = valid if valid is not None else (0, len(xs) - 1)
    ys = grid_rows_in_image(grid_h, image_h)
    span = (ys >= sample_rows[lo]) & (ys <= sample_rows[hi])
    x = np.interp(ys, sample_rows[lo:hi + 1], xs[lo:hi + 1])
    return x, span


def stripe_mask(xs: np.ndarray, sample_rows: np.ndarray, grid_h: int, grid_w: int,
                image_h: int, image_w: int, width: float,
                valid: tuple[int, int] | None = None) -> np.ndarray:
    """Boolean (grid_h, grid_w) mask of cells within width/2 (grid units) of the lane."""
    x_img, span = lane_x_at_grid_rows(xs, sample_rows, grid_h, image_h, valid)
    xg = image_x_to_grid(x_img, grid_w, image_w)
    cols = np.arange(grid_w)
    mask = np.abs(cols[None, :] - xg[:, None]) < width / 2.0
    mask &= span[:, None]
    return mask


def lane_distance_map(xs: np.ndarray, sample_rows: np.ndarray, grid_h: int, grid_w: int,
                      image_h: int, image_w: int, valid: tuple[int, int] | None = None) -> np.ndarray:
    """Horizontal grid distance from each cell to the lane; inf on rows the lane does not span."""
    x_img, span = lane_x_at_grid_rows(xs, sample_rows, grid_h, image_h, valid)
    xg = image_x_to_grid(x_img, grid_w, image_w)
    dist = np.abs(np.arange(grid_w)[None, :] - xg[:, None])
    dist[~span] = np.inf
    return dist
