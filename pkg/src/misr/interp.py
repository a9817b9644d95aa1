"""Interpolation-based upsampling and multi-frame fusion baselines."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .grid import ImageGrid

__all__ = ["bilinear_upsample", "interp_fuse"]


def _axis_weights(n_hr, n_lr, scale, offset):
    # LR sample u sits at HR coordinate u * scale + offset
    t = np.clip((np.arange(n_hr) - offset) / scale, 0.0, n_lr - 1)
    i0 = np.minimum(np.floor(t).astype(int), n_lr - 1)
    i1 = np.minimum(i0 + 1, n_lr - 1)
    return i0, i1, t - i0


def bilinear_upsample(lr, scale: int, offset=(0.0, 0.0)) -> np.ndarray:
    """Upsample a 2D array by ``scale`` with bilinear weights.

    LR pixel ``(u, v)`` is placed at HR coordinate
    ``(u * scale + offset[0], v * scale + offset[1])``; HR sites outside the
    sampled hull take the nearest edge value.
    """
    lr = np.asarray(lr, dtype=np.float64)
    h, w = lr.shape
    r0, r1, fr = _axis_weights(h * scale, h, scale, offset[0])
    c0, c1, fc = _axis_weights(w * scale, w, scale, offset[1])
    top = lr[r0][:, c0] * (1 - fc) + lr[r0][:, c1] * fc
    bot = lr[r1][:, c0] * (1 - fc) + lr[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def interp_fuse(y_list, shifts, scale: int) -> ImageGrid:
    """Multi-image interpolation: drop LR samples onto the HR lattice.

    Frame ``i`` with shift ``(dx, dy)`` (LR pixels) places its pixel ``(u, v)``
    at HR site ``(u * scale + round(dy * scale), v * scale + round(dx * scale))``.
    Sites hit by several frames take their mean; sites hit by none are filled
    by bilinear interpolation of the first frame.
    """
    frames = [np.asarray(y.to_array() if isinstance(y, ImageGrid) else y, dtype=np.float64)
              for y in y_list]
    if len(frames) != len(shifts) or not frames:
        raise ContractError(f"{len(frames)} frames but {len(shifts)} shifts")
    shape = frames[0].shape
    if any(f.ndim != 2 or f.shape != shape for f in frames):
        raise ContractError("all LR frames must be 2D with the same size")
    h, w = shape
    acc = np.zeros((h * scale, w * scale))
    hits = np.zeros_like(acc)
    for f, (dx, dy) in zip(frames, shifts):
        oy, ox = int(round(dy * scale)), int(round(dx * scale))
        rows = np.arange(h) * scale + oy
        cols = np.arange(w) * scale + ox
        rk = (rows >= 0) & (rows < h * scale)
        ck = (cols >= 0) & (cols < w * scale)
        acc[np.ix_(rows[rk], cols[ck])] += f[np.ix_(rk, ck)]
        hits[np.ix_(rows[rk], cols[ck])] += 1
    dx0, dy0 = shifts[0]
    fill = bilinear_upsample(frames[0], scale, offset=(round(dy0 * scale), round(dx0 * scale)))
    out = np.where(hits > 0, acc / np.maximum(hits, 1), fill)
    return ImageGrid.from_array(out)
