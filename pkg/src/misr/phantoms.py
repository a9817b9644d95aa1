"""Synthetic test images: disk edges, cylinder projections and a test chart."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = ["disk", "cylinder_projection", "resolution_chart"]


def disk(height: int, width: int, center, radius: float, inside: float = 0.8,
         outside: float = 0.2, supersample: int = 8, blur_sigma: float = 0.0) -> np.ndarray:
    """Uniform disk with area-sampled edges, optionally Gaussian blurred.

    ``center`` is ``(x, y)`` in pixel coordinates where pixel ``(i, j)`` has
    its centre at ``(j, i)``.
    """
    s = supersample
    off = (np.arange(s) + 0.5) / s - 0.5
    yy = (np.arange(height)[:, None] + off[None, :]).ravel()
    xx = (np.arange(width)[:, None] + off[None, :]).ravel()
    cx, cy = center
    hit = ((yy[:, None] - cy) ** 2 + (xx[None, :] - cx) ** 2) <= radius * radius
    cover = hit.reshape(height, s, width, s).mean(axis=(1, 3))
    img = outside + (inside - outside) * cover
    if blur_sigma > 0:
        img = gaussian_filter(img, blur_sigma, mode="nearest")
    return img


def cylinder_projection(height: int, width: int, angle: float = 0.0, seed: int = 0) -> np.ndarray:
    """Parallel-beam projection of a few cylinders seen at ``angle`` radians.

    The cylinders stand upright, so every row of the projection is the same
    profile of chord lengths; a faint vertical taper keeps rows distinct.
    Values lie in about ``[0.1, 0.9]``.
    """
    rng = np.random.default_rng(seed)
    n = 6
    radii = rng.uniform(0.04, 0.12, n)
    ring = rng.uniform(0.0, 0.3, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    mu = rng.uniform(0.5, 1.5, n)
    u = (np.arange(width) + 0.5) / width - 0.5
    profile = np.zeros(width)
    for rad, rr, ph, m in zip(radii, ring, phase, mu):
        c = rr * np.cos(ph + angle)
        chord = np.sqrt(np.clip(rad * rad - (u - c) ** 2, 0.0, None))
        profile += m * chord
    profile /= max(profile.max(), 1e-12)
    taper = 1.0 - 0.05 * (np.arange(height) / max(height - 1, 1))
    return 0.1 + 0.8 * taper[:, None] * profile[None, :]


def resolution_chart(height: int, width: int) -> np.ndarray:
    """Bars of several periods above a row of disks and a smooth ramp."""
    img = np.full((height, width), 0.3)
    third = height // 3
    x = np.arange(width)
    for band, period in enumerate((3, 5, 8, 13)):
        r0 = band * third // 4
        r1 = (band + 1) * third // 4
        img[r0:r1] = np.where((x // period) % 2 == 0, 0.8, 0.2)[None, :]
    n = 5
    for i in range(n):
        cx = (i + 0.5) * width / n
        rad = min(width / n, third) * (0.2 + 0.05 * i)
        img[third : 2 * third] = np.maximum(
            img[third : 2 * third],
            disk(third, width, (cx, third / 2), rad, inside=0.9, outside=0.0),
        )
    ramp = np.linspace(0.1, 0.9, width)
    img[2 * third :] = ramp[None, :] * (1 - 0.2 * np.cos(np.arange(height - 2 * third) / 4.0))[:, None]
    return np.clip(img, 0.0, 1.0)
