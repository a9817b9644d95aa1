"""Image quality metrics: PSNR, SSIM and circular-edge MTF."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import AnalysisError, ContractError
from .grid import ImageGrid
from .interp import bilinear_upsample, interp_fuse

__all__ = ["psnr", "ssim", "MtfCurve", "mtf_circular_edge", "interp_fuse", "bilinear_upsample"]


def _pair(a, b):
    a = np.asarray(a.to_array() if isinstance(a, ImageGrid) else a, dtype=np.float64)
    b = np.asarray(b.to_array() if isinstance(b, ImageGrid) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image sizes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, data_range: float = 1.0, window: int = 8) -> float:
    """Mean SSIM over all ``window x window`` sliding windows.

    Uses uniform windows, population statistics and the usual constants
    ``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2`` with ``L = data_range``.
    """
    a, b = _pair(a, b)
    if min(a.shape) < window:
        raise ContractError(f"image {a.shape} is smaller than the {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def local_mean(z):
        m = uniform_filter(z, size=window, mode="constant")
        # keep windows that lie fully inside the image
        lo = window // 2
        hi = window - lo - 1
        return m[lo : m.shape[0] - hi, lo : m.shape[1] - hi]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    cov = local_mean(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


@dataclass(frozen=True, eq=False)
class MtfCurve:
    frequencies: np.ndarray
    magnitudes: np.ndarray
    mtf10: float
    reached10: bool = True

    def at(self, f) -> np.ndarray:
        """Magnitude interpolated at frequency ``f``."""
        return np.interp(f, self.frequencies, self.magnitudes)

    def to_csv(self) -> str:
        lines = ["frequency,magnitude"]
        lines += [f"{f:.6g},{m:.6g}" for f, m in zip(self.frequencies, self.magnitudes)]
        return "\n".join(lines) + "\n"


def _mtf10(freqs, mags):
    below = np.flatnonzero(mags < 0.1)
    if below.size == 0:
        return float(freqs[-1]), False
    i = below[0]
    f0, f1, m0, m1 = freqs[i - 1], freqs[i], mags[i - 1], mags[i]
    return float(f0 + (m0 - 0.1) * (f1 - f0) / (m0 - m1)), True


def mtf_circular_edge(img, center, radius: float, pixel_pitch: float = 1.0,
                      margin: float | None = None, bin_width: float = 0.1) -> MtfCurve:
    """MTF from the edge of a uniform disk.

    Pixel values are binned by distance to ``center = (x, y)`` in
    ``bin_width`` steps across ``radius +- margin`` to form the edge spread
    function. It is lightly smoothed, differentiated into the line spread
    function, tapered, and Fourier transformed. Frequencies run up to the
    Nyquist limit of the image and are reported in cycles per
    ``pixel_pitch`` units (use ``pixel_pitch=scale`` to express an LR image
    on the HR grid).
    """
    a = np.asarray(img.to_array() if isinstance(img, ImageGrid) else img, dtype=np.float64)
    if a.ndim != 2:
        raise AnalysisError("MTF needs a 2D image")
    cx, cy = center
    if margin is None:
        margin = min(0.5 * radius, 12.0)
    reach = radius + margin
    if radius <= 2 or cx - reach < 0 or cy - reach < 0 or cx + reach > a.shape[1] - 1 \
            or cy + reach > a.shape[0] - 1:
        raise AnalysisError(f"disk of radius {radius} at {center} (+{margin:.1f} px margin) "
                            f"does not fit in a {a.shape[1]}x{a.shape[0]} image")
    yy, xx = np.mgrid[: a.shape[0], : a.shape[1]]
    d = np.hypot(xx - cx, yy - cy).ravel()
    v = a.ravel()
    sel = np.abs(d - radius) <= margin
    nbins = int(round(2 * margin / bin_width))
    edges = radius - margin + bin_width * np.arange(nbins + 1)
    idx = np.clip(np.digitize(d[sel], edges) - 1, 0, nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    sums = np.bincount(idx, weights=v[sel], minlength=nbins)
    centres = 0.5 * (edges[:-1] + edges[1:])
    filled = counts > 0
    if filled.sum() < nbins // 2:
        raise AnalysisError("too few pixels around the disk edge")
    esf = np.interp(centres, centres[filled], sums[filled] / counts[filled])

    inside = esf[: nbins // 4].mean()
    outside = esf[-(nbins // 4):].mean()
    if abs(inside - outside) < 1e-6 * max(1.0, abs(inside) + abs(outside)):
        raise AnalysisError("no edge contrast found at the given disk")
    # orient so the ESF rises across the edge
    if inside > outside:
        esf = -esf
    esf = np.convolve(np.pad(esf, 1, mode="edge"), [0.25, 0.5, 0.25], mode="valid")
    lsf = np.diff(esf) * np.hanning(nbins - 1)

    n_fft = max(8192, 1 << int(math.ceil(math.log2(lsf.size * 8))))
    spectrum = np.abs(np.fft.rfft(lsf, n=n_fft))
    freqs = np.fft.rfftfreq(n_fft, d=bin_width)
    keep = freqs <= 0.5 + 1e-12
    freqs, spectrum = freqs[keep], spectrum[keep]
    # undo the [1, 2, 1] / 4 smoothing and the first difference
    spectrum = spectrum / (np.cos(np.pi * freqs * bin_width) ** 2 * np.sinc(freqs * bin_width))
    if spectrum[0] <= 0:
        raise AnalysisError("degenerate line spread function")
    mags = spectrum / spectrum[0]
    freqs = freqs / pixel_pitch
    f10, reached = _mtf10(freqs, mags)
    return MtfCurve(frequencies=freqs, magnitudes=mags, mtf10=f10, reached10=reached)
