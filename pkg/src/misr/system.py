"""Degradation operators and the synthetic forward model.

Each low-resolution frame is modelled as ``y_i = D B M_i x + noise`` where
``M_i`` translates the latent image, ``B`` blurs it and ``D`` bins it down by
the integer scale factor. All three are row-stochastic sparse operators, so
their product preserves constant images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError
from .grid import ImageGrid, SparseOperator, compose, spmv

__all__ = [
    "DegradationSpec",
    "SystemModel",
    "gaussian_kernel",
    "clockwise_shifts",
    "grid_shifts",
    "build_decimation",
    "build_blur",
    "build_motion",
    "build_system",
    "degrade",
]


def gaussian_kernel(size: int = 3, std: float = 0.5) -> np.ndarray:
    """Normalized ``size x size`` Gaussian kernel; ``std`` in HR pixels."""
    if size < 1 or size % 2 == 0:
        raise ConfigurationError(f"blur kernel size must be odd and positive, got {size}")
    if size == 1:
        return np.ones((1, 1))
    if std <= 0:
        raise ConfigurationError(f"blur std must be positive, got {std}")
    t = np.arange(size) - size // 2
    g = np.exp(-0.5 * (t / std) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def clockwise_shifts() -> list[tuple[float, float]]:
    """Reference frame followed by half-pixel moves right, down and left.

    Shifts are ``(dx, dy)`` in LR pixels. The fourth move (up) returns the
    detector to the reference position, so four frames tile a 2x lattice.
    """
    return [(0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 0.5)]


def grid_shifts(scale: int) -> list[tuple[float, float]]:
    """``scale**2`` shifts at multiples of ``1/scale`` LR pixel, row by row."""
    return [(j / scale, i / scale) for i in range(scale) for j in range(scale)]


@dataclass(frozen=True, eq=False)
class DegradationSpec:
    hr_width: int
    hr_height: int
    scale: int = 2
    blur_kernel: np.ndarray = field(default_factory=gaussian_kernel)
    shifts: Sequence[tuple[float, float]] = field(default_factory=clockwise_shifts)
    noise_sigma: float = 0.0

    def __post_init__(self):
        kernel = np.array(self.blur_kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
            raise ConfigurationError(f"blur kernel must be square with odd size, got {kernel.shape}")
        if np.any(kernel < 0) or abs(kernel.sum() - 1.0) > 1e-12:
            raise ConfigurationError("blur kernel must be non-negative and sum to 1")
        kernel.setflags(write=False)
        object.__setattr__(self, "blur_kernel", kernel)
        shifts = tuple((float(dx), float(dy)) for dx, dy in self.shifts)
        object.__setattr__(self, "shifts", shifts)
        if not isinstance(self.scale, (int, np.integer)) or self.scale < 1:
            raise ConfigurationError(f"scale must be a positive integer, got {self.scale!r}")
        if len(shifts) < 1:
            raise ConfigurationError("at least one shift (frame) is required")
        if self.hr_width < 1 or self.hr_height < 1:
            raise ConfigurationError("image dimensions must be positive")
        if self.hr_width % self.scale or self.hr_height % self.scale:
            raise ConfigurationError(
                f"HR size {self.hr_width}x{self.hr_height} is not divisible by scale {self.scale}"
            )
        if self.noise_sigma < 0 or not math.isfinite(self.noise_sigma):
            raise ConfigurationError(f"noise sigma must be finite and >= 0, got {self.noise_sigma}")

    @property
    def k(self) -> int:
        return len(self.shifts)

    @property
    def hr_shape(self) -> tuple[int, int]:
        return (self.hr_height, self.hr_width)

    @property
    def lr_shape(self) -> tuple[int, int]:
        return (self.hr_height // self.scale, self.hr_width // self.scale)

    @property
    def blur_radius(self) -> int:
        return self.blur_kernel.shape[0] // 2

    @property
    def max_shift_hr(self) -> int:
        """Largest translation in whole HR pixels (rounded up)."""
        m = max(max(abs(dx), abs(dy)) for dx, dy in self.shifts)
        return math.ceil(m * self.scale - 1e-9)


def build_decimation(spec: DegradationSpec) -> SparseOperator:
    """Box-average each ``scale x scale`` block into one LR pixel."""
    r = spec.scale
    h, w = spec.lr_shape
    u, v = np.divmod(np.arange(h * w), w)
    a, b = np.divmod(np.arange(r * r), r)
    rows = np.repeat(np.arange(h * w), r * r)
    src_r = (u[:, None] * r + a[None, :]).ravel()
    src_c = (v[:, None] * r + b[None, :]).ravel()
    cols = src_r * spec.hr_width + src_c
    return SparseOperator.from_triplets(
        h * w, spec.hr_width * spec.hr_height, rows, cols, np.full(rows.size, 1.0 / (r * r))
    )


def _stencil_operator(height, width, offsets, weights) -> SparseOperator:
    """Operator with ``out(i, j) = sum_t weights[t] * x(clamp(i + di_t), clamp(j + dj_t))``."""
    n = height * width
    i, j = np.divmod(np.arange(n), width)
    rows, cols, vals = [], [], []
    for (di, dj), wt in zip(offsets, weights):
        if wt == 0.0:
            continue
        si = np.clip(i + di, 0, height - 1)
        sj = np.clip(j + dj, 0, width - 1)
        rows.append(np.arange(n))
        cols.append(si * width + sj)
        vals.append(np.full(n, wt))
    return SparseOperator.from_triplets(
        n, n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    )


def build_blur(spec: DegradationSpec) -> SparseOperator:
    """Convolution with the blur kernel, replicate padding at the borders.

    Clamped taps are merged into the border pixel, so each row still sums to 1.
    """
    kernel = spec.blur_kernel
    c = kernel.shape[0] // 2
    offsets, weights = [], []
    for a in range(kernel.shape[0]):
        for b in range(kernel.shape[1]):
            # convolution: out(i, j) += K[a, b] * x(i - (a - c), j - (b - c))
            offsets.append((c - a, c - b))
            weights.append(kernel[a, b])
    return _stencil_operator(spec.hr_height, spec.hr_width, offsets, weights)


def build_motion(spec: DegradationSpec, shift_index: int) -> SparseOperator:
    """Bilinear translation for frame ``shift_index`` (1-based).

    ``out(i, j) = x(i + dy * scale, j + dx * scale)`` with bilinear weights and
    replicate padding outside the image.
    """
    if not 1 <= shift_index <= spec.k:
        raise ContractError(f"shift index {shift_index} outside [1, {spec.k}]")
    dx, dy = spec.shifts[shift_index - 1]
    tx, ty = dx * spec.scale, dy * spec.scale
    fx, fy = math.floor(tx), math.floor(ty)
    ax, ay = tx - fx, ty - fy
    offsets = [(fy, fx), (fy, fx + 1), (fy + 1, fx), (fy + 1, fx + 1)]
    weights = [(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax]
    return _stencil_operator(spec.hr_height, spec.hr_width, offsets, weights)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Operators ``A_i = D B M_i`` for every frame, with cached transposes."""

    spec: DegradationSpec
    ops: tuple[SparseOperator, ...]

    @property
    def k(self) -> int:
        return len(self.ops)

    @property
    def hr_shape(self) -> tuple[int, int]:
        return self.spec.hr_shape

    @property
    def lr_shape(self) -> tuple[int, int]:
        return self.spec.lr_shape

    def forward(self, x) -> list[np.ndarray]:
        """Noise-free ``A_i x`` for every frame, as flat vectors."""
        return [spmv(op, x) for op in self.ops]


def build_system(spec: DegradationSpec) -> SystemModel:
    d = build_decimation(spec)
    b = build_blur(spec)
    db = compose(d, b)
    ops = []
    for i in range(1, spec.k + 1):
        a = compose(db, build_motion(spec, i))
        a.matrix_t  # warm the transpose cache once, before workers share the model
        ops.append(a)
    return SystemModel(spec=spec, ops=tuple(ops))


def degrade(model: SystemModel, x: ImageGrid, seed: int) -> list[ImageGrid]:
    """Simulate ``k`` noisy LR frames from the latent image ``x``.

    Noise is i.i.d. Gaussian with ``model.spec.noise_sigma`` drawn from a
    generator seeded with ``seed``; the same seed reproduces the frames
    bit for bit.
    """
    if x.shape != model.hr_shape:
        raise ContractError(f"image is {x.shape}, model expects {model.hr_shape}")
    rng = np.random.default_rng(seed)
    h, w = model.lr_shape
    sigma = model.spec.noise_sigma
    frames = []
    for op in model.ops:
        y = spmv(op, x)
        if sigma > 0:
            y = y + rng.normal(0.0, sigma, size=y.size)
        frames.append(ImageGrid(width=w, height=h, values=y))
    return frames
