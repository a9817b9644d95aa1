"""Horizontal band decomposition of the latent image with halo exchange.

Worker ``h`` owns a contiguous band of full rows and additionally holds
``halo`` rows above and below it (clipped at the image border). The halo rows
it imports are its *outer* borders; the owned rows its neighbours import from
it are its *inner* borders. After :func:`exchange_borders` every outer border
is a bit-exact copy of the neighbour's inner border.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .grid import ImageGrid
from .objective import ObjectiveParams, Window

__all__ = ["Band", "PartitionPlan", "required_halo", "plan", "split", "exchange_borders", "fuse"]


def required_halo(spec, params: ObjectiveParams) -> int:
    """Rows each worker must import per side.

    A residual of LR row ``u`` depends on HR rows spanning
    ``(scale - 1) + 2 * (blur_radius + shift)``; the gradient at an owned
    row needs every residual touching it, so that span is the reach. The BTV
    prior reaches ``window - 1`` rows. The result is rounded up to whole LR
    rows. For 2x, a 3x3 blur, half-pixel shifts and a 3-wide window this is
    6 rows per side, i.e. a 12-row overlap around each seam.
    """
    r = spec.scale
    reach = (r - 1) + 2 * (spec.blur_radius + spec.max_shift_hr)
    need = max(reach, params.btv_window - 1, 1)
    return r * math.ceil(need / r)


@dataclass(frozen=True)
class Band:
    index: int
    own_start: int
    own_stop: int
    start: int
    stop: int
    up: int | None
    down: int | None

    def window(self, height: int, width: int) -> Window:
        return Window(height, width, self.start, self.stop, self.own_start, self.own_stop)

    @property
    def outer(self) -> dict[int, tuple[int, int]]:
        """Halo row ranges (global) received from each neighbour."""
        out = {}
        if self.up is not None:
            out[self.up] = (self.start, self.own_start)
        if self.down is not None:
            out[self.down] = (self.own_stop, self.stop)
        return out

    @property
    def inner(self) -> dict[int, tuple[int, int]]:
        """Owned row ranges (global) sent to each neighbour."""
        inn = {}
        if self.up is not None:
            inn[self.up] = (self.own_start, self.own_start + (self.own_start - self.start))
        if self.down is not None:
            inn[self.down] = (self.own_stop - (self.stop - self.own_stop), self.own_stop)
        return inn


@dataclass(frozen=True)
class PartitionPlan:
    height: int
    width: int
    halo: int
    bands: tuple[Band, ...]

    @property
    def g(self) -> int:
        return len(self.bands)

    @property
    def overlap(self) -> int:
        """Rows shared around each seam (halo imported on both sides)."""
        return 2 * self.halo if self.g > 1 else 0

    def windows(self) -> list[Window]:
        return [b.window(self.height, self.width) for b in self.bands]


def plan(hr_height: int, hr_width: int, g: int, spec, params: ObjectiveParams,
         halo: int | None = None) -> PartitionPlan:
    """Split ``hr_height`` rows into ``g`` bands; leftover rows go to the last band.

    ``halo`` overrides the computed halo (it may only be raised).
    """
    if g < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {g}")
    need = required_halo(spec, params)
    if halo is None:
        halo = need
    elif halo < need:
        raise ConfigurationError(f"halo {halo} is below the required {need} rows")
    base = hr_height // g
    if g > 1 and base < 2 * halo:
        raise ConfigurationError(
            f"image too small for {g} workers: each band needs >= {2 * halo} rows, "
            f"so the height must be at least {g * 2 * halo} (got {hr_height})"
        )
    if base < 1:
        raise ConfigurationError(f"cannot split {hr_height} rows across {g} workers")
    bands = []
    for h in range(g):
        a = h * base
        b = hr_height if h == g - 1 else a + base
        bands.append(
            Band(
                index=h,
                own_start=a,
                own_stop=b,
                start=max(0, a - halo) if h > 0 else 0,
                stop=min(hr_height, b + halo) if h < g - 1 else hr_height,
                up=h - 1 if h > 0 else None,
                down=h + 1 if h < g - 1 else None,
            )
        )
    return PartitionPlan(hr_height, hr_width, halo if g > 1 else 0, tuple(bands))


def split(plan: PartitionPlan, x) -> list[np.ndarray]:
    """Cut ``x`` into per-worker window arrays (owned rows plus halo), copied."""
    a = np.asarray(x.to_array() if isinstance(x, ImageGrid) else x, dtype=np.float64)
    a = a.reshape(plan.height, plan.width)
    return [a[b.start : b.stop].copy() for b in plan.bands]


def _get(state, field):
    return state if field is None else getattr(state, field)


def exchange_borders(plan: PartitionPlan, states, field: str | None = None):
    """Overwrite each worker's outer borders with its neighbours' inner borders.

    ``states`` are window arrays, or objects whose ``field`` attribute is one.
    Arrays are updated in place; the same list is returned.
    """
    if len(states) != plan.g:
        raise ContractError(f"expected {plan.g} worker states, got {len(states)}")
    for band, state in zip(plan.bands, states):
        arr = _get(state, field)
        if arr.shape != (band.stop - band.start, plan.width):
            raise ContractError(f"worker {band.index} holds {arr.shape}, band expects "
                                f"{(band.stop - band.start, plan.width)}")
    # outer borders are halo rows and inner borders are owned rows, so the
    # copies never overlap and the order is irrelevant
    for band, state in zip(plan.bands, states):
        dst = _get(state, field)
        for nb, (lo, hi) in band.outer.items():
            src_band = plan.bands[nb]
            s_lo, s_hi = src_band.inner[band.index]
            if (s_hi - s_lo) != (hi - lo):
                raise ContractError(
                    f"border mismatch between workers {band.index} and {nb}: "
                    f"{hi - lo} vs {s_hi - s_lo} rows"
                )
            src = _get(states[nb], field)
            dst[lo - band.start : hi - band.start] = src[s_lo - src_band.start : s_hi - src_band.start]
    return states


def fuse(plan: PartitionPlan, states, field: str | None = None) -> ImageGrid:
    """Assemble the full image from owned rows only."""
    if len(states) != plan.g or any(s is None for s in states):
        raise ContractError(f"fuse needs all {plan.g} partitions")
    out = np.empty((plan.height, plan.width))
    for band, state in zip(plan.bands, states):
        arr = _get(state, field)
        if arr.shape != (band.stop - band.start, plan.width):
            raise ContractError(f"partition {band.index} has shape {arr.shape}")
        out[band.own_start : band.own_stop] = arr[band.own_start - band.start : band.own_stop - band.start]
    return ImageGrid.from_array(out)
