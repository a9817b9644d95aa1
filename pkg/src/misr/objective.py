"""MAP objective: Lp data fidelity over all frames plus a BTV prior.

Every function here works on a *window* of the latent image: a band of full
rows ``[start, stop)`` that contains the rows a worker owns plus halo rows
imported from its neighbours. Values are accumulated over owned pixels only,
so the per-window objectives of a partition add up to the centralized one.
Gradients are exact on owned rows; entries on halo rows are partial sums and
must not be used.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .grid import ImageGrid
from .system import SystemModel

__all__ = [
    "ObjectiveParams",
    "Window",
    "LocalSystem",
    "localize",
    "data_term",
    "btv_term",
    "objective_eval",
    "smooth_abs",
]


@dataclass(frozen=True)
class ObjectiveParams:
    """Objective weights.

    ``p`` selects the data norm (1 or 2), ``lam`` weights the prior, the BTV
    neighbourhood spans shifts ``0..btv_window-1`` in each direction with
    decay ``btv_alpha ** (dx + dy)``, and ``l1_epsilon`` smooths ``|t|``.
    """

    p: int = 1
    lam: float = 0.05
    btv_alpha: float = 0.4
    btv_window: int = 3
    l1_epsilon: float = 1e-3

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ConfigurationError(f"data norm must be 1 or 2, got {self.p}")
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be > 0, got {self.lam}")
        if not 0 < self.btv_alpha < 1:
            raise ConfigurationError(f"BTV alpha must lie in (0, 1), got {self.btv_alpha}")
        if self.btv_window < 1:
            raise ConfigurationError(f"BTV window must be >= 1, got {self.btv_window}")
        if not self.l1_epsilon > 0:
            raise ConfigurationError(f"l1 epsilon must be > 0, got {self.l1_epsilon}")

    def btv_shifts(self):
        """Yield ``(dx, dy, weight)`` for every non-zero shift in the window."""
        w = self.btv_window
        for dy in range(w):
            for dx in range(w):
                if dx or dy:
                    yield dx, dy, self.btv_alpha ** (dx + dy)


@dataclass(frozen=True)
class Window:
    """Rows ``[start, stop)`` of a ``height x width`` image, owning ``[own_start, own_stop)``."""

    height: int
    width: int
    start: int
    stop: int
    own_start: int
    own_stop: int

    def __post_init__(self):
        if not (0 <= self.start <= self.own_start < self.own_stop <= self.stop <= self.height):
            raise ContractError(f"invalid window {self}")

    @classmethod
    def full(cls, height: int, width: int) -> "Window":
        return cls(height, width, 0, height, 0, height)

    @property
    def rows(self) -> int:
        return self.stop - self.start

    @property
    def owned(self) -> slice:
        """Owned rows in window-local coordinates."""
        return slice(self.own_start - self.start, self.own_stop - self.start)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.width)


@dataclass(frozen=True, eq=False)
class LocalSystem:
    """Frame operators restricted to one window.

    For frame ``i``, ``ops[i]`` holds the LR rows whose support touches an
    owned pixel (or that the window is charged for), with columns limited to
    the window. ``lr_index[i]`` maps its rows back into the flat LR frame and
    ``charged[i]`` marks the rows whose residual counts towards this window's
    objective value (``None`` means all).
    """

    window: Window
    ops: tuple
    ops_t: tuple
    lr_index: tuple
    charged: tuple


_full_cache: "weakref.WeakKeyDictionary[SystemModel, LocalSystem]" = weakref.WeakKeyDictionary()


def localize(model: SystemModel, window: Window) -> LocalSystem:
    """Restrict every ``A_i`` to ``window``.

    An LR row is charged to the window that owns the top HR row of its block,
    so every LR pixel is counted exactly once across a partition.

    Raises ConfigurationError if a needed LR row reaches outside the window,
    which means the halo is too thin for the operator support.
    """
    hr_h, hr_w = model.hr_shape
    lr_h, lr_w = model.lr_shape
    if (window.height, window.width) != (hr_h, hr_w):
        raise ContractError(f"window is for {window.height}x{window.width}, model is {hr_h}x{hr_w}")
    r = model.spec.scale
    full = window.start == 0 and window.stop == hr_h
    c0, c1 = window.start * hr_w, window.stop * hr_w
    ops, ops_t, lr_index, charged = [], [], [], []
    for op in model.ops:
        m = op.matrix
        if full:
            ops.append(m)
            ops_t.append(op.matrix_t)
            lr_index.append(slice(None))
            charged.append(None)
            continue
        src_rows = m.indices // hr_w
        lo = np.minimum.reduceat(src_rows, m.indptr[:-1]).reshape(lr_h, lr_w).min(axis=1)
        hi = np.maximum.reduceat(src_rows, m.indptr[:-1]).reshape(lr_h, lr_w).max(axis=1)
        touches = (hi >= window.own_start) & (lo < window.own_stop)
        top = np.arange(lr_h) * r
        charge = (top >= window.own_start) & (top < window.own_stop)
        need = np.flatnonzero(touches | charge)
        if need.size and (lo[need].min() < window.start or hi[need].max() >= window.stop):
            raise ConfigurationError(
                f"halo too small: rows {window.start}..{window.stop - 1} cannot support "
                f"LR rows reaching HR rows {lo[need].min()}..{hi[need].max()}"
            )
        idx = (need[:, None] * lr_w + np.arange(lr_w)[None, :]).ravel()
        sub = m[idx][:, c0:c1].tocsr()
        ops.append(sub)
        ops_t.append(sub.T.tocsr())
        lr_index.append(idx)
        charged.append(np.repeat(charge[need], lr_w))
    return LocalSystem(window, tuple(ops), tuple(ops_t), tuple(lr_index), tuple(charged))


def _as_local(system, x_part) -> LocalSystem:
    if isinstance(system, LocalSystem):
        return system
    if isinstance(system, SystemModel):
        local = _full_cache.get(system)
        if local is None:
            local = localize(system, Window.full(*system.hr_shape))
            _full_cache[system] = local
        return local
    raise TypeError(f"expected SystemModel or LocalSystem, got {type(system).__name__}")


def _window_array(x_part, window: Window) -> np.ndarray:
    x = np.asarray(getattr(x_part, "values", x_part), dtype=np.float64)
    if x.size != window.rows * window.width:
        raise ContractError(f"partition has {x.size} values, window expects {window.shape}")
    return x.reshape(window.shape)


def smooth_abs(t, eps):
    """Charbonnier approximation ``sqrt(t^2 + eps^2) - eps`` and its derivative."""
    s = np.sqrt(t * t + eps * eps)
    return s - eps, t / s


def _smooth_abs_inplace(t, eps):
    """Overwrite ``t`` with the derivative of :func:`smooth_abs`; return ``sqrt(t^2 + eps^2)``."""
    s = np.multiply(t, t)
    s += eps * eps
    np.sqrt(s, out=s)
    np.divide(t, s, out=t)
    return s


def data_term(system, x_part, y_list, params: ObjectiveParams):
    """Sum of per-frame fidelity ``rho(A_i x - y_i)``.

    ``rho(t) = t^2`` for ``p=2`` and the smoothed ``|t|`` for ``p=1``.
    Returns ``(value, gradient)``; the gradient has the window's shape.
    """
    local = _as_local(system, x_part)
    x = _window_array(x_part, local.window).ravel()
    if len(y_list) != len(local.ops):
        raise ContractError(f"got {len(y_list)} frames, model has {len(local.ops)}")
    value = 0.0
    grad = np.zeros_like(x)
    for a, at, idx, charged, y in zip(local.ops, local.ops_t, local.lr_index, local.charged, y_list):
        yv = np.asarray(getattr(y, "values", y), dtype=np.float64).ravel()
        yv = yv[idx]
        if yv.size != a.shape[0]:
            raise ContractError("LR frame size does not match the model")
        res = a @ x
        res -= yv
        if params.p == 2:
            rho = res * res
            res *= 2.0
            value += float(rho.sum() if charged is None else rho[charged].sum())
        else:
            root = _smooth_abs_inplace(res, params.l1_epsilon)
            if charged is not None:
                root = root[charged]
            value += float(root.sum()) - params.l1_epsilon * root.size
        grad += at @ res
    return value, grad.reshape(local.window.shape)


def btv_term(x_part, params: ObjectiveParams, window: Window | None = None):
    """Bilateral total variation ``sum_d alpha^(dx+dy) * sum |x - S_d x|``.

    Only pixel pairs with both ends inside the image contribute; a pair is
    charged to the pixel it starts from. ``window`` defaults to the whole
    image when ``x_part`` is 2D.
    """
    if window is None:
        if isinstance(x_part, ImageGrid) or np.ndim(x_part) == 2:
            window = Window.full(*(x_part.shape if isinstance(x_part, ImageGrid) else np.shape(x_part)))
        else:
            raise ContractError("btv_term needs a 2D image or an explicit window")
    x = _window_array(x_part, window)
    rows, cols = x.shape
    o = window.owned
    eps = params.l1_epsilon
    value = 0.0
    grad = np.zeros_like(x)
    for dx, dy, gamma in params.btv_shifts():
        if dy >= rows or dx >= cols:
            continue
        diff = x[: rows - dy, : cols - dx] - x[dy:, dx:]
        root = _smooth_abs_inplace(diff, eps)
        owned = root[o.start : min(o.stop, rows - dy)]
        value += gamma * (float(owned.sum()) - eps * owned.size)
        diff *= gamma
        grad[: rows - dy, : cols - dx] += diff
        grad[dy:, dx:] -= diff
    return value, grad


def objective_eval(system, x_part, y_list, params: ObjectiveParams):
    """Objective value and steepest-descent direction on one window.

    Returns ``(f, r)`` with ``r = -grad`` on owned rows and zero on halo rows.
    """
    local = _as_local(system, x_part)
    dv, dg = data_term(local, x_part, y_list, params)
    bv, bg = btv_term(x_part, params, local.window)
    r = -(dg + params.lam * bg)
    o = local.window.owned
    r[: o.start] = 0.0
    r[o.stop :] = 0.0
    return dv + params.lam * bv, r
