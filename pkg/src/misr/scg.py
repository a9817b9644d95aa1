"""Consensus scaled conjugate gradient over partitioned workers.

Each worker evaluates the objective on its own band of the latent image and
contributes partial inner products. A coordinator sums the partials in worker
order, so every worker takes exactly the step a centralized run would take.
Per iteration there are two halo exchanges (after the curvature probe and
after the candidate step) and up to five scalar reductions.

The step logic is Moller's SCG: a finite-difference Hessian-vector probe,
a Levenberg-Marquardt style scale ``lambda_scg`` that keeps the curvature
positive, and a comparison ratio that accepts or rejects the step.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, NumericalError, SynchronizationError
from .grid import ImageGrid
from .interp import bilinear_upsample
from .objective import LocalSystem, ObjectiveParams, localize, objective_eval
from .partition import PartitionPlan, exchange_borders, fuse, plan, split
from .system import SystemModel

__all__ = [
    "SCGConfig",
    "WorkerState",
    "ConsensusState",
    "TraceRecord",
    "Reconstruction",
    "Worker",
    "Coordinator",
    "local_reduce",
    "aggregate",
    "scg_iteration",
    "reconstruct",
    "initial_estimate",
]

log = logging.getLogger(__name__)

STAGES = ("norm_p", "mu", "delta", "f_new", "r_new")


@dataclass(frozen=True)
class SCGConfig:
    n_iter: int = 20
    sigma0: float = 1e-4
    lambda0: float = 1e-6
    lambda_min: float = 1e-15
    lambda_max: float = 1e100
    grad_tol: float = 1e-12
    restart: int | None = None  # accepted steps between restarts; None = problem size
    executor: str = "serial"  # "serial" or "thread"

    def __post_init__(self):
        if self.n_iter < 0:
            raise ConfigurationError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.sigma0 <= 0 or self.lambda0 <= 0:
            raise ConfigurationError("sigma0 and lambda0 must be positive")
        if self.executor not in ("serial", "thread"):
            raise ConfigurationError(f"unknown executor {self.executor!r}")


@dataclass
class WorkerState:
    """Window-shaped vectors held by one worker; only owned rows enter reductions."""

    x: np.ndarray
    p: np.ndarray
    r: np.ndarray
    f: float
    x_tmp: np.ndarray
    x_new: np.ndarray
    r_new: np.ndarray
    f_new: float = math.nan
    r_tmp: np.ndarray | None = None


@dataclass
class ConsensusState:
    f_c: float = math.nan
    f_c_new: float = math.nan
    norm_p_c: float = math.nan
    norm_r_c: float = math.nan
    norm_r_c_new: float = math.nan
    dot_r_c: float = math.nan
    sigma_c: float = math.nan
    lambda_scg: float = 1e-6
    lambda_bar: float = 0.0
    delta_c: float = math.nan
    mu_c: float = math.nan
    alpha_c: float = math.nan
    comparison: float = math.nan
    iter: int = 0
    success: bool = True
    n_accepted: int = 0
    converged: bool = False
    stop_reason: str = ""

    def snapshot(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    f_c: float
    norm_r_c: float
    alpha_c: float
    lambda_scg: float
    accepted: bool
    f_h: tuple[float, ...] = ()

    def csv(self) -> str:
        return (f"{self.iter},{self.f_c:.17g},{self.norm_r_c:.17g},{self.alpha_c:.17g},"
                f"{self.lambda_scg:.17g},{int(self.accepted)}")


TRACE_HEADER = "iter,f_c,norm_r_c,alpha_c,lambda_scg,accepted"


class Worker:
    """Local kernels of one partition."""

    def __init__(self, index: int, local: LocalSystem, y_list, params: ObjectiveParams, x0):
        self.index = index
        self.local = local
        self.y_list = y_list
        self.params = params
        self.owned = local.window.owned
        x = np.array(x0, dtype=np.float64).reshape(local.window.shape)
        f, r = self.evaluate(x)
        self.state = WorkerState(
            x=x, p=r.copy(), r=r, f=f,
            x_tmp=x.copy(), x_new=x.copy(), r_new=np.zeros_like(r),
        )

    def evaluate(self, x):
        return objective_eval(self.local, x, self.y_list, self.params)

    def _own(self, a):
        return a[self.owned]

    def dot(self, a, b) -> float:
        # flattened dot over owned rows; owned rows are contiguous in memory
        return float(np.dot(self._own(a).ravel(), self._own(b).ravel()))

    # stage kernels -------------------------------------------------------

    def reset_direction(self):
        self.state.p = self.state.r.copy()

    def probe(self, sigma_c: float):
        s = self.state
        s.x_tmp[...] = s.x
        self._own(s.x_tmp)[...] += sigma_c * self._own(s.p)

    def curvature(self, sigma_c: float):
        s = self.state
        _, s.r_tmp = self.evaluate(s.x_tmp)

    def candidate(self, alpha_c: float):
        s = self.state
        s.x_new[...] = s.x
        self._own(s.x_new)[...] += alpha_c * self._own(s.p)

    def evaluate_candidate(self):
        s = self.state
        s.f_new, s.r_new = self.evaluate(s.x_new)

    def accept(self, beta: float):
        s = self.state
        s.x, s.x_new = s.x_new, s.x
        s.p = s.r_new + beta * s.p if beta else s.r_new.copy()
        s.r, s.r_new = s.r_new, s.r
        s.f = s.f_new


def local_reduce(worker: Worker, stage: str, sigma_c: float | None = None) -> dict:
    """Partial scalars of ``worker`` for one reduction stage, over owned entries.

    Stages: ``norm_p`` (|p|^2), ``mu`` (p.r), ``delta`` (p.s with
    s = (grad(x + sigma p) - grad(x)) / sigma), ``f_new`` (objective at the
    candidate) and ``r_new`` (|r_new|^2 and r.r_new).
    """
    s = worker.state
    if stage == "norm_p":
        out = {"norm_p": worker.dot(s.p, s.p)}
    elif stage == "mu":
        out = {"mu": worker.dot(s.p, s.r)}
    elif stage == "delta":
        if sigma_c is None or s.r_tmp is None:
            raise ContractError("delta stage needs the probe step and probe gradient")
        # grad(x_tmp) - grad(x) = r - r_tmp
        out = {"delta": worker.dot(s.p, s.r - s.r_tmp) / sigma_c}
    elif stage == "f_new":
        out = {"f_new": float(s.f_new)}
    elif stage == "r_new":
        out = {"norm_r_new": worker.dot(s.r_new, s.r_new), "dot_r": worker.dot(s.r, s.r_new)}
    elif stage == "f":
        out = {"f": float(s.f), "norm_r": worker.dot(s.r, s.r)}
    else:
        raise ContractError(f"unknown stage {stage!r}")
    for k, v in out.items():
        if not math.isfinite(v):
            raise NumericalError(f"worker {worker.index}: non-finite {k} in stage {stage}",
                                 worker=worker.index, stage=stage)
    return out


def aggregate(partials, g: int | None = None) -> dict:
    """Sum partial scalars over workers in index order.

    ``partials`` maps worker index to its partial dict (a list is taken as
    indexed by position). The fixed order makes the result independent of
    arrival order.
    """
    if not isinstance(partials, dict):
        partials = dict(enumerate(partials))
    if g is None:
        g = len(partials)
    missing = [h for h in range(g) if h not in partials]
    if missing or len(partials) != g:
        raise SynchronizationError(f"missing partials from workers {missing}")
    keys = partials[0].keys()
    out = {}
    for k in keys:
        total = 0.0
        for h in range(g):
            if k not in partials[h]:
                raise SynchronizationError(f"worker {h} did not report {k!r}")
            total += partials[h][k]
        out[k] = total
    return out


@dataclass(frozen=True)
class Reconstruction:
    image: ImageGrid
    trace: tuple[TraceRecord, ...]
    consensus: ConsensusState
    timings: dict = field(default_factory=dict)

    def trace_csv(self) -> str:
        return "\n".join([TRACE_HEADER] + [t.csv() for t in self.trace]) + "\n"


class Coordinator:
    """Owns the consensus state and drives synchronized iterations."""

    def __init__(self, workers: list[Worker], partition: PartitionPlan, config: SCGConfig,
                 n_unknowns: int):
        self.workers = workers
        self.plan = partition
        self.config = config
        self.n = n_unknowns
        self.restart = config.restart or n_unknowns
        self.timings = {"local": 0.0, "reduce": 0.0, "exchange": 0.0}
        self._pool = ThreadPoolExecutor(len(workers)) if config.executor == "thread" and len(workers) > 1 else None
        c = ConsensusState(lambda_scg=config.lambda0)
        init = self.reduce("f")
        c.f_c, c.norm_r_c = init["f"], init["norm_r"]
        self.consensus = c

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def run_local(self, fn):
        t0 = time.perf_counter()
        if self._pool is None:
            out = [fn(w) for w in self.workers]
        else:
            out = list(self._pool.map(fn, self.workers))
        self.timings["local"] += time.perf_counter() - t0
        return out

    def reduce(self, stage, sigma_c=None) -> dict:
        parts = self.run_local(lambda w: local_reduce(w, stage, sigma_c))
        t0 = time.perf_counter()
        out = aggregate(parts, len(self.workers))
        self.timings["reduce"] += time.perf_counter() - t0
        return out

    def exchange(self, field_name):
        t0 = time.perf_counter()
        if len(self.workers) > 1:
            exchange_borders(self.plan, [w.state for w in self.workers], field_name)
        self.timings["exchange"] += time.perf_counter() - t0

    def fail(self, message, stage):
        raise NumericalError(message, stage=stage, snapshot=self.consensus.snapshot())

    def fused(self) -> ImageGrid:
        return fuse(self.plan, [w.state for w in self.workers], "x")

    def step(self) -> TraceRecord:
        return scg_iteration(self)


def scg_iteration(coord: Coordinator) -> TraceRecord:
    """One synchronized SCG iteration; updates workers and consensus in place."""
    c = coord.consensus
    cfg = coord.config
    if c.success:
        c.mu_c = coord.reduce("mu")["mu"]
        if not c.mu_c > 0:
            # not a descent direction: fall back to steepest descent
            coord.run_local(lambda w: w.reset_direction())
            c.mu_c = coord.reduce("mu")["mu"]
        c.norm_p_c = coord.reduce("norm_p")["norm_p"]
        if c.norm_p_c == 0.0 or c.mu_c == 0.0:
            c.converged, c.stop_reason = True, "zero search direction"
            return _record(coord, accepted=False)
        c.sigma_c = cfg.sigma0 / math.sqrt(c.norm_p_c)
        sigma = c.sigma_c
        coord.run_local(lambda w: w.probe(sigma))
        coord.exchange("x_tmp")
        coord.run_local(lambda w: w.curvature(sigma))
        c.delta_c = coord.reduce("delta", sigma)["delta"]

    # scale the curvature and repair it to positive definite
    delta = c.delta_c + (c.lambda_scg - c.lambda_bar) * c.norm_p_c
    if delta <= 0:
        c.lambda_bar = 2.0 * (c.lambda_scg - delta / c.norm_p_c)
        delta = -delta + c.lambda_scg * c.norm_p_c
        c.lambda_scg = c.lambda_bar
    c.delta_c = delta
    c.alpha_c = c.mu_c / delta
    if not (math.isfinite(c.alpha_c) and delta > 0):
        coord.fail(f"invalid step size {c.alpha_c} (delta={delta})", "alpha")

    alpha = c.alpha_c
    coord.run_local(lambda w: w.candidate(alpha))
    coord.exchange("x_new")
    coord.run_local(lambda w: w.evaluate_candidate())
    c.f_c_new = coord.reduce("f_new")["f_new"]
    c.comparison = 2.0 * delta * (c.f_c - c.f_c_new) / (c.mu_c * c.mu_c)
    if not math.isfinite(c.comparison):
        coord.fail(f"non-finite comparison ratio at iteration {c.iter}", "comparison")

    accepted = c.comparison >= 0
    if accepted:
        red = coord.reduce("r_new")
        c.norm_r_c_new, c.dot_r_c = red["norm_r_new"], red["dot_r"]
        c.n_accepted += 1
        beta = 0.0
        if c.n_accepted % coord.restart != 0:
            beta = (c.norm_r_c_new - c.dot_r_c) / c.mu_c
            if beta <= 0:
                beta = 0.0
        coord.run_local(lambda w: w.accept(beta))
        c.f_c, c.norm_r_c = c.f_c_new, c.norm_r_c_new
        c.lambda_bar = 0.0
        c.success = True
        if c.comparison >= 0.75:
            c.lambda_scg = max(c.lambda_scg / 4.0, cfg.lambda_min)
    else:
        c.lambda_bar = c.lambda_scg
        c.success = False
    if c.comparison < 0.25:
        c.lambda_scg = c.lambda_scg + delta * (1.0 - c.comparison) / c.norm_p_c

    c.iter += 1
    if c.norm_r_c < cfg.grad_tol * coord.n:
        c.converged, c.stop_reason = True, "gradient below tolerance"
    elif c.lambda_scg > cfg.lambda_max:
        c.converged, c.stop_reason = True, "scale parameter overflow"
    return _record(coord, accepted)


def _record(coord: Coordinator, accepted: bool) -> TraceRecord:
    c = coord.consensus
    return TraceRecord(
        iter=c.iter, f_c=c.f_c, norm_r_c=c.norm_r_c, alpha_c=c.alpha_c,
        lambda_scg=c.lambda_scg, accepted=accepted,
        f_h=tuple(w.state.f for w in coord.workers),
    )


def initial_estimate(y_list, model: SystemModel) -> np.ndarray:
    """Bilinear upsampling of the reference (first) frame, aligned by its shift."""
    r = model.spec.scale
    dx, dy = model.spec.shifts[0]
    lr = np.asarray(getattr(y_list[0], "values", y_list[0]), dtype=np.float64).reshape(model.lr_shape)
    centre = (r - 1) / 2.0
    return bilinear_upsample(lr, r, offset=(centre + dy * r, centre + dx * r))


def _check_frames(y_list, model: SystemModel):
    if len(y_list) != model.k:
        raise ContractError(f"got {len(y_list)} LR frames, model expects {model.k}")
    lr_h, lr_w = model.lr_shape
    for i, y in enumerate(y_list):
        n = np.size(getattr(y, "values", y))
        if n != lr_h * lr_w:
            raise ContractError(f"frame {i} has {n} pixels, expected {lr_h}x{lr_w}")


def setup(y_list, model: SystemModel, params: ObjectiveParams, g: int,
          config: SCGConfig = SCGConfig(), x0=None, halo: int | None = None) -> Coordinator:
    """Partition the problem and initialize workers and consensus state."""
    _check_frames(y_list, model)
    hr_h, hr_w = model.hr_shape
    partition = plan(hr_h, hr_w, g, model.spec, params, halo=halo)
    if x0 is None:
        x0 = initial_estimate(y_list, model)
    x0 = np.asarray(getattr(x0, "values", x0), dtype=np.float64).reshape(hr_h, hr_w)
    frames = [np.asarray(getattr(y, "values", y), dtype=np.float64).ravel() for y in y_list]
    workers = []
    for h, (window, xw) in enumerate(zip(partition.windows(), split(partition, x0))):
        local = localize(model, window)
        workers.append(Worker(h, local, frames, params, xw))
    return Coordinator(workers, partition, config, hr_h * hr_w)


def reconstruct(y_list, model: SystemModel, params: ObjectiveParams = ObjectiveParams(),
                g: int = 1, n_iter: int | None = None, config: SCGConfig = SCGConfig(),
                x0=None, callback=None) -> Reconstruction:
    """Super-resolve ``y_list`` with ``g`` workers.

    Runs ``n_iter`` iterations (``config.n_iter`` if None) or until
    convergence. ``callback(coordinator, record)`` is invoked after every
    iteration.
    """
    if n_iter is not None:
        config = SCGConfig(**{**config.__dict__, "n_iter": n_iter})
    t0 = time.perf_counter()
    coord = setup(y_list, model, params, g, config, x0=x0)
    t_setup = time.perf_counter() - t0
    trace = [_record(coord, accepted=True)]
    try:
        while coord.consensus.iter < config.n_iter and not coord.consensus.converged:
            rec = coord.step()
            if rec.iter == trace[-1].iter:
                break  # converged without taking a step
            trace.append(rec)
            log.debug("iter %d f_c=%.6g accepted=%s", rec.iter, rec.f_c, rec.accepted)
            if callback is not None:
                callback(coord, rec)
        image = coord.fused()
    finally:
        coord.close()
    timings = dict(coord.timings, setup=t_setup, total=time.perf_counter() - t0)
    return Reconstruction(image=image, trace=tuple(trace), consensus=coord.consensus, timings=timings)
