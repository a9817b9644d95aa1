"""Command implementations: degrade, reconstruct, pipeline, metrics and bench.

Each ``cmd_*`` function takes a :class:`RunConfig` (plus a few
command-specific arguments) and returns a result object; :mod:`misr.cli`
only parses arguments and maps exceptions to exit codes.
"""

from __future__ import annotations

import dataclasses
import gc
import logging
import math
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ImageIOError, MisrError
from .grid import ImageGrid
from .imageio import (
    read_color,
    read_image,
    read_manifest,
    rgb_to_ycbcr,
    upsample_chroma,
    write_color,
    write_image,
    write_manifest,
    ycbcr_to_rgb,
)
from .interp import interp_fuse
from .metrics import mtf_circular_edge, psnr, ssim
from .objective import ObjectiveParams
from .phantoms import cylinder_projection
from .scg import SCGConfig, reconstruct
from .system import DegradationSpec, build_system, clockwise_shifts, degrade, gaussian_kernel, grid_shifts

__all__ = [
    "RunConfig",
    "ViewJob",
    "PipelineReport",
    "BenchRow",
    "cmd_degrade",
    "cmd_reconstruct",
    "cmd_pipeline",
    "cmd_metrics",
    "cmd_mtf",
    "cmd_bench",
    "MANIFEST_NAME",
    "DEGRADATION_FIELDS",
]

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
# fields that define the forward model; reconstruct checks them against the manifest
DEGRADATION_FIELDS = ("scale", "frames", "shift_pattern", "blur_size", "blur_std")


@dataclass(frozen=True)
class RunConfig:
    """Parameters shared by all commands.

    ``frames`` (k) defaults to 4 for the clockwise pattern and ``scale**2``
    for the grid pattern; ``shift_pattern="auto"`` picks clockwise at 2x
    and grid otherwise. ``noise_sigma`` is in intensity units where the
    image range is [0, 1]. Timing fields drive the simulated acquisition of
    :func:`cmd_pipeline`.
    """

    input: str | None = None
    output: str | None = None
    trace: str | None = None
    scale: int = 2
    frames: int | None = None
    shift_pattern: str = "auto"
    blur_size: int = 3
    blur_std: float = 0.5
    noise_sigma: float = 1.0 / 255.0
    p: int = 1
    lam: float = 0.05
    alpha: float = 0.4
    window: int = 3
    l1_epsilon: float = 1e-3
    workers: int = 1
    n_iter: int = 20
    seed: int = 0
    exposure: float = 0.5
    rotation_latency: float = 0.0
    views: int = 16
    view_size: int = 512
    format: str = "raw"
    bit_depth: int = 8

    def __post_init__(self):
        if self.scale < 1:
            raise ConfigurationError(f"scale must be >= 1, got {self.scale}")
        if self.shift_pattern not in ("auto", "clockwise", "grid"):
            raise ConfigurationError(f"unknown shift pattern {self.shift_pattern!r}")
        avail = len(self._pattern())
        k = self.k
        if not 1 <= k <= avail:
            raise ConfigurationError(f"frames must lie in 1..{avail} for the {self.pattern} pattern, got {k}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if self.n_iter < 0:
            raise ConfigurationError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.exposure < 0 or self.rotation_latency < 0:
            raise ConfigurationError("timing parameters must be >= 0")
        if self.views < 1 or self.view_size < 1:
            raise ConfigurationError("views and view_size must be >= 1")
        if self.format not in ("raw", "png"):
            raise ConfigurationError(f"format must be raw or png, got {self.format!r}")
        if self.bit_depth not in (8, 16):
            raise ConfigurationError(f"bit depth must be 8 or 16, got {self.bit_depth}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        # range checks for the rest
        self.objective_params()
        gaussian_kernel(self.blur_size, self.blur_std)

    @property
    def pattern(self) -> str:
        if self.shift_pattern != "auto":
            return self.shift_pattern
        return "clockwise" if self.scale == 2 else "grid"

    def _pattern(self):
        return clockwise_shifts() if self.pattern == "clockwise" else grid_shifts(self.scale)

    @property
    def k(self) -> int:
        return self.frames if self.frames is not None else len(self._pattern())

    @property
    def shifts(self) -> list[tuple[float, float]]:
        return self._pattern()[: self.k]

    @property
    def acquisition_window(self) -> float:
        """Seconds to capture one view: ``k`` exposures plus the rotation step."""
        return self.k * self.exposure + self.rotation_latency

    def degradation_spec(self, hr_width: int, hr_height: int) -> DegradationSpec:
        return DegradationSpec(
            hr_width=hr_width,
            hr_height=hr_height,
            scale=self.scale,
            blur_kernel=gaussian_kernel(self.blur_size, self.blur_std),
            shifts=self.shifts,
            noise_sigma=self.noise_sigma,
        )

    def objective_params(self) -> ObjectiveParams:
        return ObjectiveParams(p=self.p, lam=self.lam, btv_alpha=self.alpha,
                               btv_window=self.window, l1_epsilon=self.l1_epsilon)

    def scg_config(self) -> SCGConfig:
        return SCGConfig(n_iter=self.n_iter, executor="thread" if self.workers > 1 else "serial")

    def manifest_entries(self) -> dict:
        d = dataclasses.asdict(self)
        d["frames"] = self.k
        d["shift_pattern"] = self.pattern
        return {k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in d.items()}


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_field(name: str, text: str):
    kind = _FIELD_TYPES[name]
    if text == "":
        return None
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


def config_from_manifest(entries: dict) -> dict:
    """Manifest values converted back to RunConfig field types."""
    out = {}
    for k, v in entries.items():
        if k in _FIELD_TYPES:
            try:
                out[k] = _parse_field(k, v)
            except ValueError as e:
                raise ConfigurationError(f"manifest field {k}={v!r} is malformed") from e
    return out


class _Outputs:
    """Tracks files written by a command and deletes them on failure."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, p) -> Path:
        p = Path(p)
        self.paths.append(p)
        return p

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.paths:
                if p.is_file():
                    p.unlink()
        return False


def _frame_name(i: int, fmt: str) -> str:
    return f"frame_{i:02d}.{fmt}"


# --------------------------------------------------------------------- degrade


def cmd_degrade(config: RunConfig) -> list[Path]:
    """Write ``k`` simulated LR frames and a manifest into ``config.output``.

    A color ground truth is degraded on its luminance (with noise) and its
    chroma (noise free); such frames are written as RGB when the format is
    PNG, otherwise as luminance only.
    """
    if not config.input or not config.output:
        raise ConfigurationError("degrade needs an input image and an output directory")
    gt = read_color(config.input)
    h, w = gt.shape[:2]
    spec = config.degradation_spec(w, h)
    model = build_system(spec)
    if gt.ndim == 3:
        ycc = rgb_to_ycbcr(gt)
        luma = degrade(model, ImageGrid.from_array(ycc[..., 0]), config.seed)
    else:
        ycc = None
        luma = degrade(model, ImageGrid.from_array(gt), config.seed)
    out_dir = Path(config.output)
    lr_h, lr_w = spec.lr_shape
    with _Outputs() as outs:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ImageIOError(f"cannot create {out_dir}: {e}") from e
        names = []
        for i, y in enumerate(luma):
            name = _frame_name(i, config.format)
            path = outs.add(out_dir / name)
            if ycc is not None and config.format == "png":
                cb, cr = (model.ops[i].matrix @ ycc[..., c].ravel() for c in (1, 2))
                planes = np.stack([y.to_array(), cb.reshape(lr_h, lr_w), cr.reshape(lr_h, lr_w)], axis=-1)
                write_color(path, np.clip(ycbcr_to_rgb(planes), 0.0, 1.0))
            else:
                write_image(path, y, bit_depth=config.bit_depth)
            names.append(name)
        entries = config.manifest_entries()
        entries.update(hr_width=w, hr_height=h, lr_width=lr_w, lr_height=lr_h,
                       frame_files=",".join(names))
        write_manifest(outs.add(out_dir / MANIFEST_NAME), entries)
    return [out_dir / n for n in names]


# ----------------------------------------------------------------- reconstruct


def load_frames(directory, config: RunConfig | None = None, explicit=frozenset(),
                force: bool = False):
    """Read a frame set and reconcile its manifest with ``config``.

    Returns ``(effective_config, model, frames, color_reference)``. Fields in
    ``explicit`` that disagree with the manifest raise ConfigurationError
    unless ``force`` is set, in which case the config value wins.
    """
    directory = Path(directory)
    entries = read_manifest(directory / MANIFEST_NAME)
    stored = config_from_manifest(entries)
    config = config or RunConfig()
    merged = {}
    for name in DEGRADATION_FIELDS:
        if name not in stored:
            raise ConfigurationError(f"manifest in {directory} lacks {name}")
        mine = getattr(config, name)
        if name == "frames":
            mine = config.k
        elif name == "shift_pattern":
            mine = config.pattern
        if name in explicit and mine != stored[name]:
            if not force:
                raise ConfigurationError(
                    f"manifest has {name}={stored[name]} but the command asked for {mine}; "
                    "pass --force to override"
                )
            merged[name] = mine
        else:
            merged[name] = stored[name]
    if "noise_sigma" in stored and "noise_sigma" not in explicit:
        merged["noise_sigma"] = stored["noise_sigma"]
    config = dataclasses.replace(config, **merged)
    try:
        files = [f for f in entries["frame_files"].split(",") if f]
        hr_w, hr_h = int(entries["hr_width"]), int(entries["hr_height"])
    except (KeyError, ValueError) as e:
        raise ConfigurationError(f"manifest in {directory} is incomplete: {e}") from e
    if len(files) < config.k:
        raise ConfigurationError(f"manifest lists {len(files)} frames, {config.k} needed")
    files = files[: config.k]
    missing = [f for f in files if not (directory / f).is_file()]
    if missing:
        raise ImageIOError(f"missing frame files in {directory}: {', '.join(missing)}")
    spec = config.degradation_spec(hr_w, hr_h)
    frames = [read_image(directory / f) for f in files]
    for f, y in zip(files, frames):
        if y.shape != spec.lr_shape:
            raise ConfigurationError(f"{f} is {y.shape[1]}x{y.shape[0]}, manifest implies "
                                     f"{spec.lr_shape[1]}x{spec.lr_shape[0]}")
    ref = read_color(directory / files[0])
    color = ref if ref.ndim == 3 else None
    return config, build_system(spec), frames, color


def _write_sr(path, image: ImageGrid, config: RunConfig, color, shifts):
    path = Path(path)
    if color is not None and path.suffix.lower() == ".png":
        r = config.scale
        dx, dy = shifts[0]
        c = (r - 1) / 2.0
        write_color(path, upsample_chroma(color, image.to_array(), r, (c + dy * r, c + dx * r)))
    else:
        write_image(path, image, bit_depth=config.bit_depth)


def cmd_reconstruct(config: RunConfig, explicit=frozenset(), force: bool = False):
    """Super-resolve the frame set in ``config.input`` into ``config.output``.

    Writes the trace CSV to ``config.trace`` when given. On any failure both
    outputs are removed.
    """
    if not config.input or not config.output:
        raise ConfigurationError("reconstruct needs an input frame directory and an output file")
    config, model, frames, color = load_frames(config.input, config, explicit, force)
    result = reconstruct(frames, model, config.objective_params(), g=config.workers,
                         config=config.scg_config())
    with _Outputs() as outs:
        _write_sr(outs.add(config.output), result.image, config, color, model.spec.shifts)
        if config.trace:
            trace = outs.add(config.trace)
            try:
                trace.parent.mkdir(parents=True, exist_ok=True)
                trace.write_text(result.trace_csv())
            except OSError as e:
                raise ImageIOError(f"cannot write {trace}: {e}") from e
    return result


# -------------------------------------------------------------------- pipeline


@dataclass
class ViewJob:
    """One view of the scan: its ``k`` frames and when they were processed."""

    view: int
    frames: list | None
    arrival: float
    start: float = math.nan
    completion: float = math.nan
    status: str = "pending"
    note: str = ""

    @property
    def latency(self) -> float:
        return self.completion - self.arrival


@dataclass
class PipelineReport:
    jobs: list[ViewJob]
    window: float
    verdict: str
    outputs: list[Path] = field(default_factory=list)

    def fits(self, job: ViewJob) -> bool:
        return job.status == "done" and job.latency <= self.window

    def to_csv(self) -> str:
        lines = ["view,status,arrival_s,start_s,completion_s,latency_s,window_s,fits,note"]
        for j in self.jobs:
            fits = "yes" if self.fits(j) else ("no" if j.status == "done" else "")
            lines.append(f"{j.view},{j.status},{j.arrival:.4f},{j.start:.4f},{j.completion:.4f},"
                         f"{j.latency:.4f},{self.window:.4f},{fits},{j.note}")
        lines.append(f"verdict,{self.verdict}")
        return "\n".join(lines) + "\n"


def _synthetic_views(config: RunConfig):
    """Yields ``(view, frames_or_None, note)`` for projections of a rotating phantom."""
    n = config.view_size * config.scale
    spec = config.degradation_spec(n, n)
    model = build_system(spec)

    def gen(v):
        angle = 2 * math.pi * v / config.views
        gt = ImageGrid.from_array(cylinder_projection(n, n, angle, seed=config.seed))
        return degrade(model, gt, config.seed + v), ""

    return model, gen, list(range(config.views))


def _directory_views(config: RunConfig):
    root = Path(config.input)
    views = sorted(p for p in root.iterdir() if p.is_dir())
    if not views:
        raise ConfigurationError(f"{root} contains no per-view directories")
    cache = {}

    def gen(v):
        try:
            cfg, model, frames, _ = load_frames(views[v], config)
        except (ImageIOError, ConfigurationError) as e:
            return None, str(e).replace(",", ";")
        cache[v] = (cfg, model)
        return frames, ""

    return cache, gen, list(range(len(views)))


def cmd_pipeline(config: RunConfig, sleep=time.sleep, clock=time.perf_counter) -> PipelineReport:
    """Simulate capture and reconstruction of a scan, view by view.

    A capture thread produces view ``v`` at ``t0 + (v+1) * k * exposure +
    v * rotation_latency``; the main thread reconstructs one view at a time
    in arrival order. A view fits when its reconstruction completes within
    one acquisition window of its arrival, i.e. before the next view has
    been captured. The verdict is ``hidden`` when every processed view fits.
    """
    if config.input:
        source, gen, views = _directory_views(config)
        model = None
    else:
        model, gen, views = _synthetic_views(config)
    k_exp = config.k * config.exposure
    window = config.acquisition_window
    jobs: queue.Queue = queue.Queue()
    stop = threading.Event()
    t0 = clock()

    def capture():
        for v in views:
            if stop.is_set():
                return
            frames, note = gen(v)
            due = t0 + (v + 1) * k_exp + v * config.rotation_latency
            delay = due - clock()
            if delay > 0:
                sleep(delay)
            jobs.put(ViewJob(view=v, frames=frames, arrival=clock() - t0, note=note))
        jobs.put(None)

    producer = threading.Thread(target=capture, name="capture", daemon=True)
    producer.start()
    out_dir = Path(config.output) if config.output else None
    done: list[ViewJob] = []
    outputs: list[Path] = []
    params = config.objective_params()
    try:
        while True:
            job = jobs.get()
            if job is None:
                break
            if job.frames is None:
                job.status = "skipped"
                done.append(job)
                continue
            job.start = clock() - t0
            if model is None:
                cfg, vmodel = source[job.view]
            else:
                cfg, vmodel = config, model
            result = reconstruct(job.frames, vmodel, params, g=config.workers, config=cfg.scg_config())
            if out_dir is not None:
                path = out_dir / f"view_{job.view:03d}.{config.format}"
                write_image(path, result.image, bit_depth=config.bit_depth)
                outputs.append(path)
            job.completion = clock() - t0
            job.status = "done"
            done.append(job)
    except BaseException:
        stop.set()
        for p in outputs:
            p.unlink(missing_ok=True)
        raise
    finally:
        producer.join(timeout=1.0)
    processed = [j for j in done if j.status == "done"]
    hidden = bool(processed) and all(j.latency <= window for j in processed)
    report = PipelineReport(jobs=done, window=window, verdict="hidden" if hidden else "not hidden",
                            outputs=outputs)
    if out_dir is not None:
        p = out_dir / "report.csv"
        try:
            p.write_text(report.to_csv())
        except OSError as e:
            raise ImageIOError(f"cannot write {p}: {e}") from e
        report.outputs.append(p)
    return report


# --------------------------------------------------------------------- metrics


def cmd_metrics(reference, images, data_range: float = 1.0) -> list[dict]:
    """PSNR and SSIM of every image against ``reference``.

    A pair whose sizes differ gets an ``error`` entry instead of aborting
    the whole report.
    """
    ref = read_image(reference)
    rows = []
    for path in images:
        img = read_image(path)
        if img.shape != ref.shape:
            rows.append({"image": str(path), "error": f"size {img.shape[1]}x{img.shape[0]} differs "
                                                      f"from reference {ref.shape[1]}x{ref.shape[0]}"})
            continue
        rows.append({"image": str(path), "psnr": psnr(ref, img, data_range),
                     "ssim": ssim(ref, img, data_range)})
    return rows


def metrics_csv(rows) -> str:
    lines = ["image,psnr_db,ssim,error"]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['image']},,,{r['error']}")
        else:
            lines.append(f"{r['image']},{r['psnr']:.4f},{r['ssim']:.6f},")
    return "\n".join(lines) + "\n"


def cmd_mtf(image, center, radius: float, pixel_pitch: float = 1.0, output=None):
    curve = mtf_circular_edge(read_image(image).to_array(), center, radius, pixel_pitch)
    if output:
        try:
            Path(output).write_text(curve.to_csv())
        except OSError as e:
            raise ImageIOError(f"cannot write {output}: {e}") from e
    return curve


def baseline(frames, shifts, scale: int) -> ImageGrid:
    """Multi-image interpolation baseline for the given frame set."""
    return interp_fuse(frames, shifts, scale)


# ----------------------------------------------------------------------- bench


@dataclass
class BenchRow:
    size: int
    g: int
    n_iter: int
    status: str
    wall_s: float = math.nan
    local_s: float = math.nan
    reduce_s: float = math.nan
    exchange_s: float = math.nan
    note: str = ""

    @property
    def consensus_fraction(self) -> float:
        """Share of iteration time spent in aggregation and border exchange."""
        total = self.local_s + self.reduce_s + self.exchange_s
        return (self.reduce_s + self.exchange_s) / total if total > 0 else math.nan

    def csv(self) -> str:
        return (f"{self.size},{self.g},{self.n_iter},{self.status},{self.wall_s:.4f},"
                f"{self.local_s:.4f},{self.reduce_s:.5f},{self.exchange_s:.5f},"
                f"{self.consensus_fraction:.5f},{self.note}")


BENCH_HEADER = "lr_size,g,n_iter,status,wall_s,local_s,reduce_s,exchange_s,consensus_fraction,note"


def _available_memory() -> int:
    try:
        import psutil

        return int(psutil.virtual_memory().available)
    except ImportError:  # pragma: no cover
        pages = os.sysconf("SC_AVPHYS_PAGES")
        return int(pages * os.sysconf("SC_PAGE_SIZE"))


def estimate_memory(config: RunConfig, lr_size: int, g: int) -> int:
    """Rough peak bytes to build and run a ``lr_size**2``-input problem with ``g`` workers."""
    probe = build_system(config.degradation_spec(16 * config.scale, 16 * config.scale))
    per_row = max(op.nnz for op in probe.ops) / (16 * 16)
    rows = lr_size * lr_size
    hr = rows * config.scale**2
    op_bytes = 12 * per_row * rows  # float64 weight + int32 index per entry
    model = 2 * op_bytes * config.k  # A_i and its transpose
    build = 3 * op_bytes  # temporaries while composing one frame
    local = 1.1 * model if g > 1 else 0.0
    vectors = 8 * hr * (12 + 2 * config.k) + 8 * rows * 4 * config.k
    return int(model + max(build, local) + vectors)


def cmd_bench(config: RunConfig, sizes=(512, 1024, 2048), iterations=(5, 10, 20), workers=(1, 4),
              memory_limit: int | None = None, progress=None) -> list[BenchRow]:
    """Time reconstructions over ``sizes x iterations x workers``.

    ``sizes`` are LR frame edge lengths. For each size and worker count one
    run of ``max(iterations)`` steps is timed, with the cumulative wall time
    and the local/aggregation/exchange split recorded as each checkpoint in
    ``iterations`` is reached. Combinations whose estimated memory exceeds
    ``memory_limit`` (default 80% of the RAM available at the start) are
    skipped with a note.
    """
    iterations = sorted(set(iterations))
    rows: list[BenchRow] = []
    params = config.objective_params()
    # measured once: memory freed by earlier sizes is often kept by the allocator
    limit = memory_limit if memory_limit is not None else int(0.8 * _available_memory())
    for size in sizes:
        fits = {g: estimate_memory(config, size, g) for g in workers}
        if all(need > limit for need in fits.values()):
            for g in workers:
                for n in iterations:
                    rows.append(BenchRow(size, g, n, "skipped",
                                         note=f"needs ~{fits[g] / 2**30:.1f} GiB; {limit / 2**30:.1f} GiB available"))
            continue
        n = size * config.scale
        spec = config.degradation_spec(n, n)
        model = build_system(spec)
        gt = ImageGrid.from_array(cylinder_projection(n, n, seed=config.seed))
        frames = degrade(model, gt, config.seed)
        for g in workers:
            if fits[g] > limit:
                for it in iterations:
                    rows.append(BenchRow(size, g, it, "skipped",
                                         note=f"needs ~{fits[g] / 2**30:.1f} GiB; {limit / 2**30:.1f} GiB available"))
                continue
            marks = {}
            t0 = time.perf_counter()

            def checkpoint(coord, rec, marks=marks, t0=t0):
                if rec.iter in iterations:
                    marks[rec.iter] = (time.perf_counter() - t0, dict(coord.timings))

            cfg = SCGConfig(n_iter=iterations[-1], grad_tol=0.0,
                            executor="thread" if g > 1 else "serial")
            try:
                reconstruct(frames, model, params, g=g, config=cfg, callback=checkpoint)
            except MisrError as e:
                for it in iterations:
                    rows.append(BenchRow(size, g, it, "failed", note=str(e).replace(",", ";")))
                continue
            for it in iterations:
                if it not in marks:
                    rows.append(BenchRow(size, g, it, "stopped", note="converged before this checkpoint"))
                    continue
                wall, t = marks[it]
                rows.append(BenchRow(size, g, it, "ok", wall, t["local"], t["reduce"], t["exchange"]))
            if progress is not None:
                progress(rows[-1])
        del model, frames, gt
        gc.collect()
    return rows


def bench_csv(rows) -> str:
    return "\n".join([BENCH_HEADER] + [r.csv() for r in rows]) + "\n"
