import numpy as np
import pytest
from hypothesis import settings

from misr.system import DegradationSpec, build_system

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model(hr=16, scale=2, noise=0.0, **kw):
    return build_system(DegradationSpec(hr_width=hr, hr_height=hr, scale=scale, noise_sigma=noise, **kw))


def dense_blur_motion(spec, shift_index):
    """Dense D, B, M_i built pixel by pixel from their definitions."""
    h, w = spec.hr_shape
    r = spec.scale
    n = h * w
    lh, lw = spec.lr_shape
    d = np.zeros((lh * lw, n))
    for u in range(lh):
        for v in range(lw):
            for a in range(r):
                for b in range(r):
                    d[u * lw + v, (u * r + a) * w + v * r + b] = 1.0 / r**2
    k = spec.blur_kernel
    rad = k.shape[0] // 2
    bl = np.zeros((n, n))
    for i in range(h):
        for j in range(w):
            for a in range(-rad, rad + 1):
                for c in range(-rad, rad + 1):
                    ii = min(max(i + a, 0), h - 1)
                    jj = min(max(j + c, 0), w - 1)
                    bl[i * w + j, ii * w + jj] += k[a + rad, c + rad]
    dx, dy = spec.shifts[shift_index - 1]
    sy, sx = dy * r, dx * r
    m = np.zeros((n, n))
    for i in range(h):
        for j in range(w):
            y, x = i + sy, j + sx
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            fy, fx = y - y0, x - x0
            for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
                for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                    if wy * wx == 0:
                        continue
                    m[i * w + j, min(max(yy, 0), h - 1) * w + min(max(xx, 0), w - 1)] += wy * wx
    return d, bl, m


def central_difference(fun, x, coords, h=1e-6):
    """Central differences of scalar ``fun`` at flat indices ``coords`` of ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = []
    for c in coords:
        keep = flat[c]
        flat[c] = keep + h
        fp = fun(x)
        flat[c] = keep - h
        fm = fun(x)
        flat[c] = keep
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def relative_errors(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-30)
    return np.abs(analytic - numeric) / scale


def btv_brute_force(x, alpha, w, eps):
    """Direct double loop over shifts and pixel pairs inside the image."""
    rows, cols = x.shape
    total = 0.0
    for dy in range(w):
        for dx in range(w):
            if dx == 0 and dy == 0:
                continue
            for i in range(rows - dy):
                for j in range(cols - dx):
                    t = x[i, j] - x[i + dy, j + dx]
                    total += alpha ** (dx + dy) * (np.sqrt(t * t + eps * eps) - eps)
    return total


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    def report(number, name, status, detail, seconds):
        line = f"CRITERION {number} {name}: {status} ({detail}; {seconds:.1f} s)"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
