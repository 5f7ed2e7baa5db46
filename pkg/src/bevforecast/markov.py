"""Grid Bayes filter with a constant-velocity motion model (the Markov baseline)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gridcore import GridSpec, cell_to_metric_arrays

SIGMA_PROCESS = 0.5
SIGMA_OBS = 1.0


class BeliefLost(ValueError):
    """All probability mass left the grid."""


@dataclass(frozen=True)
class Belief:
    spec: GridSpec
    p: np.ndarray  # (n, n), sums to 1
    velocity: tuple  # (vx, vz) in cells per frame; +vx moves toward row 0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.velocity):
            raise ValueError(f"velocity must be finite, got {self.velocity}")

    def argmax_position(self):
        r, c = divmod(int(np.argmax(self.p)), self.spec.size_cells)
        x, z = cell_to_metric_arrays(r, c, self.spec)
        return float(x), float(z)


def continuous_cell(pos, spec: GridSpec):
    """Fractional (row, col) whose integer part is the containing cell and .5 its center."""
    x, z = pos
    return spec.size_cells // 2 - x / spec.resolution_m, z / spec.resolution_m


def gaussian_grid(row: float, col: float, sigma: float, n: int) -> np.ndarray:
    """Normalized isotropic Gaussian over cell centers; ``(row, col)`` is fractional."""
    rr = np.arange(n) + 0.5 - row
    cc = np.arange(n) + 0.5 - col
    g = np.exp(-0.5 * rr**2 / sigma**2)[:, None] * np.exp(-0.5 * cc**2 / sigma**2)[None, :]
    s = g.sum()
    if s <= 0:
        raise BeliefLost(f"initial position ({row:.2f}, {col:.2f}) is off the {n}x{n} grid")
    return g / s


def init_from_observations(positions, spec: GridSpec, sigma_obs_cells: float = SIGMA_OBS) -> Belief:
    """Gaussian at the last observation, velocity from the mean per-frame displacement.

    ``positions`` are metric ``(X, Z)`` points in one common frame.
    """
    pts = np.asarray(positions, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError(f"need at least 2 observations, got {len(pts)}")
    disp = (pts[-1] - pts[0]) / (len(pts) - 1) / spec.resolution_m
    row, col = continuous_cell(pts[-1], spec)
    p = gaussian_grid(row, col, sigma_obs_cells, spec.size_cells)
    return Belief(spec, p, (float(disp[0]), float(disp[1])))


def _shift_axis(a: np.ndarray, d: float, axis: int) -> np.ndarray:
    """Move mass by ``d`` cells along ``axis``, splitting fractions between two cells."""
    k = math.floor(d)
    f = d - k
    n = a.shape[axis]
    out = np.zeros_like(a)
    for step, w in ((k, 1.0 - f), (k + 1, f)):
        if w == 0.0 or abs(step) >= n:
            continue
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        if step >= 0:
            src[axis], dst[axis] = slice(0, n - step), slice(step, n)
        else:
            src[axis], dst[axis] = slice(-step, n), slice(0, n + step)
        out[tuple(dst)] += w * a[tuple(src)]
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D kernel with radius ceil(4 sigma); a unit impulse for sigma <= 0."""
    if sigma <= 0:
        return np.ones(1)
    r = max(int(math.ceil(4 * sigma)), 1)
    with np.errstate(over="ignore"):  # subnormal sigma: exp(-inf) = 0 leaves an impulse
        k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    if len(k) == 1:
        return a.copy()
    r = len(k) // 2
    n = a.shape[axis]
    out = np.zeros_like(a)
    for t, w in enumerate(k):
        d = t - r
        if abs(d) >= n:
            continue
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        if d >= 0:
            src[axis], dst[axis] = slice(0, n - d), slice(d, n)
        else:
            src[axis], dst[axis] = slice(-d, n), slice(0, n + d)
        out[tuple(dst)] += w * a[tuple(src)]
    return out


def predict(b: Belief, sigma_process_cells: float = SIGMA_PROCESS) -> Belief:
    """Shift by the velocity, diffuse with Gaussian process noise, renormalize.

    Mass pushed past the border is dropped before renormalization.
    """
    vx, vz = b.velocity
    p = _shift_axis(b.p, -vx, 0)
    p = _shift_axis(p, vz, 1)
    k = gaussian_kernel(sigma_process_cells)
    p = _convolve_axis(_convolve_axis(p, k, 0), k, 1)
    s = p.sum()
    if not s > 0:
        raise BeliefLost("all belief mass left the grid")
    return Belief(b.spec, p / s, b.velocity)


def run_baseline(
    past_positions,
    spec: GridSpec,
    horizon: int,
    sigma_process_cells: float = SIGMA_PROCESS,
    sigma_obs_cells: float = SIGMA_OBS,
) -> np.ndarray:
    """``(horizon, 2)`` argmax positions of successive pure predictions."""
    b = init_from_observations(past_positions, spec, sigma_obs_cells)
    out = np.zeros((horizon, 2))
    for t in range(horizon):
        b = predict(b, sigma_process_cells)
        out[t] = b.argmax_position()
    return out
