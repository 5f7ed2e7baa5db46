"""Metric bird's-eye-view occupancy grids.

Coordinate convention: the sensor sits at the center-left of the grid. The
forward axis Z grows with the column index, the lateral axis X (positive to
the sensor's left) grows toward row 0. The origin lies on the cell boundary
at ``(row = size/2, col = 0)``.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHANNELS = ("obstacles", "road", "lane", "target", "others")
RASTER_MAGIC = b"BEVG"
_HEADER = struct.Struct("<4sIfI")


@dataclass(frozen=True)
class GridSpec:
    size_cells: int = 512
    resolution_m: float = 0.25

    def __post_init__(self):
        if self.size_cells <= 0 or self.size_cells % 2:
            raise ValueError(f"size_cells must be a positive even integer, got {self.size_cells}")
        if not self.resolution_m > 0:
            raise ValueError(f"resolution_m must be > 0, got {self.resolution_m}")

    @property
    def extent_m(self) -> float:
        return self.size_cells * self.resolution_m

    def coarser(self) -> "GridSpec":
        return GridSpec(self.size_cells // 2, self.resolution_m * 2)

    def finer(self) -> "GridSpec":
        return GridSpec(self.size_cells * 2, self.resolution_m / 2)


@dataclass(frozen=True)
class CellIndex:
    row: int
    col: int


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    spec: GridSpec
    values: np.ndarray
    dropped: int = 0  # points truncated while rasterizing

    def __post_init__(self):
        n = self.spec.size_cells
        if self.values.shape != (n, n):
            raise ValueError(f"raster shape {self.values.shape} does not match spec side {n}")
        if self.values.size and not (self.values.min() >= 0.0 and self.values.max() <= 1.0):
            raise ValueError("grid values must lie in [0, 1]")

    def __eq__(self, other):
        return (
            isinstance(other, SemanticGrid)
            and self.spec == other.spec
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class FrameStack:
    """Five-channel intermediate representation for one timestep.

    ``channels`` is a ``(5, side, side)`` float32 array in :data:`CHANNELS`
    order; ``ego_pose`` is the sensor's world pose ``(x, y, heading)``.
    """

    timestamp_s: float
    spec: GridSpec
    channels: np.ndarray
    ego_pose: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        n = self.spec.size_cells
        if self.channels.shape != (len(CHANNELS), n, n):
            raise ValueError(f"channel array shape {self.channels.shape}, expected (5, {n}, {n})")

    def channel(self, name: str) -> SemanticGrid:
        return SemanticGrid(self.spec, self.channels[channel_index(name)])

    def __eq__(self, other):
        return (
            isinstance(other, FrameStack)
            and self.timestamp_s == other.timestamp_s
            and self.spec == other.spec
            and tuple(self.ego_pose) == tuple(other.ego_pose)
            and np.array_equal(self.channels, other.channels)
        )


def channel_index(name: str) -> int:
    try:
        return CHANNELS.index(name)
    except ValueError:
        raise ValueError(f"unknown channel {name!r}; expected one of {CHANNELS}") from None


def make_frame(timestamp_s: float, grids: dict, ego_pose=(0.0, 0.0, 0.0)) -> FrameStack:
    """Stack named :class:`SemanticGrid` objects; missing channels are zero."""
    specs = {g.spec for g in grids.values()}
    if len(specs) != 1:
        raise ValueError("all channels must share one GridSpec")
    spec = specs.pop()
    n = spec.size_cells
    chans = np.zeros((len(CHANNELS), n, n), dtype=np.float32)
    for name, g in grids.items():
        chans[channel_index(name)] = g.values
    return FrameStack(float(timestamp_s), spec, chans, tuple(float(v) for v in ego_pose))


# -- coordinates ------------------------------------------------------------


def metric_to_cell_arrays(x, z, spec: GridSpec):
    """Vectorized metric -> (row, col, in_bounds)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    res = spec.resolution_m
    col = np.floor(z / res).astype(np.int64)
    row = spec.size_cells // 2 - 1 - np.floor(x / res).astype(np.int64)
    inb = (row >= 0) & (row < spec.size_cells) & (col >= 0) & (col < spec.size_cells)
    return row, col, inb


def metric_to_cell(p: Sequence[float], spec: GridSpec) -> CellIndex | None:
    """Cell containing the point ``(X, Z)``, or ``None`` when it falls off the grid."""
    row, col, inb = metric_to_cell_arrays(p[0], p[1], spec)
    if not bool(inb):
        return None
    return CellIndex(int(row), int(col))


def cell_to_metric_arrays(row, col, spec: GridSpec):
    res = spec.resolution_m
    row = np.asarray(row)
    col = np.asarray(col)
    x = (spec.size_cells // 2 - 1 - row + 0.5) * res
    z = (col + 0.5) * res
    return x, z


def cell_to_metric(c: CellIndex, spec: GridSpec) -> tuple[float, float]:
    n = spec.size_cells
    if not (0 <= c.row < n and 0 <= c.col < n):
        raise IndexError(f"cell ({c.row}, {c.col}) outside a {n}x{n} grid")
    x, z = cell_to_metric_arrays(c.row, c.col, spec)
    return float(x), float(z)


def cell_centers(spec: GridSpec):
    """Metric ``(X, Z)`` of every cell center as two ``(n, n)`` arrays."""
    idx = np.arange(spec.size_cells)
    x, z = cell_to_metric_arrays(idx[:, None], idx[None, :], spec)
    return np.broadcast_to(x, (spec.size_cells,) * 2), np.broadcast_to(z, (spec.size_cells,) * 2)


# -- rasterization ----------------------------------------------------------


def rasterize_points(points: Iterable[Sequence[float]], spec: GridSpec) -> SemanticGrid:
    pts = np.asarray(list(points), dtype=np.float64).reshape(-1, 2)
    out = np.zeros((spec.size_cells,) * 2, dtype=np.float32)
    if len(pts) == 0:
        return SemanticGrid(spec, out)
    row, col, inb = metric_to_cell_arrays(pts[:, 0], pts[:, 1], spec)
    out[row[inb], col[inb]] = 1.0
    return SemanticGrid(spec, out, dropped=int((~inb).sum()))


def render_gaussian_target(center: Sequence[float], sigma_cells: float, spec: GridSpec) -> SemanticGrid:
    """Unnormalized Gaussian blob, peak 1 at the cell containing ``center``.

    The blob is centered on that cell so the argmax is exactly the cell.
    An off-grid center gives an all-zero grid and a ``RuntimeWarning``.
    """
    if not sigma_cells > 0:
        raise ValueError("sigma_cells must be > 0")
    n = spec.size_cells
    c = metric_to_cell(center, spec)
    if c is None:
        warnings.warn(f"target center {tuple(center)} is off the grid", RuntimeWarning, stacklevel=2)
        return SemanticGrid(spec, np.zeros((n, n), dtype=np.float32), dropped=1)
    return SemanticGrid(spec, gaussian_blob(c.row, c.col, sigma_cells, n))


def gaussian_blob(row: float, col: float, sigma_cells: float, n: int) -> np.ndarray:
    r = np.exp(-0.5 * ((np.arange(n) - row) / sigma_cells) ** 2)
    k = np.exp(-0.5 * ((np.arange(n) - col) / sigma_cells) ** 2)
    g = np.outer(r, k)
    g[g < 1e-4] = 0.0
    return g.astype(np.float32)


def rasterize_oriented_rects(rects, spec: GridSpec) -> np.ndarray:
    """Fill cells whose centers lie inside oriented rectangles.

    ``rects`` rows are ``(X, Z, heading, length, width)`` in the sensor frame,
    heading measured from +Z toward +X.
    """
    n = spec.size_cells
    out = np.zeros((n, n), dtype=np.float32)
    for cx, cz, hd, length, width in rects:
        reach = 0.5 * np.hypot(length, width)
        # bounding window in cell indices
        r0, c0, _ = metric_to_cell_arrays(cx + reach, cz - reach, spec)
        r1, c1, _ = metric_to_cell_arrays(cx - reach, cz + reach, spec)
        r0, r1 = max(int(r0), 0), min(int(r1), n - 1)
        c0, c1 = max(int(c0), 0), min(int(c1), n - 1)
        if r0 > r1 or c0 > c1:
            continue
        rows = np.arange(r0, r1 + 1)[:, None]
        cols = np.arange(c0, c1 + 1)[None, :]
        x, z = cell_to_metric_arrays(rows, cols, spec)
        dx, dz = x - cx, z - cz
        along = dz * np.cos(hd) + dx * np.sin(hd)
        across = -dz * np.sin(hd) + dx * np.cos(hd)
        inside = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)
        out[r0 : r1 + 1, c0 : c1 + 1][inside] = 1.0
    return out


def _cell_window(xmin, xmax, zmin, zmax, spec: GridSpec):
    """Index window ``(r0, r1, c0, c1)`` (inclusive) covering a metric box, or None."""
    n = spec.size_cells
    res = spec.resolution_m
    c0 = max(int(math.floor(zmin / res)), 0)
    c1 = min(int(math.floor(zmax / res)), n - 1)
    r0 = max(n // 2 - 1 - int(math.floor(xmax / res)), 0)
    r1 = min(n // 2 - 1 - int(math.floor(xmin / res)), n - 1)
    if r0 > r1 or c0 > c1:
        return None
    return r0, r1, c0, c1


def _window_centers(win, spec: GridSpec):
    r0, r1, c0, c1 = win
    return cell_to_metric_arrays(np.arange(r0, r1 + 1)[:, None], np.arange(c0, c1 + 1)[None, :], spec)


def rasterize_polyline_band(polyline, half_width: float, spec: GridSpec) -> np.ndarray:
    """Cells whose centers lie within ``half_width`` meters of a polyline."""
    n = spec.size_cells
    pts = np.asarray(polyline, dtype=np.float64)
    out = np.zeros((n, n), dtype=np.float32)
    hw2 = half_width * half_width
    for a, b in zip(pts[:-1], pts[1:]):
        win = _cell_window(
            min(a[0], b[0]) - half_width,
            max(a[0], b[0]) + half_width,
            min(a[1], b[1]) - half_width,
            max(a[1], b[1]) + half_width,
            spec,
        )
        if win is None:
            continue
        x, z = _window_centers(win, spec)
        d = b - a
        L2 = float(d @ d)
        if L2 == 0.0:
            t = 0.0
        else:
            t = np.clip(((x - a[0]) * d[0] + (z - a[1]) * d[1]) / L2, 0.0, 1.0)
        dist2 = (x - a[0] - t * d[0]) ** 2 + (z - a[1] - t * d[1]) ** 2
        r0, r1, c0, c1 = win
        out[r0 : r1 + 1, c0 : c1 + 1][dist2 <= hw2] = 1.0
    return out


def rasterize_polygons(polygons, spec: GridSpec) -> np.ndarray:
    """Even-odd fill of metric polygons (lists of ``(X, Z)`` vertices)."""
    n = spec.size_cells
    out = np.zeros((n, n), dtype=np.float32)
    for poly in polygons:
        p = np.asarray(poly, dtype=np.float64)
        win = _cell_window(p[:, 0].min(), p[:, 0].max(), p[:, 1].min(), p[:, 1].max(), spec)
        if win is None:
            continue
        x, z = _window_centers(win, spec)
        inside = np.zeros(np.broadcast(x, z).shape, dtype=bool)
        for (xa, za), (xb, zb) in zip(p, np.roll(p, -1, axis=0)):
            crosses = (za > z) != (zb > z)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = xa + (z - za) * (xb - xa) / (zb - za)
            inside ^= crosses & (x < xint)
        r0, r1, c0, c1 = win
        out[r0 : r1 + 1, c0 : c1 + 1][inside] = 1.0
    return out


# -- resizing ---------------------------------------------------------------


def downsample_half(g: SemanticGrid, method: str = "max") -> SemanticGrid:
    """Halve the side length with 2x2 pooling (``"max"`` or ``"mean"``)."""
    arr = downsample_array(g.values, method)
    return SemanticGrid(g.spec.coarser(), arr)


def downsample_array(a: np.ndarray, method: str = "max") -> np.ndarray:
    """2x2 pooling over the trailing two axes of ``a``."""
    h, w = a.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"downsampling needs even sides, got {h}x{w}")
    q = (a[..., 0::2, 0::2], a[..., 0::2, 1::2], a[..., 1::2, 0::2], a[..., 1::2, 1::2])
    if method == "max":
        return np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    if method == "mean":
        return ((q[0] + q[1] + q[2] + q[3]) / 4).astype(a.dtype)
    raise ValueError(f"unknown downsample method {method!r}")


def bilinear_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """``(2n, n)`` aligned-corners linear interpolation operator."""
    m = 2 * n
    R = np.zeros((m, n), dtype=dtype)
    if n == 1:
        R[:, 0] = 1.0
        return R
    src = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(src).astype(int), n - 2)
    frac = src - lo
    R[np.arange(m), lo] = 1.0 - frac
    R[np.arange(m), lo + 1] += frac
    return R


def upsample_array(a: np.ndarray) -> np.ndarray:
    """Aligned-corners bilinear x2 over the trailing two axes."""
    h, w = a.shape[-2:]
    Rh = bilinear_matrix(h, a.dtype)
    Rw = bilinear_matrix(w, a.dtype)
    return np.matmul(np.matmul(Rh, a), Rw.T)


def upsample_bilinear_double(g: SemanticGrid) -> SemanticGrid:
    up = np.clip(upsample_array(g.values.astype(np.float64)), 0.0, 1.0)
    return SemanticGrid(g.spec.finer(), up.astype(g.values.dtype))


def argmax_cell(values: np.ndarray) -> CellIndex:
    """Highest cell; ties go to the first in row-major order."""
    flat = int(np.argmax(values))
    n = values.shape[1]
    return CellIndex(flat // n, flat % n)


# -- ablation ---------------------------------------------------------------


def zero_channel(f: FrameStack, channel_name: str) -> FrameStack:
    idx = channel_index(channel_name)
    chans = f.channels.copy()
    chans[idx] = 0.0
    return replace(f, channels=chans)


# -- raster file ------------------------------------------------------------


def write_raster(path, channels: np.ndarray, resolution_m: float) -> None:
    """Write ``(C, n, n)`` channels as a BEVG raster file."""
    data = np.ascontiguousarray(channels, dtype="<f4")
    c, n, m = data.shape
    if n != m:
        raise ValueError("raster channels must be square")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RASTER_MAGIC, n, resolution_m, c))
        fh.write(data.tobytes())


def encode_raster(channels: np.ndarray, resolution_m: float) -> bytes:
    data = np.ascontiguousarray(channels, dtype="<f4")
    c, n, _ = data.shape
    return _HEADER.pack(RASTER_MAGIC, n, resolution_m, c) + data.tobytes()


def decode_raster_header(buf: bytes):
    if len(buf) < _HEADER.size:
        raise ValueError("raster shorter than its 16-byte header")
    magic, side, res, count = _HEADER.unpack_from(buf)
    if magic != RASTER_MAGIC:
        raise ValueError(f"bad raster magic {magic!r}")
    return side, res, count


def read_raster(path) -> tuple[np.ndarray, float]:
    """Read a BEVG raster file, returning ``(channels, resolution_m)``."""
    buf = Path(path).read_bytes()
    side, res, count = decode_raster_header(buf)
    need = _HEADER.size + 4 * side * side * count
    if len(buf) < need:
        raise ValueError(f"raster truncated: {len(buf)} bytes, expected {need}")
    arr = np.frombuffer(buf, dtype="<f4", count=side * side * count, offset=_HEADER.size)
    return arr.reshape(count, side, side).astype(np.float32), float(res)


__all__ = [
    "CHANNELS",
    "GridSpec",
    "CellIndex",
    "SemanticGrid",
    "FrameStack",
    "channel_index",
    "make_frame",
    "metric_to_cell",
    "metric_to_cell_arrays",
    "cell_to_metric",
    "cell_to_metric_arrays",
    "cell_centers",
    "rasterize_points",
    "render_gaussian_target",
    "gaussian_blob",
    "rasterize_oriented_rects",
    "rasterize_polyline_band",
    "rasterize_polygons",
    "downsample_half",
    "downsample_array",
    "bilinear_matrix",
    "upsample_array",
    "upsample_bilinear_double",
    "argmax_cell",
    "zero_channel",
    "write_raster",
    "read_raster",
    "encode_raster",
    "decode_raster_header",
]
