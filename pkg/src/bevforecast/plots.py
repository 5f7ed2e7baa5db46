"""Dependency-free plot output: binary PPM/PGM rasters and SVG overlays.

Nothing here embeds timestamps, so identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .gridcore import FrameStack, GridSpec, channel_index, metric_to_cell_arrays

ROAD_RGB = (90, 90, 90)
LANE_RGB = (235, 235, 235)
OBST_RGB = (140, 40, 40)
OTHERS_RGB = (200, 150, 40)
TARGET_RGB = (60, 170, 230)
GT_RGB = (40, 200, 70)
PRED_RGB = (240, 60, 220)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    g = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + g.tobytes())


def read_pnm(path) -> np.ndarray:
    """Inverse of :func:`write_ppm` / :func:`write_pgm` for their own output."""
    data = Path(path).read_bytes()
    magic, dims, maxv, body = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if magic == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    if magic == b"P5":
        return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    raise ValueError(f"unsupported PNM magic {magic!r}")


def _paint(img, mask, rgb):
    img[mask > 0.5] = rgb


def _track_cells(points, spec: GridSpec):
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    r, c, ok = metric_to_cell_arrays(p[:, 0], p[:, 1], spec)
    return r[ok], c[ok]


def scene_image(frame: FrameStack, pred=(), gt=(), scale: int = 2) -> np.ndarray:
    """RGB raster of the static channels with ground-truth and predicted tracks."""
    ch = frame.channels
    n = frame.spec.size_cells
    img = np.zeros((n, n, 3), dtype=np.uint8)
    _paint(img, ch[channel_index("road")], ROAD_RGB)
    _paint(img, ch[channel_index("lane")], LANE_RGB)
    _paint(img, ch[channel_index("obstacles")], OBST_RGB)
    _paint(img, ch[channel_index("others")], OTHERS_RGB)
    _paint(img, ch[channel_index("target")], TARGET_RGB)
    for pts, rgb in ((gt, GT_RGB), (pred, PRED_RGB)):
        r, c = _track_cells(pts, frame.spec)
        img[r, c] = rgb
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    return img


def heatmap_image(heat: np.ndarray, scale: int = 1) -> np.ndarray:
    g = np.clip(np.asarray(heat, dtype=np.float64), 0.0, 1.0)
    g = np.round(g * 255).astype(np.uint8)
    if scale > 1:
        g = g.repeat(scale, axis=0).repeat(scale, axis=1)
    return g


def _runs(mask):
    """Horizontal runs ``(row, col0, length)`` of a boolean mask."""
    out = []
    for r in range(mask.shape[0]):
        row = np.concatenate([[False], mask[r], [False]])
        d = np.flatnonzero(row[1:] != row[:-1])
        out += [(r, int(a), int(b - a)) for a, b in zip(d[::2], d[1::2])]
    return out


def scene_svg(frame: FrameStack, pred=(), gt=(), cell_px: int = 4) -> str:
    """Vector overlay; static channels as row runs, tracks as polylines."""
    n = frame.spec.size_cells
    size = n * cell_px
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">']
    parts.append(f'<rect width="{size}" height="{size}" fill="black"/>')
    for name, rgb in (("road", ROAD_RGB), ("lane", LANE_RGB), ("obstacles", OBST_RGB), ("others", OTHERS_RGB), ("target", TARGET_RGB)):
        color = "rgb({},{},{})".format(*rgb)
        for r, c0, ln in _runs(frame.channels[channel_index(name)] > 0.5):
            parts.append(f'<rect x="{c0 * cell_px}" y="{r * cell_px}" width="{ln * cell_px}" height="{cell_px}" fill="{color}"/>')
    for pts, rgb, label in ((gt, GT_RGB, "ground truth"), (pred, PRED_RGB, "prediction")):
        r, c = _track_cells(pts, frame.spec)
        if len(r) == 0:
            continue
        xy = " ".join(f"{(cc + 0.5) * cell_px:g},{(rr + 0.5) * cell_px:g}" for rr, cc in zip(r, c))
        color = "rgb({},{},{})".format(*rgb)
        parts.append(f'<polyline points="{xy}" fill="none" stroke="{color}" stroke-width="{cell_px / 2:g}"><title>{label}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def histogram_image(counts, width: int = 200, height: int = 100) -> np.ndarray:
    """Bar chart of ``counts`` as a grayscale raster (white bars on black)."""
    counts = np.asarray(counts, dtype=np.float64)
    img = np.zeros((height, width), dtype=np.uint8)
    if counts.size == 0 or counts.max() <= 0:
        return img
    edges = np.linspace(0, width, len(counts) + 1).astype(int)
    tops = np.round(counts / counts.max() * (height - 1)).astype(int)
    for (x0, x1), t in zip(zip(edges[:-1], edges[1:]), tops):
        if t > 0:
            img[height - t :, x0 : max(x1 - 1, x0 + 1)] = 255
    return img
