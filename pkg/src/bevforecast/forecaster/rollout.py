"""Test-time procedure: precondition, predict, feed back, extract positions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..gridcore import (
    CHANNELS,
    FrameStack,
    GridSpec,
    SemanticGrid,
    cell_to_metric_arrays,
    channel_index,
    downsample_array,
    gaussian_blob,
    metric_to_cell,
    upsample_array,
)
from ..synthgen import StaticChannels, Trajectory, ego_to_world
from .model import Model

OBST, ROAD, LANE, TARGET, OTHERS = (channel_index(c) for c in CHANNELS)


def model_spec(model: Model, frame_spec: GridSpec) -> GridSpec:
    side = model.cfg.input_side
    factor = frame_spec.size_cells // side
    if factor < 1 or side * factor != frame_spec.size_cells or factor & (factor - 1):
        raise ValueError(f"frame side {frame_spec.size_cells} is not a power-of-two multiple of model side {side}")
    return GridSpec(side, frame_spec.resolution_m * factor)


def to_model_side(channels: np.ndarray, side: int) -> np.ndarray:
    """Max-pool ``(..., n, n)`` rasters down to ``side``."""
    while channels.shape[-1] > side:
        channels = downsample_array(channels, "max")
    if channels.shape[-1] != side:
        raise ValueError(f"cannot resize side {channels.shape[-1]} to {side}")
    return channels


def to_frame_side(heat: np.ndarray, side: int) -> np.ndarray:
    """Bilinear x2 (aligned corners) until the heatmap reaches ``side``."""
    heat = heat.astype(np.float64)
    while heat.shape[-1] < side:
        heat = upsample_array(heat)
    return np.clip(heat, 0.0, 1.0)


def model_input(frame: FrameStack, model: Model, ablate=()) -> np.ndarray:
    x = to_model_side(frame.channels, model.cfg.input_side).astype(model.np_dtype, copy=True)
    for name in ablate:
        x[channel_index(name)] = 0.0
    return x


def prior_from_frame(frame: FrameStack) -> StaticChannels:
    c = frame.channels
    return StaticChannels(road=c[ROAD], lane=c[LANE], obstacles=c[OBST])


# -- stepping ---------------------------------------------------------------


def precondition(model: Model, frames, ablate=()):
    """Run the observed frames through the network from a zero state.

    Returns ``(state, heatmap)`` where ``heatmap`` is the ``(1, side, side)``
    output after the last observed frame: the first prediction.
    """
    if len(frames) == 0:
        raise ValueError("preconditioning needs at least one frame")
    state = model.initial_state(1)
    heat = None
    with ad.no_grad():
        for f in frames:
            x = f if isinstance(f, np.ndarray) else model_input(f, model, ablate)
            h, state = model.step(x[None], state)
            heat = h
    return state, heat.data[0]


def predict_step(model: Model, state, frame, ablate=()):
    """One step: ``(heatmap (1, side, side), new_state)``."""
    x = frame if isinstance(frame, np.ndarray) else model_input(frame, model, ablate)
    with ad.no_grad():
        h, state = model.step(x[None], state)
    return h.data[0], state


def argmax_position(heat: SemanticGrid):
    """Metric center of the highest cell (row-major first on ties)."""
    flat = int(np.argmax(heat.values))
    r, c = divmod(flat, heat.spec.size_cells)
    x, z = cell_to_metric_arrays(r, c, heat.spec)
    return float(x), float(z)


def compose_channels(static: StaticChannels, target: np.ndarray, others: np.ndarray) -> np.ndarray:
    chans = np.empty((len(CHANNELS),) + target.shape, dtype=np.float32)
    chans[OBST] = static.obstacles
    chans[ROAD] = static.road
    chans[LANE] = static.lane
    chans[TARGET] = target
    chans[OTHERS] = others
    return chans


def target_from_heatmap(heat: SemanticGrid, spec: GridSpec, sigma_cells: float) -> np.ndarray:
    """Gaussian blob on ``spec`` at the heatmap's argmax position."""
    pos = argmax_position(heat)
    cell = metric_to_cell(pos, spec)
    if cell is None:
        return np.zeros((spec.size_cells,) * 2, dtype=np.float32)
    return gaussian_blob(cell.row, cell.col, sigma_cells, spec.size_cells)


def construct_next_input(
    prev: FrameStack,
    heatmap: SemanticGrid,
    prior: StaticChannels | None,
    timestamp: float | None = None,
    ego_pose=None,
    sigma_cells: float = 2.0,
) -> FrameStack:
    """Next representation from a predicted heatmap and prior static maps.

    Target: re-rendered blob at the heatmap argmax. Road, lane and obstacles:
    the prior for the new timestamp. Others: held from ``prev``.
    """
    if prior is None:
        raise ValueError("construct_next_input needs prior road/lane/obstacle channels")
    target = target_from_heatmap(heatmap, prev.spec, sigma_cells)
    chans = compose_channels(prior, target, prev.channels[OTHERS])
    return FrameStack(
        prev.timestamp_s if timestamp is None else float(timestamp),
        prev.spec,
        chans,
        prev.ego_pose if ego_pose is None else tuple(float(v) for v in ego_pose),
    )


def feedback_input(model: Model, traj: Trajectory, i: int, heat_fine: SemanticGrid, others_hold, sigma_fine: float, ablate=()):
    """Model-side input for frame ``i`` built from a predicted heatmap.

    Shared by training and test-time rollout so both feed back identically.
    """
    fine = traj.spec
    target = target_from_heatmap(heat_fine, fine, sigma_fine)
    chans = compose_channels(prior_from_frame(traj.frames[i]), target, others_hold)
    return model_input(FrameStack(float(traj.times[i]), fine, chans, tuple(traj.ego[i])), model, ablate)


# -- position extraction ----------------------------------------------------


@dataclass
class TopK:
    positions: np.ndarray  # (k, 2) metric X, Z
    scores: np.ndarray
    cells: list
    short: bool  # fewer than K positive cells were available


def topk_positions(heatmap: SemanticGrid, k: int, nms_radius: float = 2.0) -> TopK:
    """K highest cells, each suppressing a disc of ``nms_radius`` cells around it."""
    if k < 1:
        raise ValueError("K must be >= 1")
    vals = heatmap.values.astype(np.float64, copy=True)
    n = heatmap.spec.size_cells
    R = int(np.floor(nms_radius))
    dr, dc = np.mgrid[-R : R + 1, -R : R + 1]
    disc = dr**2 + dc**2 <= nms_radius**2
    cells, scores = [], []
    for _ in range(k):
        flat = int(np.argmax(vals))
        v = vals.flat[flat]
        if not v > 0:
            break
        r, c = divmod(flat, n)
        cells.append((r, c))
        scores.append(v)
        rr, cc = r + dr[disc], c + dc[disc]
        ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
        vals[rr[ok], cc[ok]] = -np.inf
    if cells:
        rows, cols = np.array(cells).T
        x, z = cell_to_metric_arrays(rows, cols, heatmap.spec)
        pos = np.stack([x, z], axis=1).astype(np.float64)
    else:
        pos = np.zeros((0, 2))
    return TopK(pos, np.asarray(scores), cells, len(cells) < k)


# -- rollout ----------------------------------------------------------------


@dataclass
class RolloutResult:
    start_index: int
    heatmaps: list  # (1, side, side) arrays, one per predicted step
    positions: np.ndarray  # (H, K, 2) ego-frame metric positions
    scores: np.ndarray  # (H, K)
    world: np.ndarray  # (H, K, 2)
    gt_world: np.ndarray  # (H, 2)
    times: np.ndarray  # (H,) absolute timestamps
    offsets: np.ndarray  # (H,) seconds since the last observed frame
    trajectory_id: str = ""

    @property
    def horizon(self) -> int:
        return len(self.offsets)


def _pad_k(tk: TopK, k: int):
    pos, sc = tk.positions, tk.scores
    if len(pos) == 0:
        pos, sc = np.zeros((1, 2)), np.zeros(1)
    if len(pos) < k:
        # repeat the best hypothesis; harmless under a best-of-K minimum
        extra = k - len(pos)
        pos = np.concatenate([pos, np.repeat(pos[:1], extra, axis=0)])
        sc = np.concatenate([sc, np.zeros(extra)])
    return pos, sc


def rollout(model: Model, traj: Trajectory, horizon: int, k: int = 1, ablate=(), nms_radius: float = 2.0) -> RolloutResult:
    """Autoregressive forecast of ``horizon`` frames after preconditioning."""
    P = model.cfg.precondition_frames
    if len(traj) < P:
        raise ValueError(f"trajectory {traj.id!r} has {len(traj)} frames, preconditioning needs {P}")
    if P + horizon > len(traj):
        raise ValueError(
            f"horizon {horizon} exceeds prior availability: {len(traj) - P} future frames in {traj.id!r}"
        )
    fine = traj.spec
    mspec = model_spec(model, fine)
    factor = fine.size_cells // mspec.size_cells
    sigma_fine = model.cfg.target_sigma_cells * factor
    H = horizon
    heatmaps, positions, scores = [], np.zeros((H, k, 2)), np.zeros((H, k))
    if H == 0:
        empty = np.zeros((0, k, 2))
        return RolloutResult(P, [], empty, np.zeros((0, k)), empty, np.zeros((0, 2)), np.zeros(0), np.zeros(0), traj.id)
    state, heat = precondition(model, traj.frames[:P], ablate)
    others_hold = traj.frames[P - 1].channels[OTHERS]
    for step in range(H):
        i = P + step
        heatmaps.append(heat)
        up = SemanticGrid(fine, to_frame_side(heat[0], fine.size_cells))
        positions[step], scores[step] = _pad_k(topk_positions(up, k, nms_radius), k)
        if step + 1 < H:
            nxt = feedback_input(model, traj, i, up, others_hold, sigma_fine, ablate)
            heat, state = predict_step(model, state, nxt)
    idx = np.arange(P, P + H)
    world = np.stack([ego_to_world(positions[s], traj.ego[i]) for s, i in enumerate(idx)])
    return RolloutResult(
        start_index=P,
        heatmaps=heatmaps,
        positions=positions,
        scores=scores,
        world=world,
        gt_world=traj.target[idx, :2].copy(),
        times=traj.times[idx].copy(),
        offsets=traj.times[idx] - traj.times[P - 1],
        trajectory_id=traj.id,
    )


def gt_heatmap(traj: Trajectory, i: int, spec: GridSpec, sigma_cells: float) -> np.ndarray:
    """Training target: Gaussian at the true target position in the ego frame of frame ``i``."""
    pos = traj.target_in_ego(i)
    cell = metric_to_cell(pos, spec)
    if cell is None:
        warnings.warn(f"target of {traj.id!r} is off the grid at frame {i}", RuntimeWarning, stacklevel=2)
        return np.zeros((spec.size_cells,) * 2, dtype=np.float32)
    return gaussian_blob(cell.row, cell.col, sigma_cells, spec.size_cells)
