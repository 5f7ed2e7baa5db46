"""Preconditioned, truncated-BPTT training with a teacher-forcing warm-up."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..gridcore import SemanticGrid
from .model import Model
from .rollout import OBST, OTHERS, feedback_input, gt_heatmap, model_input, model_spec, to_frame_side


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-4
    clip_norm: float = 10.0
    teacher_forcing_epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    max_pred_frames: int | None = None  # cap on predicted frames per trajectory
    ablate: tuple = ()  # channels zeroed in every training input
    shuffle: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ablate", tuple(self.ablate))
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError(f"invalid training config: {self}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ade: float | None = None
    teacher_forced: bool = False


@dataclass
class TrainResult:
    model: Model
    curve: list = field(default_factory=list)
    opt: ad.OptimizerState | None = None
    stopped_early: bool = False


class _Prepared:
    """Per-trajectory arrays at model resolution, computed once per run."""

    def __init__(self, model: Model, traj, ablate):
        cfg = model.cfg
        self.traj = traj
        spec = model_spec(model, traj.spec)
        self.factor = traj.spec.size_cells // spec.size_cells
        self.inputs = np.stack([model_input(f, model, ablate) for f in traj.frames])
        raw = np.stack([model_input(f, model) for f in traj.frames])
        self.obstacles = raw[:, OBST : OBST + 1]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            gts = [gt_heatmap(traj, i, spec, cfg.target_sigma_cells) for i in range(len(traj))]
        self.gt = np.stack(gts)[:, None].astype(model.np_dtype)
        self.others_hold = traj.frames[cfg.precondition_frames - 1].channels[OTHERS]


def _window_loss(heats, gts, masks, lam, reduction="sample"):
    terms = []
    for h, g, m in zip(heats, gts, masks):
        term = ad.mse_loss(h, g, reduction)
        if lam:
            term = term + ad.safety_loss(h, m, per_sample=True) * lam
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _detach(state):
    return {k: (Tensor(h.data), Tensor(c.data)) for k, (h, c) in state.items()}


def _batch_step(model: Model, batch, opt, tf: bool, tcfg: TrainConfig):
    """Train on one batch of trajectories; returns the list of window losses."""
    cfg = model.cfg
    P, W = cfg.precondition_frames, cfg.bptt_window
    n_frames = min(len(b.traj) for b in batch)
    n_pred = n_frames - P
    if tcfg.max_pred_frames is not None:
        n_pred = min(n_pred, tcfg.max_pred_frames)
    if n_pred < 1:
        raise ValueError(f"trajectories {[b.traj.id for b in batch]} are too short for {P} preconditioning frames")
    ids = [b.traj.id for b in batch]
    inputs = np.stack([b.inputs[:n_frames] for b in batch], axis=1)  # (T, N, C, s, s)
    gts = np.stack([b.gt[:n_frames] for b in batch], axis=1)
    masks = np.stack([b.obstacles[:n_frames] for b in batch], axis=1)
    fine = batch[0].traj.spec
    sigma_fine = cfg.target_sigma_cells * batch[0].factor

    def fed_back(i, heat_data):
        return np.stack(
            [
                feedback_input(
                    model,
                    b.traj,
                    i,
                    SemanticGrid(fine, to_frame_side(heat_data[j, 0], fine.size_cells)),
                    b.others_hold,
                    sigma_fine,
                    tcfg.ablate,
                )
                for j, b in enumerate(batch)
            ]
        )

    # preconditioning only builds context; the tape starts at the first prediction
    state = model.initial_state(len(batch))
    with ad.no_grad():
        for t in range(P - 1):
            _, state = model.step(inputs[t], state)
    last = None
    losses = []
    step = 0
    while step < n_pred:
        span = min(W, n_pred - step)
        heats = []
        for s in range(span):
            i = P + step + s  # frame being predicted
            x = inputs[i - 1] if (tf or i == P) else fed_back(i - 1, last)
            heat, state = model.step(x, state)
            heats.append(heat)
            last = heat.data
        lo, hi = P + step, P + step + span
        loss = _window_loss(heats, gts[lo:hi], masks[lo:hi], cfg.lambda_safe, cfg.loss_reduction)
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} on trajectories {ids}")
        model.zero_grad()
        loss.backward()
        grads, _ = ad.clip_global_norm(model.grads(), tcfg.clip_norm)
        ad.adam_step(model.params, grads, opt)
        losses.append(value)
        step += span
        state = _detach(state)
    return losses


def train(
    model: Model,
    trajectories,
    tcfg: TrainConfig,
    val_fn=None,
    stop_fn=None,
    start_epoch: int = 0,
    opt: ad.OptimizerState | None = None,
    log=None,
) -> TrainResult:
    """Train ``model`` in place.

    ``val_fn(model, epoch)`` may return a validation ADE for the loss table;
    ``stop_fn(record)`` returning True ends training after that epoch.
    Epochs are numbered from ``start_epoch + 1`` so resumed runs continue
    the counter.
    """
    trajectories = sorted(trajectories, key=lambda t: t.id)
    if not trajectories:
        raise ValueError("no training trajectories")
    if opt is None:
        opt = ad.OptimizerState(lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    prepared = [_Prepared(model, t, tcfg.ablate) for t in trajectories]
    result = TrainResult(model, [], opt)
    for epoch in range(start_epoch + 1, start_epoch + tcfg.epochs + 1):
        rng = np.random.default_rng([tcfg.seed, epoch])
        order = rng.permutation(len(prepared)) if tcfg.shuffle else np.arange(len(prepared))
        tf = epoch <= tcfg.teacher_forcing_epochs
        losses = []
        for b in range(0, len(order), tcfg.batch_size):
            batch = [prepared[k] for k in order[b : b + tcfg.batch_size]]
            losses += _batch_step(model, batch, opt, tf, tcfg)
        rec = EpochRecord(epoch, float(np.mean(losses)), None, tf)
        if val_fn is not None:
            v = val_fn(model, epoch)
            rec.val_ade = None if v is None else float(v)
        result.curve.append(rec)
        if log is not None:
            log(rec)
        if stop_fn is not None and stop_fn(rec):
            result.stopped_early = True
            break
    return result


def loss_table(curve) -> str:
    lines = ["epoch\ttrain_loss\tval_ade"]
    for r in curve:
        v = "nan" if r.val_ade is None else repr(r.val_ade)
        lines.append(f"{r.epoch}\t{r.train_loss!r}\t{v}")
    return "\n".join(lines) + "\n"
