"""Displacement metrics, horizon tables, ablation drivers and data association."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import markov
from .forecaster.rollout import RolloutResult, rollout, topk_positions
from .gridcore import CHANNELS, GridSpec, SemanticGrid
from .synthgen import ego_to_world, world_to_ego

HORIZONS_S = (1.0, 2.0, 3.0, 4.0)
REPORT_FORMAT = "bevforecast-report"
REPORT_VERSION = 1
_TIME_TOL = 1e-6


# -- metrics ----------------------------------------------------------------


def _as_track(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"{name} must be an (n, 2) array of positions, got shape {a.shape}")
    return a


def step_errors(pred, gt) -> np.ndarray:
    pred, gt = _as_track(pred, "pred"), _as_track(gt, "gt")
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predicted vs {len(gt)} ground-truth steps")
    return np.linalg.norm(pred - gt, axis=1)


def ade(pred, gt) -> float:
    """Mean Euclidean distance over aligned steps."""
    e = step_errors(pred, gt)
    if len(e) == 0:
        raise ValueError("ADE of an empty sequence is undefined")
    return float(e.mean())


def best_of_k_errors(pred_k, gt) -> np.ndarray:
    """Per-step distance to the closest of K hypotheses; ``pred_k`` is ``(K, T, 2)``."""
    pk = np.asarray(pred_k, dtype=np.float64)
    if pk.ndim != 3 or pk.shape[0] == 0:
        raise ValueError("best-of-K needs a non-empty (K, T, 2) hypothesis set")
    return np.min([step_errors(p, gt) for p in pk], axis=0)


def best_of_k_ade(pred_k, gt, whole_trajectory: bool = False) -> float:
    """Best-of-K ADE.

    Default: per-step minimum over hypotheses, averaged over steps. With
    ``whole_trajectory`` the hypothesis with the lowest ADE is scored instead.
    """
    pk = np.asarray(pred_k, dtype=np.float64)
    if pk.ndim != 3 or pk.shape[0] == 0:
        raise ValueError("best-of-K needs a non-empty (K, T, 2) hypothesis set")
    if whole_trajectory:
        return min(ade(p, gt) for p in pk)
    e = best_of_k_errors(pk, gt)
    if len(e) == 0:
        raise ValueError("ADE of an empty sequence is undefined")
    return float(e.mean())


# -- reports ----------------------------------------------------------------


@dataclass
class EvalReport:
    horizons_s: tuple
    ade: dict  # K -> {horizon_s: metres}
    per_frame: list  # top-1 per-step errors, trajectories in id order
    ks: tuple
    n_trajectories: int
    fingerprint: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_text(self) -> str:
        head = ["horizon"] + [f"{h:g}s" for h in self.horizons_s]
        rows = [[f"top-{k}"] + [f"{self.ade[k][h]:.3f}" for h in self.horizons_s] for k in self.ks]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = [f"{key}: {self.fingerprint[key]}" for key in sorted(self.fingerprint)]
        lines.append(f"trajectories: {self.n_trajectories}")
        for r in [head] + rows:
            lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_record(self) -> str:
        """Versioned ``key = value`` text; floats in round-trip repr."""
        out = [f"format = {REPORT_FORMAT}", f"version = {REPORT_VERSION}"]
        out += [f"fingerprint.{k} = {self.fingerprint[k]}" for k in sorted(self.fingerprint)]
        out.append(f"trajectories = {self.n_trajectories}")
        out.append("ks = " + ",".join(str(k) for k in self.ks))
        out.append("horizons_s = " + ",".join(repr(float(h)) for h in self.horizons_s))
        for k in self.ks:
            for h in self.horizons_s:
                out.append(f"ade.top{k}.{h:g}s = {self.ade[k][h]!r}")
        out.append("per_frame = " + ",".join(repr(float(e)) for e in self.per_frame))
        out += [f"note = {n}" for n in self.notes]
        return "\n".join(out) + "\n"

    @classmethod
    def from_record(cls, text: str) -> "EvalReport":
        kv, notes, fp = {}, [], {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition(" = ")
            if k == "note":
                notes.append(v)
            elif k.startswith("fingerprint."):
                fp[k[len("fingerprint.") :]] = v
            else:
                kv[k] = v
        if kv.get("format") != REPORT_FORMAT or kv.get("version") != str(REPORT_VERSION):
            raise ValueError(f"not a v{REPORT_VERSION} {REPORT_FORMAT} record")
        ks = tuple(int(x) for x in kv["ks"].split(",") if x)
        hs = tuple(float(x) for x in kv["horizons_s"].split(",") if x)
        table = {k: {h: float(kv[f"ade.top{k}.{h:g}s"]) for h in hs} for k in ks}
        per = [float(x) for x in kv["per_frame"].split(",") if x]
        return cls(hs, table, per, ks, int(kv["trajectories"]), fp, notes)


def _result_errors(r: RolloutResult, k: int) -> np.ndarray:
    if k > r.world.shape[1]:
        raise ValueError(f"rollout of {r.trajectory_id!r} holds {r.world.shape[1]} hypotheses, {k} requested")
    return best_of_k_errors(r.world[:, :k].transpose(1, 0, 2), r.gt_world)


def horizon_table(results, ks=(1,), horizons_s=HORIZONS_S, fingerprint=None) -> EvalReport:
    """Cumulative ADE over all steps within each horizon, pooled over trajectories."""
    results = sorted(results, key=lambda r: r.trajectory_id)
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("K values must be >= 1")
    notes = []
    reach = min((float(r.offsets[-1]) if r.horizon else 0.0) for r in results) if results else 0.0
    kept = []
    for h in horizons_s:
        if h <= reach + _TIME_TOL:
            kept.append(float(h))
        else:
            notes.append(f"horizon {h:g}s skipped: shortest rollout reaches {reach:.2f}s")
    table = {}
    for k in ks:
        errs = [(_result_errors(r, k), r.offsets) for r in results]
        table[k] = {}
        for h in kept:
            pooled = np.concatenate([e[o <= h + _TIME_TOL] for e, o in errs])
            table[k][h] = float(pooled.mean())
    per = np.concatenate([_result_errors(r, 1) for r in results]) if results else np.zeros(0)
    return EvalReport(tuple(kept), table, [float(e) for e in per], ks, len(results), dict(fingerprint or {}), notes)


# -- histogram --------------------------------------------------------------


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    threshold: float
    fraction_under: float

    def to_text(self) -> str:
        lines = ["bin_lo\tbin_hi\tcount"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{lo:.3f}\t{hi:.3f}\t{int(c)}")
        lines.append(f"# fraction within {self.threshold:g} m: {self.fraction_under!r}")
        return "\n".join(lines) + "\n"


def error_histogram(errors, bin_width: float, threshold: float = 2.0) -> Histogram:
    if not bin_width > 0:
        raise ValueError("bin width must be positive")
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        return Histogram(np.zeros(0), np.zeros(0, dtype=int), threshold, float("nan"))
    nbins = max(int(math.floor(e.max() / bin_width)) + 1, 1)
    edges = np.arange(nbins + 1) * bin_width
    idx = np.minimum((e // bin_width).astype(int), nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    return Histogram(edges, counts, threshold, float((e <= threshold).mean()))


# -- drivers ----------------------------------------------------------------


def _map_sorted(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _horizon_frames(traj, P: int, max_horizon_s: float) -> int:
    if len(traj) <= P:
        raise ValueError(f"trajectory {traj.id!r} has no frames after {P} preconditioning frames")
    t_last = traj.times[P - 1]
    n = int(np.sum(traj.times[P:] - t_last <= max_horizon_s + _TIME_TOL))
    return n


def evaluate_model(model, trajectories, k: int = 1, ablate=(), threads: int = 1, max_horizon_s: float = HORIZONS_S[-1]):
    """Rollouts for every trajectory, sorted by id. Read-only on ``model``."""
    P = model.cfg.precondition_frames
    trajs = sorted(trajectories, key=lambda t: t.id)

    def one(t):
        return rollout(model, t, _horizon_frames(t, P, max_horizon_s), k=k, ablate=ablate)

    return _map_sorted(one, trajs, threads)


def markov_rollout(traj, P: int, horizon: int, k: int = 1, spec: GridSpec | None = None, sigma_process=markov.SIGMA_PROCESS, sigma_obs=markov.SIGMA_OBS) -> RolloutResult:
    """Bayes-filter forecast in the ego frame at the last observed frame."""
    if spec is None:
        base = traj.spec
        spec = GridSpec(max(base.size_cells, 512), base.resolution_m)
    pose = traj.ego[P - 1]
    past = world_to_ego(traj.target[:P, :2], pose)
    b = markov.init_from_observations(past, spec, sigma_obs)
    pos = np.zeros((horizon, k, 2))
    scores = np.zeros((horizon, k))
    for s in range(horizon):
        b = markov.predict(b, sigma_process)
        tk = topk_positions(SemanticGrid(spec, b.p), k)
        n = len(tk.positions)
        pos[s, :n], scores[s, :n] = tk.positions, tk.scores
        pos[s, n:] = tk.positions[0]
    idx = np.arange(P, P + horizon)
    world = np.stack([ego_to_world(p, pose) for p in pos]) if horizon else np.zeros((0, k, 2))
    return RolloutResult(
        start_index=P,
        heatmaps=[],
        positions=pos,
        scores=scores,
        world=world,
        gt_world=traj.target[idx, :2].copy(),
        times=traj.times[idx].copy(),
        offsets=traj.times[idx] - traj.times[P - 1],
        trajectory_id=traj.id,
    )


def evaluate_markov(trajectories, P: int, k: int = 1, threads: int = 1, max_horizon_s: float = HORIZONS_S[-1], **kw):
    trajs = sorted(trajectories, key=lambda t: t.id)

    def one(t):
        return markov_rollout(t, P, _horizon_frames(t, P, max_horizon_s), k=k, **kw)

    return _map_sorted(one, trajs, threads)


def channel_ablation_run(model, trajectories, channel_name: str, ks=(1,), threads: int = 1, fingerprint=None) -> EvalReport:
    """Evaluate with ``channel_name`` zeroed in every model input."""
    if channel_name not in CHANNELS:
        raise ValueError(f"unknown channel {channel_name!r}; expected one of {CHANNELS}")
    results = evaluate_model(model, trajectories, k=max(ks), ablate=(channel_name,), threads=threads)
    fp = dict(fingerprint or {}, ablated_channel=channel_name)
    return horizon_table(results, ks, fingerprint=fp)


def frame_rate_ablation_run(model, trajectories, keep_ratios, ks=(1,), threads: int = 1, fingerprint=None):
    """``[(ratio, report)]`` in ascending ratio; whole trajectories are subsampled."""
    ratios = sorted(set(float(r) for r in keep_ratios))
    if not ratios:
        raise ValueError("no keep ratios given")
    out = []
    for r in ratios:
        if not 0 < r <= 1:
            raise ValueError(f"keep ratio must lie in (0, 1], got {r}")
        trajs = [t.subsample(r) if r < 1 else t for t in trajectories]
        results = evaluate_model(model, trajs, k=max(ks), threads=threads)
        out.append((r, horizon_table(results, ks, fingerprint=dict(fingerprint or {}, keep_ratio=repr(r)))))
    return out


def frame_rate_table(rows) -> str:
    hs = sorted({h for _, rep in rows for h in rep.horizons_s})
    lines = ["keep_ratio\t" + "\t".join(f"{h:g}s" for h in hs)]
    for r, rep in rows:
        cells = [f"{rep.ade[rep.ks[0]][h]:.3f}" if h in rep.ade[rep.ks[0]] else "-" for h in hs]
        lines.append(f"{r:g}\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


# -- association ------------------------------------------------------------


def associate(predicted, detections):
    """Index of the nearest detection (lowest index on ties) and its distance."""
    d = np.asarray(detections, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no detections to associate with")
    d = d.reshape(-1, 2)
    dist = np.linalg.norm(d - np.asarray(predicted, dtype=np.float64), axis=1)
    i = int(np.argmin(dist))
    return i, float(dist[i])


def frame_detections(traj, i: int):
    """World positions of all vehicles at frame ``i``: others first, the VoI last."""
    dets = [o[i, :2] for o in traj.others] + [traj.target[i, :2]]
    return np.stack(dets), len(dets) - 1


def association_accuracy(result: RolloutResult, traj) -> float:
    """Fraction of predicted steps whose nearest detection is the VoI."""
    if result.horizon == 0:
        raise ValueError(f"empty rollout for {traj.id!r}")
    hits = 0
    for s in range(result.horizon):
        dets, voi = frame_detections(traj, result.start_index + s)
        idx, _ = associate(result.world[s, 0], dets)
        hits += idx == voi
    return hits / result.horizon
