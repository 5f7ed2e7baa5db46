"""On-disk datasets: a JSON manifest, one BEVG raster and one track table per scenario."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gridcore import CHANNELS, FrameStack, GridSpec, decode_raster_header, encode_raster
from .synthgen import Scenario, Trajectory, scenario_trajectory

FORMAT = "bevforecast-dataset"
VERSION = 1
MANIFEST = "manifest.json"


class DatasetError(ValueError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    def __init__(self, scenario_id, what):
        super().__init__(f"checksum mismatch in {what} of scenario {scenario_id!r}")
        self.scenario_id = scenario_id


def assign_folds(n: int, folds: int = 5) -> list[int]:
    """Round-robin fold index per scenario."""
    if folds < 1:
        raise ValueError("need at least one fold")
    return [i % folds for i in range(n)]


def split_tag(fold: int, folds: int, val_fold: int | None, test_fold: int | None) -> str:
    if fold == test_fold:
        return "test"
    if fold == val_fold:
        return "val"
    return "train"


def _track_table(traj: Trajectory) -> str:
    lines = ["agent\tt\tx\ty\theading"]
    agents = [("ego", traj.ego), ("target", traj.target)] + [(f"other{k}", o) for k, o in enumerate(traj.others)]
    for name, trk in agents:
        for t, row in zip(traj.times, trk):
            lines.append("\t".join([name, repr(float(t))] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def _parse_tracks(text: str):
    rows = [ln.split("\t") for ln in text.splitlines()[1:] if ln]
    agents: dict[str, list] = {}
    times: dict[str, list] = {}
    for name, t, x, y, h in rows:
        agents.setdefault(name, []).append((float(x), float(y), float(h)))
        times.setdefault(name, []).append(float(t))
    others = sorted((k for k in agents if k.startswith("other")), key=lambda k: int(k[5:]))
    return (
        np.asarray(times["ego"]),
        np.asarray(agents["ego"]),
        np.asarray(agents["target"]),
        tuple(np.asarray(agents[k]) for k in others),
    )


def write_dataset(items, path, folds: int = 5, val_fold: int | None = None, test_fold: int | None = None, spec: GridSpec | None = None):
    """Render (if needed) and persist scenarios or trajectories under ``path``.

    Returns the manifest dict.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    trajs = [scenario_trajectory(x, spec) if isinstance(x, Scenario) else x for x in items]
    if not trajs:
        raise DatasetError("no scenarios to write")
    grid = trajs[0].spec
    if any(t.spec != grid for t in trajs):
        raise DatasetError("all scenarios must share one grid spec")
    if test_fold is None:
        test_fold = folds - 1 if folds > 1 else None
    if val_fold is None:
        val_fold = folds - 2 if folds > 2 else None
    fold_ids = assign_folds(len(trajs), folds)
    frame_bytes = 4 * len(CHANNELS) * grid.size_cells**2
    entries = []
    for k, (traj, fold) in enumerate(zip(trajs, fold_ids)):
        stem = f"scenario_{k:04d}"
        chans = np.concatenate([f.channels for f in traj.frames], axis=0)
        raster = encode_raster(chans, grid.resolution_m)
        tracks = _track_table(traj).encode()
        (out / f"{stem}.bevg").write_bytes(raster)
        (out / f"{stem}.tracks.tsv").write_bytes(tracks)
        entries.append(
            {
                "id": traj.id,
                "meta": traj.meta,
                "frame_count": len(traj.frames),
                "raster_file": f"{stem}.bevg",
                "raster_bytes": len(raster),
                "frame_offsets": [16 + i * frame_bytes for i in range(len(traj.frames))],
                "raster_sha256": hashlib.sha256(raster).hexdigest(),
                "track_file": f"{stem}.tracks.tsv",
                "track_sha256": hashlib.sha256(tracks).hexdigest(),
                "fold": fold,
                "split": split_tag(fold, folds, val_fold, test_fold),
            }
        )
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "grid": {"size_cells": grid.size_cells, "resolution_m": grid.resolution_m},
        "channels": list(CHANNELS),
        "folds": folds,
        "val_fold": val_fold,
        "test_fold": test_fold,
        "scenario_count": len(entries),
        "scenarios": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass
class Dataset:
    manifest: dict
    trajectories: list

    @property
    def spec(self) -> GridSpec:
        g = self.manifest["grid"]
        return GridSpec(g["size_cells"], g["resolution_m"])

    def split(self, name: str) -> list:
        tags = {e["id"]: e["split"] for e in self.manifest["scenarios"]}
        return [t for t in self.trajectories if tags[t.id] == name]

    def fold(self, k: int) -> list:
        folds = {e["id"]: e["fold"] for e in self.manifest["scenarios"]}
        return [t for t in self.trajectories if folds[t.id] == k]


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise DatasetError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise DatasetVersionError(
            f"dataset {path} has format {manifest.get('format')!r} v{manifest.get('version')}, expected {FORMAT!r} v{VERSION}"
        )
    return manifest


def read_dataset(path) -> Dataset:
    root = Path(path)
    manifest = read_manifest(root)
    spec = GridSpec(manifest["grid"]["size_cells"], manifest["grid"]["resolution_m"])
    n = spec.size_cells
    trajs = []
    for e in manifest["scenarios"]:
        raster = (root / e["raster_file"]).read_bytes()
        if len(raster) < e["raster_bytes"]:
            raise DatasetTruncatedError(f"raster of scenario {e['id']!r} is {len(raster)} bytes, manifest says {e['raster_bytes']}")
        if hashlib.sha256(raster).hexdigest() != e["raster_sha256"]:
            raise DatasetChecksumError(e["id"], "raster")
        tracks = (root / e["track_file"]).read_bytes()
        if hashlib.sha256(tracks).hexdigest() != e["track_sha256"]:
            raise DatasetChecksumError(e["id"], "track table")
        side, res, count = decode_raster_header(raster)
        if side != n or count != len(CHANNELS) * e["frame_count"]:
            raise DatasetError(f"raster header of scenario {e['id']!r} disagrees with the manifest")
        times, ego, target, others = _parse_tracks(tracks.decode())
        frames = []
        for i, off in enumerate(e["frame_offsets"]):
            chans = np.frombuffer(raster, dtype="<f4", count=len(CHANNELS) * n * n, offset=off)
            frames.append(FrameStack(float(times[i]), spec, chans.reshape(len(CHANNELS), n, n).astype(np.float32), tuple(ego[i])))
        trajs.append(Trajectory(e["id"], frames, times, ego, target, others, dict(e.get("meta", {}))))
    return Dataset(manifest, trajs)
