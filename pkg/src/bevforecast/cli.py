"""Command line: generate, train, eval, ablate, associate.

Settings resolve as config file < ``BEVF_*`` environment < flags. Every run
writes ``config.resolved.txt`` next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit, plots
from .autodiff import CheckpointError, OptimizerState, file_sha256, load_checkpoint, save_checkpoint
from .dataset import DatasetError, read_dataset, read_manifest, write_dataset
from .forecaster import ModelConfig, build_model, loss_table, train
from .forecaster.model import Model
from .forecaster.rollout import model_spec
from .forecaster.train import TrainConfig
from .gridcore import CHANNELS, GridSpec
from .presets import micro_scenario_config
from .synthgen import FAMILIES, InfeasibleConfig, ScenarioConfig, generate_scenario

ENV_PREFIX = "BEVF_"
OPT_PREFIX = "adam."


class UsageError(Exception):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _strs(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in _strs(s))


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


def _opt_str(s: str):
    return None if s.strip().lower() in ("", "none") else s.strip()


COMMON = {"seed": (int, 0), "threads": (int, 1)}
SCHEMAS = {
    "generate": {
        "out": (_opt_str, None),
        "scenarios": (int, 10),
        "preset": (str, "micro"),
        "families": (_strs, FAMILIES),
        "lane_side": (str, "right"),
        "grid_side": (_opt_int, None),
        "resolution_m": (float, 0.25),
        "frame_rate_hz": (float, 10.0),
        "n_others": (int, 0),
        "channel_dropout": (float, 0.0),
        "folds": (int, 5),
        "force": (_bool, False),
    },
    "train": {
        "data": (_opt_str, None),
        "out": (_opt_str, None),
        "variant": (str, "infer-skip"),
        "model": (str, "micro"),
        "grid_side": (_opt_int, None),
        "epochs": (int, 60),
        "lr": (float, 1e-4),
        "clip_norm": (float, 10.0),
        "batch_size": (int, 1),
        "teacher_forcing_epochs": (int, 10),
        "lambda_safe": (float, 0.1),
        "precondition_frames": (int, 20),
        "bptt_window": (int, 20),
        "max_pred_frames": (_opt_int, None),
        "ablate": (_strs, ()),
        "split": (str, "train"),
        "resume": (_opt_str, None),
    },
    "eval": {
        "data": (_opt_str, None),
        "out": (_opt_str, None),
        "checkpoint": (_opt_str, None),
        "method": (str, "model"),
        "top_k": (int, 1),
        "split": (str, "test"),
        "max_horizon_s": (float, 4.0),
        "precondition_frames": (int, 20),
        "sigma_process": (float, 0.5),
        "sigma_obs": (float, 1.0),
        "bin_width": (float, 0.25),
        "plots": (int, 3),
    },
    "ablate": {
        "data": (_opt_str, None),
        "out": (_opt_str, None),
        "checkpoint": (_opt_str, None),
        "channels": (_strs, ()),
        "frame_rates": (_floats, ()),
        "top_k": (int, 1),
        "split": (str, "test"),
    },
    "associate": {
        "data": (_opt_str, None),
        "out": (_opt_str, None),
        "checkpoint": (_opt_str, None),
        "method": (str, "model"),
        "split": (str, "test"),
        "precondition_frames": (int, 20),
    },
}
for _s in SCHEMAS.values():
    _s.update(COMMON)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return "none" if v is None else str(v)


def parse_config_text(text: str, schema: dict, origin: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{n}: expected 'key = value'")
        key, val = (x.strip() for x in line.split("=", 1))
        if key not in schema:
            raise UsageError(f"{origin}:{n}: unknown key {key!r}")
        try:
            out[key] = schema[key][0](val)
        except ValueError as e:
            raise UsageError(f"{origin}:{n}: bad value for {key!r}: {e}") from None
    return out


def resolve(command: str, config_path, env, flags: dict) -> dict:
    """Merge defaults, file, environment and flags for ``command``."""
    schema = SCHEMAS[command]
    cfg = {k: d for k, (_, d) in schema.items()}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise UsageError(f"config file {p} not found")
        cfg.update(parse_config_text(p.read_text(), schema, str(p)))
    known = set().union(*SCHEMAS.values())
    for name, val in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower()
        if key not in known:
            raise UsageError(f"unknown environment override {name}")
        if key in schema:
            try:
                cfg[key] = schema[key][0](val)
            except ValueError as e:
                raise UsageError(f"bad value in {name}: {e}") from None
    for key, val in flags.items():
        if val is not None:
            cfg[key] = val
    return cfg


def config_snapshot(command: str, cfg: dict) -> str:
    lines = [f"# resolved settings for '{command}'"]
    lines += [f"{k} = {_fmt(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def _prepare_out(cfg, command, force=False) -> Path:
    if not cfg["out"]:
        raise UsageError(f"{command} needs an output directory (--out)")
    out = Path(cfg["out"])
    if out.exists() and any(out.iterdir()) and not force:
        if command == "generate":
            raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(config_snapshot(command, cfg))
    return out


def _need(cfg, key, command):
    if not cfg.get(key):
        raise UsageError(f"{command} needs --{key.replace('_', '-')}")
    return cfg[key]


def _load_split(cfg):
    ds = read_dataset(_need(cfg, "data", "this command"))
    if cfg["split"] == "all":
        trajs = sorted(ds.trajectories, key=lambda t: t.id)
    else:
        trajs = ds.split(cfg["split"])
    if not trajs:
        raise DatasetError(f"split {cfg['split']!r} of {cfg['data']} is empty")
    return ds, trajs


def manifest_digest(path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()


# -- generate ---------------------------------------------------------------


def cmd_generate(cfg) -> int:
    for fam in cfg["families"]:
        if fam not in FAMILIES:
            raise UsageError(f"unknown family {fam!r}; expected some of {FAMILIES}")
    if cfg["scenarios"] < 1:
        raise UsageError("scenarios must be >= 1")
    if cfg["preset"] not in ("micro", "default"):
        raise UsageError("preset must be 'micro' or 'default'")
    side = cfg["grid_side"] or (128 if cfg["preset"] == "micro" else 512)
    grid = GridSpec(side, cfg["resolution_m"])
    common = dict(
        frame_rate_hz=cfg["frame_rate_hz"],
        n_others=cfg["n_others"],
        channel_dropout=cfg["channel_dropout"],
        grid=grid,
    )
    fams = cfg["families"]
    scen = []
    for k in range(cfg["scenarios"]):
        fam = fams[k % len(fams)]
        if cfg["preset"] == "micro":
            sc = micro_scenario_config(fam, cfg["lane_side"], **common)
        else:
            sc = ScenarioConfig(family=fam, lane_side=cfg["lane_side"], **common)
        scen.append(generate_scenario(sc, cfg["seed"] + k))
    out = _prepare_out(cfg, "generate", cfg["force"])
    for f in out.glob("scenario_*"):
        f.unlink()
    manifest = write_dataset(scen, out, folds=cfg["folds"])
    sizes = {}
    for e in manifest["scenarios"]:
        sizes[e["split"]] = sizes.get(e["split"], 0) + 1
    total = sum(e["frame_count"] for e in manifest["scenarios"])
    print(f"scenarios: {manifest['scenario_count']}")
    print("splits: " + ", ".join(f"{k}={sizes[k]}" for k in sorted(sizes)))
    print(f"frames: {total}")
    return 0


# -- train ------------------------------------------------------------------


def _model_config(cfg) -> ModelConfig:
    kw = dict(
        lambda_safe=cfg["lambda_safe"],
        precondition_frames=cfg["precondition_frames"],
        bptt_window=cfg["bptt_window"],
    )
    if cfg["model"] == "micro":
        return ModelConfig.micro(cfg["variant"], cfg["grid_side"] or 64, **kw)
    if cfg["model"] == "default":
        return ModelConfig(variant=cfg["variant"], input_side=cfg["grid_side"] or 256, **kw)
    raise UsageError("model must be 'micro' or 'default'")


def save_training_checkpoint(path, model: Model, opt: OptimizerState, epoch: int, grid: GridSpec, extra=None) -> str:
    arrays = dict(model.state_dict())
    for name in model.params:
        if name in opt.m:
            arrays[f"{OPT_PREFIX}m.{name}"] = opt.m[name]
            arrays[f"{OPT_PREFIX}v.{name}"] = opt.v[name]
    meta = {
        "model": model.cfg.to_dict(),
        "epoch": epoch,
        "grid": {"size_cells": grid.size_cells, "resolution_m": grid.resolution_m},
        "optimizer": {"lr": opt.lr, "step": opt.step, "clip_norm": opt.clip_norm},
    }
    meta.update(extra or {})
    return save_checkpoint(path, arrays, meta)


def load_model_checkpoint(path):
    """``(model, optimizer_state, meta)`` from a training checkpoint."""
    arrays, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CheckpointError(f"{path} carries no model configuration")
    cfg = ModelConfig.from_dict(meta["model"])
    model = build_model(cfg, 0)
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith(OPT_PREFIX)})
    o = meta.get("optimizer", {})
    opt = OptimizerState(lr=o.get("lr", 1e-4), clip_norm=o.get("clip_norm", 10.0), step=o.get("step", 0))
    for name in model.params:
        if f"{OPT_PREFIX}m.{name}" in arrays:
            opt.m[name] = arrays[f"{OPT_PREFIX}m.{name}"].astype(model.np_dtype)
            opt.v[name] = arrays[f"{OPT_PREFIX}v.{name}"].astype(model.np_dtype)
    return model, opt, meta


def _check_grid(model: Model, meta: dict, spec: GridSpec, path):
    g = meta.get("grid")
    if g and (g["size_cells"], g["resolution_m"]) != (spec.size_cells, spec.resolution_m):
        raise DatasetError(
            f"checkpoint {path} was trained on a {g['size_cells']} x {g['resolution_m']} m grid, "
            f"dataset uses {spec.size_cells} x {spec.resolution_m} m"
        )
    model_spec(model, spec)


def cmd_train(cfg) -> int:
    for ch in cfg["ablate"]:
        if ch not in CHANNELS:
            raise UsageError(f"unknown channel {ch!r}")
    ds, trajs = _load_split(cfg)
    if cfg["resume"]:
        model, opt, meta = load_model_checkpoint(cfg["resume"])
        _check_grid(model, meta, ds.spec, cfg["resume"])
        start = int(meta.get("epoch", 0))
    else:
        model = build_model(_model_config(cfg), cfg["seed"])
        model_spec(model, ds.spec)
        opt, start = None, 0
    tcfg = TrainConfig(
        epochs=cfg["epochs"],
        lr=cfg["lr"],
        clip_norm=cfg["clip_norm"],
        teacher_forcing_epochs=cfg["teacher_forcing_epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        max_pred_frames=cfg["max_pred_frames"],
        ablate=cfg["ablate"],
    )
    out = _prepare_out(cfg, "train")
    if opt is None:
        opt = OptimizerState(lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    log_path = out / "loss.tsv"
    prior = ""
    if cfg["resume"] and log_path.exists():
        prior = log_path.read_text()
    result = train(
        model,
        trajs,
        tcfg,
        start_epoch=start,
        opt=opt,
        log=lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.6f}", flush=True),
    )
    table = loss_table(result.curve)
    if prior:
        table = prior + table.split("\n", 1)[1]
    log_path.write_text(table)
    epoch = result.curve[-1].epoch if result.curve else start
    sha = save_training_checkpoint(
        out / "checkpoint.bevp",
        model,
        opt,
        epoch,
        ds.spec,
        {"dataset": manifest_digest(cfg["data"]), "parameters": model.parameter_count},
    )
    print(f"parameters: {model.parameter_count}")
    print(f"checkpoint: {out / 'checkpoint.bevp'} sha256 {sha}")
    return 0


# -- eval -------------------------------------------------------------------


def _ks(top_k: int):
    if top_k < 1:
        raise UsageError("top-k must be >= 1")
    return (1,) if top_k == 1 else (1, top_k)


def _model_for_eval(cfg, spec):
    path = _need(cfg, "checkpoint", "model evaluation")
    model, _, meta = load_model_checkpoint(path)
    _check_grid(model, meta, spec, path)
    return model, file_sha256(path)


def _fingerprint(cfg, method, sha=None, model=None):
    fp = {"method": method, "split": cfg["split"], "dataset": manifest_digest(cfg["data"])}
    if sha:
        fp["checkpoint_sha256"] = sha
    if model is not None:
        fp["variant"] = model.cfg.variant
    return fp


def _write_report(out: Path, stem: str, rep: evalkit.EvalReport):
    (out / f"{stem}.txt").write_text(rep.to_text())
    (out / f"{stem}.rec").write_text(rep.to_record())


def cmd_eval(cfg) -> int:
    ks = _ks(cfg["top_k"])
    ds, trajs = _load_split(cfg)
    if cfg["method"] == "model":
        model, sha = _model_for_eval(cfg, ds.spec)
        results = evalkit.evaluate_model(model, trajs, k=max(ks), threads=cfg["threads"], max_horizon_s=cfg["max_horizon_s"])
        fp = _fingerprint(cfg, "model", sha, model)
    elif cfg["method"] == "markov":
        results = evalkit.evaluate_markov(
            trajs,
            cfg["precondition_frames"],
            k=max(ks),
            threads=cfg["threads"],
            max_horizon_s=cfg["max_horizon_s"],
            sigma_process=cfg["sigma_process"],
            sigma_obs=cfg["sigma_obs"],
        )
        fp = _fingerprint(cfg, "markov")
    else:
        raise UsageError("method must be 'model' or 'markov'")
    horizons = tuple(h for h in evalkit.HORIZONS_S if h <= cfg["max_horizon_s"] + 1e-9)
    rep = evalkit.horizon_table(results, ks, horizons, fp)
    out = _prepare_out(cfg, "eval")
    _write_report(out, "report", rep)
    hist = evalkit.error_histogram(rep.per_frame, cfg["bin_width"])
    (out / "histogram.tsv").write_text(hist.to_text())
    plots.write_pgm(out / "histogram.pgm", plots.histogram_image(hist.counts))
    by_id = {t.id: t for t in trajs}
    for n, r in enumerate(results[: cfg["plots"]]):
        t = by_id[r.trajectory_id]
        start = t.frames[r.start_index - 1]
        pose = t.ego[r.start_index - 1]
        from .synthgen import world_to_ego

        pred = world_to_ego(r.world[:, 0], pose) if r.horizon else np.zeros((0, 2))
        gt = world_to_ego(r.gt_world, pose) if r.horizon else np.zeros((0, 2))
        plots.write_ppm(out / f"overlay_{n:02d}.ppm", plots.scene_image(start, pred, gt))
        (out / f"overlay_{n:02d}.svg").write_text(plots.scene_svg(start, pred, gt))
    print(rep.to_text(), end="")
    return 0


# -- ablate -----------------------------------------------------------------


def cmd_ablate(cfg) -> int:
    if not cfg["channels"] and not cfg["frame_rates"]:
        raise UsageError("nothing to ablate: give --channels and/or --frame-rates")
    for ch in cfg["channels"]:
        if ch not in CHANNELS:
            raise UsageError(f"unknown channel {ch!r}")
    ks = _ks(cfg["top_k"])
    ds, trajs = _load_split(cfg)
    model, sha = _model_for_eval(cfg, ds.spec)
    fp = _fingerprint(cfg, "model", sha, model)
    out = _prepare_out(cfg, "ablate")
    base = evalkit.horizon_table(evalkit.evaluate_model(model, trajs, k=max(ks), threads=cfg["threads"]), ks, fingerprint=fp)
    _write_report(out, "baseline", base)
    for ch in cfg["channels"]:
        rep = evalkit.channel_ablation_run(model, trajs, ch, ks, cfg["threads"], fp)
        _write_report(out, f"ablation_{ch}", rep)
        print(f"without {ch}:")
        print(rep.to_text(), end="")
    if cfg["frame_rates"]:
        rows = evalkit.frame_rate_ablation_run(model, trajs, cfg["frame_rates"], ks, cfg["threads"], fp)
        for r, rep in rows:
            _write_report(out, f"frame_rate_{r:g}", rep)
        table = evalkit.frame_rate_table(rows)
        (out / "frame_rates.tsv").write_text(table)
        print(table, end="")
    return 0


# -- associate --------------------------------------------------------------


def cmd_associate(cfg) -> int:
    ds, trajs = _load_split(cfg)
    if not any(t.others for t in trajs):
        raise DatasetError(f"no scenario in split {cfg['split']!r} has other vehicles; association needs them")
    if cfg["method"] == "model":
        model, _ = _model_for_eval(cfg, ds.spec)
        results = evalkit.evaluate_model(model, trajs, threads=cfg["threads"])
    elif cfg["method"] == "markov":
        results = evalkit.evaluate_markov(trajs, cfg["precondition_frames"], threads=cfg["threads"])
    else:
        raise UsageError("method must be 'model' or 'markov'")
    by_id = {t.id: t for t in trajs}
    lines = ["scenario\tvehicles\tframes\taccuracy"]
    hits = frames = 0
    for r in results:
        t = by_id[r.trajectory_id]
        acc = evalkit.association_accuracy(r, t)
        hits += acc * r.horizon
        frames += r.horizon
        lines.append(f"{t.id}\t{1 + len(t.others)}\t{r.horizon}\t{acc:.4f}")
    lines.append(f"overall\t-\t{frames}\t{hits / frames:.4f}")
    text = "\n".join(lines) + "\n"
    out = _prepare_out(cfg, "associate")
    (out / "association.tsv").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "associate": cmd_associate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevforecast", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="text file of 'key = value' lines")
        for key, (conv, default) in sorted(schema.items()):
            flag = "--" + key.replace("_", "-")
            if conv is _bool:
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                sp.add_argument(flag, dest=key, type=conv, default=None, help=f"default: {_fmt(default)}")
    return p


def main(argv=None, env=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = resolve(args.command, args.config, os.environ if env is None else env, flags)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (InfeasibleConfig, DatasetError, CheckpointError, FloatingPointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
