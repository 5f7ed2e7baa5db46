"""Overfit the micro INFER-Skip model on eight scenarios and print the curve.

    python3 scripts/overfit_micro.py --scenarios 8 --max-epochs 500
"""

import argparse
import time

import numpy as np

from bevforecast import evalkit as ek
from bevforecast.forecaster import TrainConfig, build_model, rollout, train
from bevforecast.presets import micro_model_config, micro_trajectories


def train_ade_cells(model, trajs, horizon=10, coarse_m=0.5):
    errs = [ek.ade(r.world[:, 0], r.gt_world) for r in (rollout(model, t, horizon) for t in trajs)]
    return float(np.mean(errs)) / coarse_m


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenarios", type=int, default=8)
    ap.add_argument("--max-epochs", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target", type=float, default=2.0, help="stop once train ADE (coarse cells) drops below this")
    args = ap.parse_args()

    trajs = micro_trajectories(args.scenarios, seed=args.seed)
    model = build_model(micro_model_config(), args.seed)
    t0 = time.perf_counter()

    def val(m, epoch):
        if epoch % 10:
            return None
        a = train_ade_cells(m, trajs)
        print(f"epoch {epoch:4d}  train ADE {a:.2f} cells  {time.perf_counter() - t0:.0f}s", flush=True)
        return a

    res = train(
        model,
        trajs,
        TrainConfig(epochs=args.max_epochs, max_pred_frames=10, seed=args.seed),
        val_fn=val,
        stop_fn=lambda r: r.val_ade is not None and r.val_ade < args.target,
    )
    print("epoch\tloss")
    for r in res.curve:
        print(f"{r.epoch}\t{r.train_loss:.6g}")


if __name__ == "__main__":
    main()
