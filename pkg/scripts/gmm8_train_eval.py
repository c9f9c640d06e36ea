"""Train a PINN drift on the 8-mode circular GMM, then sample it at several diffusivities.

    python3 scripts/gmm8_train_eval.py --iterations 1000 --out runs/gmm8
"""
import argparse
import json
from pathlib import Path

import numpy as np
import torch

from nets.drift import MlpDrift, ZeroDrift
from nets.potentials import MeanInterpolatedGmm, circle_means
from nets.sde import TimeGrid, integrate
from nets.ensemble import WalkerEnsemble
from nets.train import TrainConfig, evaluate_sampler, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--out", type=Path, default=Path("runs/gmm8"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    args.out.mkdir(parents=True, exist_ok=True)

    p = MeanInterpolatedGmm(circle_means(8, 10.0), sigma=1.0, base_sigma=2.0)
    model = MlpDrift(2, width=args.width, depth=3, seed=args.seed)
    cfg = TrainConfig(walkers=256, steps=30, iterations=args.iterations, learning_rate=2e-3)
    train(cfg, p, model, np.random.default_rng(args.seed), log_path=args.out / "train_log.jsonl",
          timing_path=args.out / "timing.jsonl", checkpoint_path=args.out / "checkpoint.npz",
          callback=lambda r: print(f"it {r['iteration']:5d}  loss {r['loss']:.3e}  ess {r['ess']:.3f}  T {r['T']:.2f}")
          if r["iteration"] % 50 == 0 else None)

    rows = []
    for eps, K in ((0.0, 100), (1.0, 200), (4.0, 400), (10.0, 1000)):
        res = evaluate_sampler(model, p, args.n, K, eps, np.random.default_rng(args.seed + 1))
        rows.append(dict(method="NETS-PINN", eps=eps, steps=K, ess=float(res.ess[-1]),
                         log_z=float(res.log_z[-1])))
    for eps, K in ((4.0, 400), (10.0, 1000)):
        rng = np.random.default_rng(args.seed + 2)
        res = integrate(WalkerEnsemble.sample_base(p, args.n, rng), p, ZeroDrift(2), TimeGrid.uniform(K), eps=eps,
                        scheme="langevin", rng=rng)
        rows.append(dict(method="AIS", eps=eps, steps=K, ess=float(res.ess[-1]), log_z=float(res.log_z[-1])))
    for r in rows:
        print(f"{r['method']:10s} eps={r['eps']:5.1f} K={r['steps']:5d}  ESS {r['ess']:.4f}  log Z {r['log_z']:+.4f}")
    (args.out / "eval.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
