"""Sample one trained checkpoint over a grid of diffusivities and step counts.

    python3 scripts/eps_sweep.py --config configs/gmm8.yaml --checkpoint runs/gmm8/checkpoint.npz
"""
import argparse
import csv
import sys

import numpy as np
import torch

from nets.config import load_config, make_potential
from nets.drift import MlpDrift
from nets.train import evaluate_sampler


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", required=True)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.0, 1.0, 2.0, 4.0, 8.0])
    ap.add_argument("--steps", type=int, nargs="+", default=[100, 200, 400, 800])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg, _ = load_config(args.config)
    p = make_potential(cfg.potential)
    model, _ = MlpDrift.load(args.checkpoint)
    w = csv.writer(sys.stdout)
    w.writerow(["eps", "steps", "ess", "log_z"])
    for eps in args.eps:
        for K in args.steps:
            res = evaluate_sampler(model, p, args.n, K, eps, np.random.default_rng(args.seed))
            w.writerow([eps, K, f"{res.ess[-1]:.4f}", f"{res.log_z[-1]:.4f}"])


if __name__ == "__main__":
    main()
