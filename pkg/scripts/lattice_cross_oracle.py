"""Cross-check the lattice oracles: Fourier free-field sampler vs HMC, and AIS vs
thermodynamic integration on a small interacting anneal.

    python3 scripts/lattice_cross_oracle.py --L 4 8
"""
import argparse
import time

import numpy as np

from nets.drift import ZeroDrift
from nets.ensemble import WalkerEnsemble, log_mean_exp, log_partition_stderr
from nets.lattice import (LatticeSpec, Phi4Potential, free_field_two_point, free_field_variance, hmc_oracle,
                          sample_free_field, site_variance, thermodynamic_integration, two_point)
from nets.sde import TimeGrid, integrate


def free_theory(L, seed):
    s = LatticeSpec(L)
    rng = np.random.default_rng(seed)
    f = sample_free_field(s, rng, 20_000)
    hmc = hmc_oracle(s, 0.0, 400, rng, step_size=0.2, n_leapfrog=8, n_chains=64)
    print(f"L={L}: HMC acceptance {hmc.acceptance:.3f}")
    for name, fn, exact in (("Var", lambda z: site_variance(s, z), free_field_variance(s)),
                            ("G(1)", lambda z: two_point(s, z, 1), free_field_two_point(s, 1))):
        v = fn(f)
        hm, hse = hmc.chain_estimate(fn)
        print(f"  {name:5s} exact {exact:.5f}  Fourier {v.mean():.5f} +- {v.std() / np.sqrt(v.size):.5f}"
              f"  HMC {hm:.5f} +- {hse:.5f}")


def anneal(seed, n_nodes, K, n):
    s = LatticeSpec(4, m2_0=1.0, m2_1=-0.5, lam_1=1.0)
    p = Phi4Potential(s)
    t0 = time.perf_counter()
    ti, ti_se = thermodynamic_integration(s, np.random.default_rng(seed), n_nodes=n_nodes, n_samples=300,
                                          step_size=0.15, n_leapfrog=8)
    t1 = time.perf_counter()
    rng = np.random.default_rng(seed + 1)
    res = integrate(WalkerEnsemble.sample_base(p, n, rng), p, ZeroDrift(p.dim), TimeGrid.uniform(K), eps=1.0,
                    rng=rng)
    a = res.ensemble.log_weights
    t2 = time.perf_counter()
    print(f"L=4 anneal log Z1/Z0: TI {ti:.4f} +- {ti_se:.4f} ({t1 - t0:.0f}s), "
          f"AIS {log_mean_exp(a):.4f} +- {log_partition_stderr(a):.4f} ({t2 - t1:.0f}s), "
          f"terminal ESS {res.ess[-1]:.3f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--L", type=int, nargs="+", default=[4, 8])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--nodes", type=int, default=10)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--walkers", type=int, default=5000)
    args = ap.parse_args()
    for L in args.L:
        free_theory(L, args.seed + L)
    anneal(args.seed, args.nodes, args.steps, args.walkers)


if __name__ == "__main__":
    main()
