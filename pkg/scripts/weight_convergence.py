"""Step-size behaviour of the weight estimators on the moving Gaussian and the 1-d anneal.

Exact drift: A_1 is deterministic and its bias is first order in dt.
Zero drift with discrete-time weights: log Z is unbiased at every K.
"""
import numpy as np

from nets.drift import AnalyticGaussianDrift, ZeroDrift
from nets.ensemble import WalkerEnsemble, log_mean_exp, log_partition_stderr
from nets.potentials import MovingGaussianPotential, gaussian_anneal
from nets.sde import TimeGrid, integrate


def main():
    p = MovingGaussianPotential.linear(np.zeros(2), np.array([1.0, 0.0]), np.eye(2), 2 * np.eye(2))
    target = -(p.reference(1.0)[0] - p.reference(0.0)[0])
    rng = np.random.default_rng(0)
    print("exact drift, overdamped, eps = 1")
    for K in (50, 100, 200, 400, 800):
        res = integrate(WalkerEnsemble.sample_base(p, 500, rng), p, AnalyticGaussianDrift(p), TimeGrid.uniform(K),
                        eps=1.0, rng=rng)
        a = res.ensemble.log_weights
        print(f"  K={K:4d}  bias {a.mean() - target:+.5f}  std {a.std():.1e}")
    q = gaussian_anneal()
    print("zero drift, N(0,1) -> N(0,4), log Z exact", f"{0.5 * np.log(4):.4f}")
    for scheme in ("overdamped", "discrete"):
        for K in (10, 30, 100):
            res = integrate(WalkerEnsemble.sample_base(q, 100_000, rng), q, ZeroDrift(1), TimeGrid.uniform(K),
                            eps=1.0, scheme=scheme, rng=rng)
            a = res.ensemble.log_weights
            print(f"  {scheme:10s} K={K:4d}  log Z {log_mean_exp(a):.4f} +- {log_partition_stderr(a):.4f}")


if __name__ == "__main__":
    main()
