"""Sample-quality metrics and run reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .ensemble import ess, log_mean_exp, log_partition_stderr

EXACT_W2_MAX = 4096
SINKHORN_REG = 0.05  # relative to the median squared distance
SINKHORN_TOL = 1e-9
SINKHORN_MAX_ITER = 10_000


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("empty sample set")
    return a, b


def sinkhorn_w2(a, b, reg: float = SINKHORN_REG, tol: float = SINKHORN_TOL,
                max_iter: int = SINKHORN_MAX_ITER) -> float:
    """Entropic approximation of W2 with uniform marginals (log-domain Sinkhorn).

    ``reg`` is scaled by the median squared pairwise distance. Returns the
    square root of the transport cost of the regularized plan, which
    overestimates the exact W2.
    """
    a, b = _pair(a, b)
    C = cdist(a, b, "sqeuclidean")
    lam = reg * max(float(np.median(C)), 1e-12)
    n, m = C.shape
    log_mu, log_nu = -np.log(n) * np.ones(n), -np.log(m) * np.ones(m)
    f, g = np.zeros(n), np.zeros(m)
    for _ in range(max_iter):
        f = lam * (log_mu - logsumexp((g[None, :] - C) / lam, axis=1))
        g_new = lam * (log_nu - logsumexp((f[:, None] - C) / lam, axis=0))
        if np.max(np.abs(g_new - g)) < tol * lam:
            g = g_new
            break
        g = g_new
    P = np.exp((f[:, None] + g[None, :] - C) / lam)
    return float(np.sqrt(np.sum(P * C)))


def w2_distance(a, b) -> float:
    """2-Wasserstein distance between two empirical distributions.

    Equal sizes up to 4096 points use an exact assignment; anything else
    falls back to ``sinkhorn_w2`` (approximate).
    """
    a, b = _pair(a, b)
    if a.shape[0] == b.shape[0] <= EXACT_W2_MAX:
        C = cdist(a, b, "sqeuclidean")
        r, c = linear_sum_assignment(C)
        return float(np.sqrt(C[r, c].mean()))
    return sinkhorn_w2(a, b)


def mmd_rbf(a, b, bandwidth: float = 1.0) -> float:
    """Unbiased MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 h^2)).

    Self terms exclude the diagonal; the cross term uses every pair.
    """
    a, b = _pair(a, b)
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise ValueError("MMD needs at least two samples per set")
    s = 2.0 * bandwidth**2
    kaa = np.exp(-cdist(a, a, "sqeuclidean") / s)
    kbb = np.exp(-cdist(b, b, "sqeuclidean") / s)
    kab = np.exp(-cdist(a, b, "sqeuclidean") / s)
    return float((kaa.sum() - np.trace(kaa)) / (n * (n - 1))
                 + (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
                 - 2.0 * kab.mean())


def kl_bound_estimate(pinn_loss_value: float) -> float:
    if pinn_loss_value < 0:
        raise ValueError("PINN loss cannot be negative")
    return float(np.sqrt(pinn_loss_value))


@dataclass
class MetricReport:
    ess_trajectory: list
    terminal_ess: float
    log_z: float
    log_z_stderr: float
    w2: Optional[float] = None
    mmd: Optional[float] = None
    kl_bound: Optional[float] = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.terminal_ess <= 1 + 1e-12:
            raise ValueError(f"ESS {self.terminal_ess} outside (0, 1]")
        for name in ("terminal_ess", "log_z", "w2", "mmd", "kl_bound"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"{name} is not finite")

    @classmethod
    def from_run(cls, times, ess_values, log_weights, samples=None, reference=None,
                 kl_bound=None, label="", target_log_weights=True) -> "MetricReport":
        """Build a report from an ESS trajectory and terminal weights.

        When ``reference`` samples are given, W2 and MMD compare them with
        ``samples`` resampled by the terminal weights. Resampling is done
        deterministically (largest-remainder) to keep metrics free of hidden
        randomness.
        """
        w2 = mmd = None
        if samples is not None and reference is not None:
            pts = deterministic_resample(samples, log_weights) if target_log_weights else samples
            w2, mmd = w2_distance(pts, reference), mmd_rbf(pts, reference)
        return cls([(float(t), float(e)) for t, e in zip(times, ess_values)], ess(log_weights),
                   log_mean_exp(log_weights), log_partition_stderr(log_weights), w2, mmd, kl_bound, label)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        d["ess_trajectory"] = [tuple(p) for p in d["ess_trajectory"]]
        return cls(**d)


TABLE_COLUMNS = ("label", "terminal_ess", "log_z", "log_z_stderr", "w2", "mmd", "kl_bound")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(TABLE_COLUMNS)
    for r in reports:
        w.writerow(["" if getattr(r, c) is None else getattr(r, c) for c in TABLE_COLUMNS])
    return buf.getvalue()


def deterministic_resample(samples, log_weights) -> np.ndarray:
    """n points with multiplicities from largest-remainder rounding of n*w."""
    samples = np.asarray(samples)
    lw = np.asarray(log_weights, dtype=np.float64)
    n = lw.size
    w = np.exp(lw - logsumexp(lw)) * n
    counts = np.floor(w).astype(int)
    short = n - counts.sum()
    if short > 0:
        counts[np.argsort(-(w - counts), kind="stable")[:short]] += 1
    return np.repeat(samples, counts, axis=0)
