"""Walker populations with log-domain importance weights."""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


class DegenerateWeightsError(ValueError):
    """Raised when every log-weight is -inf (or NaN)."""


def _check_weights(log_weights) -> np.ndarray:
    a = np.asarray(log_weights, dtype=np.float64).ravel()
    if a.size == 0 or not np.any(np.isfinite(a)):
        raise DegenerateWeightsError("no walker carries a finite log-weight")
    return a


def log_mean_exp(log_weights) -> float:
    a = _check_weights(log_weights)
    return float(logsumexp(a) - np.log(a.size))


def normalized_weights(log_weights) -> np.ndarray:
    a = _check_weights(log_weights)
    return np.exp(a - logsumexp(a))


def ess(log_weights) -> float:
    """Self-normalized effective sample size fraction, in (0, 1]."""
    a = _check_weights(log_weights)
    a = a - np.max(a)
    w = np.exp(a)
    return min(float(np.sum(w) ** 2 / (a.size * np.sum(w**2))), 1.0)


def log_partition_ratio(log_weights) -> float:
    """log-mean-exp of A, the estimate of log(Z_t / Z_0).

    E[e^A] is unbiased for Z_t/Z_0; the log of the sample mean is biased low
    by roughly Var(e^A)/(2 n E[e^A]^2).
    """
    if isinstance(log_weights, WalkerEnsemble):
        log_weights = log_weights.log_weights
    return log_mean_exp(log_weights)


def log_partition_stderr(log_weights) -> float:
    """Delta-method standard error of log-mean-exp(A)."""
    a = _check_weights(log_weights)
    w = np.exp(a - np.max(a))
    n = a.size
    if n < 2:
        return float("inf")
    return float(np.std(w, ddof=1) / (np.sqrt(n) * np.mean(w)))


def weighted_mean(values, log_weights) -> tuple[float, float]:
    """Self-normalized estimate of E[h] and its delta-method standard error."""
    w = normalized_weights(log_weights)
    h = np.asarray(values, dtype=np.float64)
    m = float(np.sum(w * h))
    se = float(np.sqrt(np.sum(w**2 * (h - m) ** 2)))
    return m, se


@dataclass
class WalkerEnsemble:
    """n walkers: positions X (n, d), log-weights A (n,), and the current time."""

    positions: np.ndarray
    log_weights: np.ndarray
    time: float = 0.0
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64).ravel()
        if self.positions.shape[0] < 1:
            raise ValueError("an ensemble needs at least one walker")
        if self.log_weights.shape[0] != self.positions.shape[0]:
            raise ValueError("one log-weight per walker required")

    @classmethod
    def from_positions(cls, positions, time: float = 0.0) -> "WalkerEnsemble":
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        return cls(positions, np.zeros(positions.shape[0]), time)

    @classmethod
    def sample_base(cls, potential, n: int, rng: np.random.Generator) -> "WalkerEnsemble":
        return cls.from_positions(potential.sample_base(n, rng), 0.0)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def alive(self) -> np.ndarray:
        return np.isfinite(self.log_weights)

    def ess(self) -> float:
        return ess(self.log_weights)

    def log_partition_ratio(self) -> float:
        return log_partition_ratio(self.log_weights)

    def copy(self) -> "WalkerEnsemble":
        return replace(self, positions=self.positions.copy(), log_weights=self.log_weights.copy(),
                       diagnostics=list(self.diagnostics))

    # -- checkpoint dumps -------------------------------------------------

    def save(self, path) -> None:
        """Write ``.npz`` (binary) or ``.csv`` depending on the suffix."""
        path = Path(path)
        if path.suffix == ".csv":
            path.write_text(self.to_csv())
        else:
            np.savez(path, positions=self.positions, log_weights=self.log_weights,
                     time=np.float64(self.time))

    @classmethod
    def load(cls, path) -> "WalkerEnsemble":
        path = Path(path)
        if path.suffix == ".csv":
            return cls.from_csv(path.read_text())
        with np.load(path) as f:
            return cls(f["positions"], f["log_weights"], float(f["time"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# time={self.time!r}\n")
        cols = [f"x{i}" for i in range(self.dim)] + ["log_weight"]
        np.savetxt(buf, np.column_stack([self.positions, self.log_weights]),
                   delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "WalkerEnsemble":
        lines = text.splitlines()
        if not lines[0].startswith("# time="):
            raise ValueError("ensemble CSV must start with a '# time=' line")
        time = float(lines[0].split("=", 1)[1])
        data = np.loadtxt(io.StringIO("\n".join(lines[2:])), delimiter=",", ndmin=2)
        return cls(data[:, :-1], data[:, -1], time)


def systematic_indices(log_weights, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices from one uniform offset against the cumulative weights."""
    w = normalized_weights(log_weights)
    n = w.size
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    u = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(cdf, u, side="right")


def systematic_resample(ensemble: WalkerEnsemble, rng: np.random.Generator) -> WalkerEnsemble:
    """Resample walkers; every new log-weight equals the old log-mean-exp.

    Setting the weights to the log-mean-exp rather than zero keeps the
    ensemble's running estimate of Z_t / Z_0 unchanged.
    """
    idx = systematic_indices(ensemble.log_weights, rng)
    level = log_mean_exp(ensemble.log_weights)
    out = WalkerEnsemble(ensemble.positions[idx].copy(), np.full(ensemble.n, level), ensemble.time,
                         list(ensemble.diagnostics))
    return out


def multiplicities(indices: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(indices, minlength=n)
