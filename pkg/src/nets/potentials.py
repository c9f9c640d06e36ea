"""Time-dependent potentials U_t(x) and the benchmark targets built on them.

All methods take a scalar time ``t`` and a batch of points ``x`` with shape
``(n, d)`` and return arrays with a leading walker axis: energies and time
derivatives have shape ``(n,)``, gradients ``(n, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import gammaln, logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return x


class TimePotential:
    """Annealed family of potentials connecting U_0 (t=0) to U_1 (t=1).

    Subclasses implement ``energy``, ``grad`` and ``dt_energy``. When the
    partition function is known in closed form, ``analytic_free_energy``
    returns F_t = -log Z_t; otherwise it returns ``None``.
    """

    dim: int

    def energy(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dt_energy(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def analytic_free_energy(self, t: float) -> Optional[float]:
        return None

    def analytic_dt_free_energy(self, t: float) -> Optional[float]:
        return None

    def sample_base(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact i.i.d. draws from rho_0."""
        raise NotImplementedError(f"{type(self).__name__} has no exact base sampler")

    def sample_target(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact i.i.d. draws from rho_1, when the target admits them."""
        raise NotImplementedError(f"{type(self).__name__} has no exact target sampler")

    def has_target_sampler(self) -> bool:
        return type(self).sample_target is not TimePotential.sample_target


# ---------------------------------------------------------------------------
# fixed-time potentials


class FixedPotential:
    """A single potential U(x) without time dependence."""

    dim: int

    def energy(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")

    def log_partition(self) -> Optional[float]:
        return None


@dataclass
class IsotropicGaussian(FixedPotential):
    """U(x) = |x - mean|^2 / (2 sigma^2), unnormalized."""

    dim: int
    sigma: float = 1.0
    mean: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.mean = np.zeros(self.dim) if self.mean is None else np.asarray(self.mean, float)

    def energy(self, x):
        x = _as_batch(x)
        return 0.5 * np.sum((x - self.mean) ** 2, axis=1) / self.sigma**2

    def grad(self, x):
        x = _as_batch(x)
        return (x - self.mean) / self.sigma**2

    def sample(self, n, rng):
        return self.mean + self.sigma * rng.standard_normal((n, self.dim))

    def log_partition(self):
        return 0.5 * self.dim * (LOG_2PI + 2.0 * np.log(self.sigma))


@dataclass
class GmmPotential(FixedPotential):
    """Isotropic Gaussian mixture, U(x) = -log sum_i w_i N(x; mu_i, sigma^2 I).

    The energy is the normalized negative log density, so Z = 1.
    """

    means: np.ndarray
    sigma: float = 1.0
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = self.means.shape[0]
        w = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (k,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be a probability vector, one entry per mean")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.weights = w
        self.dim = self.means.shape[1]

    def _log_components(self, x):
        d2 = np.sum((x[:, None, :] - self.means[None]) ** 2, axis=-1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw - 0.5 * d2 / self.sigma**2 - 0.5 * self.dim * (LOG_2PI + 2 * np.log(self.sigma))

    def energy(self, x):
        return -logsumexp(self._log_components(_as_batch(x)), axis=1)

    def grad(self, x):
        x = _as_batch(x)
        lc = self._log_components(x)
        r = np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
        return np.einsum("nk,nkd->nd", r, x[:, None, :] - self.means[None]) / self.sigma**2

    def sample(self, n, rng):
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[idx] + self.sigma * rng.standard_normal((n, self.dim))

    def log_partition(self):
        return 0.0


# ---------------------------------------------------------------------------
# time-dependent families


class LinearInterpolationPotential(TimePotential):
    """U_t = (1 - t) U_0 + t U_1."""

    def __init__(self, base: FixedPotential, target: FixedPotential):
        if base.dim != target.dim:
            raise ValueError(f"dimension mismatch: base d={base.dim}, target d={target.dim}")
        self.base = base
        self.target = target
        self.dim = base.dim

    def energy(self, t, x):
        x = _as_batch(x)
        if t == 0:
            return self.base.energy(x)
        if t == 1:
            return self.target.energy(x)
        return (1.0 - t) * self.base.energy(x) + t * self.target.energy(x)

    def grad(self, t, x):
        x = _as_batch(x)
        return (1.0 - t) * self.base.grad(x) + t * self.target.grad(x)

    def dt_energy(self, t, x):
        x = _as_batch(x)
        return self.target.energy(x) - self.base.energy(x)

    def analytic_free_energy(self, t):
        if t == 0 and self.base.log_partition() is not None:
            return -self.base.log_partition()
        if t == 1 and self.target.log_partition() is not None:
            return -self.target.log_partition()
        return None

    def sample_base(self, n, rng):
        return self.base.sample(n, rng)

    def sample_target(self, n, rng):
        return self.target.sample(n, rng)

    def has_target_sampler(self):
        return type(self.target).sample is not FixedPotential.sample


def make_linear_interpolation(U0: FixedPotential, U1: FixedPotential) -> LinearInterpolationPotential:
    return LinearInterpolationPotential(U0, U1)


class MovingGaussianPotential(TimePotential):
    """U_t(x) = (x - b_t)^T A_t (x - b_t) / 2.

    ``mean``/``mean_dot`` give b_t and its time derivative; ``precision`` and
    ``precision_dot`` give A_t (symmetric positive definite) and dA_t/dt,
    which must commute with A_t.
    """

    def __init__(
        self,
        mean: Callable[[float], np.ndarray],
        mean_dot: Callable[[float], np.ndarray],
        precision: Callable[[float], np.ndarray],
        precision_dot: Callable[[float], np.ndarray],
    ):
        self.mean = mean
        self.mean_dot = mean_dot
        self.precision = precision
        self.precision_dot = precision_dot
        self.dim = int(np.asarray(mean(0.0)).shape[0])

    @classmethod
    def linear(cls, b0, b1, A0, A1) -> "MovingGaussianPotential":
        """b_t = (1-t) b0 + t b1 and A_t = (1-t) A0 + t A1 (A0, A1 must commute)."""
        b0, b1 = np.asarray(b0, float), np.asarray(b1, float)
        A0, A1 = np.atleast_2d(np.asarray(A0, float)), np.atleast_2d(np.asarray(A1, float))
        if not np.allclose(A0 @ A1, A1 @ A0):
            raise ValueError("A0 and A1 must commute")
        db, dA = b1 - b0, A1 - A0
        return cls(
            mean=lambda t: b0 + t * db,
            mean_dot=lambda t: db,
            precision=lambda t: A0 + t * dA,
            precision_dot=lambda t: dA,
        )

    def energy(self, t, x):
        y = _as_batch(x) - self.mean(t)
        return 0.5 * np.einsum("ni,ij,nj->n", y, self.precision(t), y)

    def grad(self, t, x):
        y = _as_batch(x) - self.mean(t)
        return y @ self.precision(t).T

    def dt_energy(self, t, x):
        y = _as_batch(x) - self.mean(t)
        A, dA, db = self.precision(t), self.precision_dot(t), self.mean_dot(t)
        return -(y @ A.T) @ db + 0.5 * np.einsum("ni,ij,nj->n", y, dA, y)

    def reference(self, t: float) -> tuple[float, float]:
        """Exact (F_t, dF_t/dt) with F_t = -log((2 pi)^{d/2} det(A_t)^{-1/2})."""
        A = np.atleast_2d(self.precision(t))
        try:
            chol = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"precision at t={t} is not symmetric positive definite") from exc
        if not np.allclose(A, A.T):
            raise ValueError(f"precision at t={t} is not symmetric")
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        F = -0.5 * self.dim * LOG_2PI + 0.5 * logdet
        dF = 0.5 * np.trace(np.linalg.solve(A, self.precision_dot(t)))
        return float(F), float(dF)

    def analytic_free_energy(self, t):
        return self.reference(t)[0]

    def analytic_dt_free_energy(self, t):
        return self.reference(t)[1]

    def _sample(self, t, n, rng):
        cov = np.linalg.inv(self.precision(t))
        chol = np.linalg.cholesky(cov)
        return self.mean(t) + rng.standard_normal((n, self.dim)) @ chol.T

    def sample_at(self, t: float, n: int, rng: np.random.Generator) -> np.ndarray:
        return self._sample(t, n, rng)

    def sample_base(self, n, rng):
        return self._sample(0.0, n, rng)

    def sample_target(self, n, rng):
        return self._sample(1.0, n, rng)


def gaussian_anneal(dim: int = 1, sigma0: float = 1.0, sigma1: float = 2.0) -> MovingGaussianPotential:
    """Linear interpolation of two centred isotropic Gaussian potentials.

    (1-t)|x|^2/(2 s0^2) + t|x|^2/(2 s1^2) is a moving Gaussian with a linear
    precision path, so F_t and the exact drift are available in closed form.
    The defaults anneal N(0, 1) to N(0, 4) in one dimension.
    """
    eye = np.eye(dim)
    return MovingGaussianPotential.linear(np.zeros(dim), np.zeros(dim), eye / sigma0**2, eye / sigma1**2)


def moving_gaussian_reference(potential: MovingGaussianPotential, t: float) -> tuple[float, float]:
    return potential.reference(t)


class MeanInterpolatedGmm(TimePotential):
    """Mixture whose component means slide from the origin to their targets.

    U_t(x) = -log sum_i w_i N(x; t mu_i, s_t^2 I) with s_t = (1-t) s0 + t s1.
    The mixture is normalized at every t, so F_t = 0. At t = 0 all components
    coincide and rho_0 = N(0, s0^2 I).
    """

    def __init__(self, means, sigma: float = 1.0, base_sigma: float = 1.0, weights=None):
        self.target = GmmPotential(means, sigma, weights)
        self.means = self.target.means
        self.weights = self.target.weights
        self.dim = self.target.dim
        self.sigma = float(sigma)
        self.base_sigma = float(base_sigma)

    def _s(self, t):
        return (1.0 - t) * self.base_sigma + t * self.sigma

    def _parts(self, t, x):
        x = _as_batch(x)
        s = self._s(t)
        y = x[:, None, :] - t * self.means[None]
        lc = np.log(self.weights) - 0.5 * np.sum(y**2, axis=-1) / s**2
        lse = logsumexp(lc, axis=1)
        r = np.exp(lc - lse[:, None])
        return x, s, y, lse, r

    def energy(self, t, x):
        _, s, _, lse, _ = self._parts(t, x)
        return -lse + 0.5 * self.dim * (LOG_2PI + 2.0 * np.log(s))

    def grad(self, t, x):
        _, s, y, _, r = self._parts(t, x)
        return np.einsum("nk,nkd->nd", r, y) / s**2

    def dt_energy(self, t, x):
        _, s, y, _, r = self._parts(t, x)
        ds = self.sigma - self.base_sigma
        de = np.einsum("nkd,kd->nk", y, self.means) / s**2 + np.sum(y**2, axis=-1) * ds / s**3
        return -np.sum(r * de, axis=1) + self.dim * ds / s

    def analytic_free_energy(self, t):
        return 0.0

    def analytic_dt_free_energy(self, t):
        return 0.0

    def sample_base(self, n, rng):
        return self.base_sigma * rng.standard_normal((n, self.dim))

    def sample_target(self, n, rng):
        return self.target.sample(n, rng)


def circle_means(n_modes: int = 8, radius: float = 10.0) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


# 40 mixture centres of the standard 2-d benchmark (span roughly [-40, 40]^2)
GMM40_MEANS = np.array(
    [
        [-0.2995, 21.4577], [-32.9218, -29.4376], [-15.4062, 10.7263], [-0.7925, 31.7156],
        [-3.5498, 10.5845], [-12.0885, -7.8626], [-38.2139, -26.4913], [-16.4889, 1.4817],
        [15.8134, 24.0009], [-27.1176, -17.4185], [14.5287, 33.2155], [-8.2320, 29.9325],
        [-6.4473, 4.2326], [36.2190, -37.1068], [-25.1815, -10.1266], [-15.5920, 34.5600],
        [-25.9272, -18.4133], [-27.9456, -37.4624], [-23.3496, 34.3839], [17.8487, 19.3869],
        [2.1037, -20.5073], [6.7674, -37.3478], [-28.9026, -20.6212], [25.2375, 23.4529],
        [-17.7398, -1.4433], [25.5824, 39.7653], [15.8753, 5.4037], [26.8195, -23.5521],
        [7.4538, -31.0122], [-27.7234, -20.6633], [18.0989, 16.0864], [-23.6941, 12.0843],
        [21.9589, -5.0487], [1.5273, 9.2682], [24.8151, 38.4078], [-30.8249, -14.6588],
        [15.7204, 33.1420], [34.8083, 35.2943], [7.9606, -34.7833], [3.6797, -25.0242],
    ]
)

# softplus(1): component scale used by the reference implementation of this target
GMM40_SIGMA = float(np.log1p(np.e))


def gmm40(base_sigma: float = 2.0, sigma: float = GMM40_SIGMA) -> MeanInterpolatedGmm:
    return MeanInterpolatedGmm(GMM40_MEANS, sigma=sigma, base_sigma=base_sigma)


class FunnelPotential(TimePotential):
    """Neal's funnel reached from a standard normal.

    Target: x_0 ~ N(0, sigma^2), x_{1:d-1} | x_0 ~ N(0, e^{x_0}). The family

        U_t(x) = x_0^2 (1 - t + t/sigma^2)/2 + e^{-t x_0} |x_{1:}|^2/2 + (d-1) t x_0/2

    keeps x_{1:} | x_0 ~ N(0, e^{t x_0}) at every t, which makes Z_t explicit.
    """

    def __init__(self, dim: int = 10, sigma: float = 3.0):
        if dim < 2:
            raise ValueError("funnel needs at least two dimensions")
        self.dim = dim
        self.sigma = float(sigma)

    def _a(self, t):
        return 1.0 - t + t / self.sigma**2

    def energy(self, t, x):
        x = _as_batch(x)
        x0, rest = x[:, 0], x[:, 1:]
        return (
            0.5 * self._a(t) * x0**2
            + 0.5 * np.exp(-t * x0) * np.sum(rest**2, axis=1)
            + 0.5 * (self.dim - 1) * t * x0
        )

    def grad(self, t, x):
        x = _as_batch(x)
        x0, rest = x[:, 0], x[:, 1:]
        e = np.exp(-t * x0)
        g = np.empty_like(x)
        g[:, 0] = self._a(t) * x0 - 0.5 * t * e * np.sum(rest**2, axis=1) + 0.5 * (self.dim - 1) * t
        g[:, 1:] = e[:, None] * rest
        return g

    def dt_energy(self, t, x):
        x = _as_batch(x)
        x0, rest = x[:, 0], x[:, 1:]
        da = -1.0 + 1.0 / self.sigma**2
        return (
            0.5 * da * x0**2
            - 0.5 * x0 * np.exp(-t * x0) * np.sum(rest**2, axis=1)
            + 0.5 * (self.dim - 1) * x0
        )

    def analytic_free_energy(self, t):
        return -0.5 * self.dim * LOG_2PI + 0.5 * np.log(self._a(t))

    def analytic_dt_free_energy(self, t):
        return 0.5 * (-1.0 + 1.0 / self.sigma**2) / self._a(t)

    def sample_base(self, n, rng):
        return rng.standard_normal((n, self.dim))

    def sample_target(self, n, rng):
        x0 = self.sigma * rng.standard_normal(n)
        rest = np.exp(0.5 * x0)[:, None] * rng.standard_normal((n, self.dim - 1))
        return np.column_stack([x0, rest])


class StudentTMixturePotential(TimePotential):
    """Mixture of product Student-t components with means t * mu_i.

    At t = 0 every component sits at the origin, giving a single standard
    Student-t. Degrees of freedom default to 2. Normalized, so F_t = 0.
    """

    def __init__(self, means, df: float = 2.0, weights=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, self.dim = self.means.shape
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, float)
        self.df = float(df)
        nu = self.df
        self._logc = gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * np.log(nu * np.pi)

    @classmethod
    def random(cls, dim: int = 50, n_components: int = 10, loc_range: float = 10.0,
               df: float = 2.0, seed: int = 0) -> "StudentTMixturePotential":
        rng = np.random.default_rng(seed)
        means = rng.uniform(-loc_range, loc_range, size=(n_components, dim))
        return cls(means, df=df)

    def _parts(self, t, x):
        x = _as_batch(x)
        nu = self.df
        y = x[:, None, :] - t * self.means[None]
        lc = np.log(self.weights) + np.sum(self._logc - 0.5 * (nu + 1) * np.log1p(y**2 / nu), axis=-1)
        lse = logsumexp(lc, axis=1)
        r = np.exp(lc - lse[:, None])
        g = (nu + 1) * y / (nu + y**2)
        return lse, r, g

    def energy(self, t, x):
        return -self._parts(t, x)[0]

    def grad(self, t, x):
        _, r, g = self._parts(t, x)
        return np.einsum("nk,nkd->nd", r, g)

    def dt_energy(self, t, x):
        _, r, g = self._parts(t, x)
        return -np.einsum("nk,nkd,kd->n", r, g, self.means)

    def analytic_free_energy(self, t):
        return 0.0

    def analytic_dt_free_energy(self, t):
        return 0.0

    def sample_base(self, n, rng):
        return rng.standard_t(self.df, size=(n, self.dim))

    def sample_target(self, n, rng):
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[idx] + rng.standard_t(self.df, size=(n, self.dim))


def finite_difference_check(potential: TimePotential, t: float, x: np.ndarray,
                            rel: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of energy in x and t, step 1e-4 (1 + |x|)."""
    x = _as_batch(x)
    h = 1e-4 * (1.0 + np.linalg.norm(x, axis=1))
    g = np.empty_like(x)
    for i in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, i] = h
        g[:, i] = (potential.energy(t, x + e) - potential.energy(t, x - e)) / (2 * h)
    ht = 1e-4
    lo, hi = max(t - ht, 0.0), min(t + ht, 1.0)
    dt = (potential.energy(hi, x) - potential.energy(lo, x)) / (hi - lo)
    return g, dt


__all__ = [
    "TimePotential", "FixedPotential", "IsotropicGaussian", "GmmPotential",
    "LinearInterpolationPotential", "make_linear_interpolation", "gaussian_anneal",
    "MovingGaussianPotential", "moving_gaussian_reference", "MeanInterpolatedGmm",
    "circle_means", "GMM40_MEANS", "gmm40", "FunnelPotential", "StudentTMixturePotential",
    "finite_difference_check",
]
