"""Scalar phi^4 theory on a periodic hypercubic lattice.

Fields are stored flattened row-major, shape (n, L**D), so a lattice
potential plugs into the same integrators as any other potential.

    U_t(phi) = sum_x [ -2 sum_mu phi_x phi_{x+mu} + (2D + m2_t) phi_x^2 + lam_t phi_x^4 ]

with each forward bond counted once. At lam = 0 the density exp(-U) is
Gaussian with covariance (2Q)^{-1}, where Q is diagonalized by Fourier modes
with eigenvalues M_k = m2 + 2D - 2 sum_mu cos k_mu.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .potentials import TimePotential, _as_batch


@dataclass(frozen=True)
class LatticeSpec:
    L: int
    D: int = 2
    m2_0: float = 1.0
    m2_1: float = 1.0
    lam_0: float = 0.0
    lam_1: float = 0.0

    def __post_init__(self):
        if self.L < 2 or self.D < 1:
            raise ValueError("need L >= 2 and D >= 1")
        if self.lam_0 != 0.0:
            raise ValueError("the base theory must be free (lam_0 = 0)")
        if not self.m2_0 > 0:
            raise ValueError("the free base needs m2_0 > 0")
        if self.lam_1 < 0:
            raise ValueError("lam_1 must be non-negative")

    @property
    def shape(self) -> tuple:
        return (self.L,) * self.D

    @property
    def volume(self) -> int:
        return self.L**self.D

    def m2(self, t: float) -> float:
        return (1 - t) * self.m2_0 + t * self.m2_1

    def lam(self, t: float) -> float:
        return (1 - t) * self.lam_0 + t * self.lam_1


def _fields(spec: LatticeSpec, field) -> np.ndarray:
    f = np.asarray(field, dtype=np.float64)
    if f.shape[-spec.D:] == spec.shape and f.ndim in (spec.D, spec.D + 1):
        f = f.reshape(-1, spec.volume)
    f = _as_batch(f)
    if f.shape[1] != spec.volume:
        raise ValueError(f"field has {f.shape[1]} sites, lattice has {spec.volume}")
    return f


def phi4_energy_params(spec: LatticeSpec, m2: float, lam: float, field) -> np.ndarray:
    f = _fields(spec, field)
    g = f.reshape((-1,) + spec.shape)
    hop = sum(np.sum(g * np.roll(g, -1, axis=mu + 1), axis=tuple(range(1, spec.D + 1)))
              for mu in range(spec.D))
    f2 = f * f
    return -2.0 * hop + (2 * spec.D + m2) * np.sum(f2, axis=1) + lam * np.sum(f2 * f2, axis=1)


def phi4_grad_params(spec: LatticeSpec, m2: float, lam: float, field) -> np.ndarray:
    f = _fields(spec, field)
    g = f.reshape((-1,) + spec.shape)
    nb = sum(np.roll(g, -1, axis=mu + 1) + np.roll(g, 1, axis=mu + 1) for mu in range(spec.D))
    return -2.0 * nb.reshape(f.shape) + 2 * (2 * spec.D + m2) * f + 4 * lam * f**3


def phi4_energy(spec: LatticeSpec, t: float, field) -> np.ndarray:
    return phi4_energy_params(spec, spec.m2(t), spec.lam(t), field)


class Phi4Potential(TimePotential):
    """Interpolated action with linear m2_t and lam_t."""

    def __init__(self, spec: LatticeSpec):
        self.spec = spec
        self.dim = spec.volume

    def energy(self, t, x):
        return phi4_energy_params(self.spec, self.spec.m2(t), self.spec.lam(t), x)

    def grad(self, t, x):
        return phi4_grad_params(self.spec, self.spec.m2(t), self.spec.lam(t), x)

    def dt_energy(self, t, x):
        f = _fields(self.spec, x)
        s = self.spec
        f2 = f * f
        return (s.m2_1 - s.m2_0) * np.sum(f2, axis=1) + (s.lam_1 - s.lam_0) * np.sum(f2 * f2, axis=1)

    def analytic_free_energy(self, t):
        if t == 0.0 or (self.spec.lam_1 == 0.0 and self.spec.m2(t) > 0):
            return free_field_free_energy(self.spec, self.spec.m2(t))
        return None

    def sample_base(self, n, rng):
        return sample_free_field(self.spec, rng, n)

    def sample_target(self, n, rng):
        if self.spec.lam_1 == 0.0:
            return sample_free_field(self.spec, rng, n, m2=self.spec.m2_1)
        raise NotImplementedError("no direct sampler for the interacting theory")

    def has_target_sampler(self):
        return self.spec.lam_1 == 0.0 and self.spec.m2_1 > 0


# ---------------------------------------------------------------------------
# free theory


def mode_eigenvalues(spec: LatticeSpec, m2: float) -> np.ndarray:
    """M_k on the full momentum grid, shape (L,)*D."""
    k = 2 * np.pi * np.fft.fftfreq(spec.L) * 1.0
    grids = np.meshgrid(*([k] * spec.D), indexing="ij")
    return m2 + 2 * spec.D - 2 * sum(np.cos(g) for g in grids)


def sample_free_field(spec: LatticeSpec, rng: np.random.Generator, n: int,
                      m2: Optional[float] = None) -> np.ndarray:
    """Exact samples of exp(-U) at lam = 0, shape (n, L**D).

    White noise is filtered by (2 M_k)^{-1/2} in Fourier space; because
    M_k = M_{-k} the filter is real and even, so the output is real.
    """
    m2 = spec.m2_0 if m2 is None else m2
    if not m2 > 0:
        raise ValueError("free-field sampling needs m2 > 0")
    M = mode_eigenvalues(spec, m2)
    axes = tuple(range(1, spec.D + 1))
    z = rng.standard_normal((n,) + spec.shape)
    out = np.fft.ifftn(np.fft.fftn(z, axes=axes) / np.sqrt(2.0 * M), axes=axes)
    return np.ascontiguousarray(out.real).reshape(n, spec.volume)


def free_field_variance(spec: LatticeSpec, m2: Optional[float] = None) -> float:
    m2 = spec.m2_0 if m2 is None else m2
    return float(np.mean(1.0 / (2.0 * mode_eigenvalues(spec, m2))))


def free_field_two_point(spec: LatticeSpec, r: int, m2: Optional[float] = None) -> float:
    """<phi_x phi_{x + r e_0}> in the free theory."""
    m2 = spec.m2_0 if m2 is None else m2
    k = 2 * np.pi * np.fft.fftfreq(spec.L)
    grids = np.meshgrid(*([k] * spec.D), indexing="ij")
    return float(np.mean(np.cos(grids[0] * r) / (2.0 * mode_eigenvalues(spec, m2))))


def free_field_free_energy(spec: LatticeSpec, m2: float) -> float:
    """-log int exp(-U) dphi = -(V/2) log(pi) + (1/2) sum_k log M_k."""
    M = mode_eigenvalues(spec, m2)
    return float(-0.5 * spec.volume * np.log(np.pi) + 0.5 * np.sum(np.log(M)))


# ---------------------------------------------------------------------------
# observables


def magnetization(field) -> np.ndarray:
    f = np.asarray(field, dtype=np.float64)
    if f.ndim == 1:
        return np.float64(f.sum())
    return f.reshape(f.shape[0], -1).sum(axis=1)


def two_point(spec: LatticeSpec, fields, r: int) -> np.ndarray:
    """Per-sample G(r): average of phi_x phi_{x + r e_mu} over sites and directions."""
    f = _fields(spec, fields)
    g = f.reshape((-1,) + spec.shape)
    axes = tuple(range(1, spec.D + 1))
    return sum(np.mean(g * np.roll(g, -r, axis=mu + 1), axis=axes) for mu in range(spec.D)) / spec.D


def site_variance(spec: LatticeSpec, fields) -> np.ndarray:
    """Per-sample site average of phi_x^2 (equals G(0))."""
    return np.mean(_fields(spec, fields) ** 2, axis=1)


def magnetization_histogram(fields, bins=40, range_=None, log_weights=None):
    m = magnetization(_as_batch(fields))
    w = None
    if log_weights is not None:
        lw = np.asarray(log_weights, dtype=np.float64)
        w = np.exp(lw - np.max(lw))
        w = w / w.sum()
    return np.histogram(m, bins=bins, range=range_, weights=w, density=w is not None)


def histogram_to_csv(counts, edges) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["left", "right", "value"])
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# HMC reference sampler


@dataclass
class HmcResult:
    """samples: (n_kept, n_chains, V); per-chain means give honest error bars."""

    samples: np.ndarray
    acceptance: float
    rejected_nonfinite: int

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])

    def chain_estimate(self, values_fn) -> tuple[float, float]:
        """Mean of ``values_fn(fields)`` and its SE from between-chain spread."""
        k, c, v = self.samples.shape
        vals = np.asarray(values_fn(self.samples.reshape(k * c, v))).reshape(k, c)
        per_chain = vals.mean(axis=0)
        return float(per_chain.mean()), float(per_chain.std(ddof=1) / np.sqrt(c))


def hmc_oracle(spec: LatticeSpec, t: float, n_samples: int, rng: np.random.Generator,
               step_size: float = 0.1, n_leapfrog: int = 10, n_chains: int = 64,
               burn_in: int = 200, thin: int = 1, init: Optional[np.ndarray] = None,
               m2: Optional[float] = None, lam: Optional[float] = None) -> HmcResult:
    """Metropolis-corrected HMC on U_t, run as ``n_chains`` independent chains.

    Collects ``n_samples`` states per chain after ``burn_in`` trajectories.
    The trajectory length is jittered uniformly in [0.8, 1.2] x step_size to
    avoid periodicities. Non-finite energies reject the proposal.
    """
    m2 = spec.m2(t) if m2 is None else m2
    lam = spec.lam(t) if lam is None else lam
    U = lambda f: phi4_energy_params(spec, m2, lam, f)
    G = lambda f: phi4_grad_params(spec, m2, lam, f)
    V = spec.volume
    x = np.zeros((n_chains, V)) if init is None else np.array(init, dtype=np.float64)
    ux = U(x)
    kept = np.empty((n_samples, n_chains, V))
    acc = tries = bad = 0
    total = burn_in + n_samples * thin
    for it in range(total):
        h = step_size * rng.uniform(0.8, 1.2)
        p = rng.standard_normal((n_chains, V))
        h0 = ux + 0.5 * np.sum(p * p, axis=1)
        with np.errstate(all="ignore"):
            y = x.copy()
            p = p - 0.5 * h * G(y)
            for j in range(n_leapfrog):
                y = y + h * p
                if j < n_leapfrog - 1:
                    p = p - h * G(y)
            p = p - 0.5 * h * G(y)
            uy = U(y)
            h1 = uy + 0.5 * np.sum(p * p, axis=1)
        finite = np.isfinite(h1)
        bad += int(np.sum(~finite))
        accept = finite & (np.log(rng.uniform(size=n_chains)) < h0 - np.where(finite, h1, np.inf))
        x = np.where(accept[:, None], y, x)
        ux = np.where(accept, uy, ux)
        if it >= burn_in:
            acc += int(accept.sum())
            tries += n_chains
            if (it - burn_in) % thin == thin - 1:
                kept[(it - burn_in) // thin] = x
    return HmcResult(kept, acc / max(tries, 1), bad)


def thermodynamic_integration(spec: LatticeSpec, rng: np.random.Generator, n_nodes: int = 12,
                              **hmc_kwargs) -> tuple[float, float]:
    """log(Z_1 / Z_0) = -int_0^1 E_t[dU/dt] dt with Gauss-Legendre nodes.

    Each node's expectation comes from an independent HMC run; returns the
    estimate and its standard error (quadrature error not included).
    """
    pot = Phi4Potential(spec)
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    ts, ws = 0.5 * (nodes + 1.0), 0.5 * weights
    est = var = 0.0
    for t, w in zip(ts, ws):
        res = hmc_oracle(spec, float(t), rng=rng, **hmc_kwargs)
        m, se = res.chain_estimate(lambda f: pot.dt_energy(t, f))
        est -= w * m
        var += (w * se) ** 2
    return float(est), float(np.sqrt(var))
