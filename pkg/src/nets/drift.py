"""Drift models b_t(x), their divergences, and brute-force drift oracles.

Models expose a numpy interface used by the integrators:

    drift(t, x) -> (n, d)
    divergence(t, x, mode="exact" | "hutchinson", ...) -> (n,)

Gradient-form models (b = grad phi) additionally expose ``scalar_potential``
and ``dt_scalar_potential``. Models that carry a free-energy estimate expose
``dt_free_energy(t)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .potentials import MovingGaussianPotential, TimePotential, _as_batch

torch.set_default_dtype(torch.float64)

CHECKPOINT_FORMAT = "nets-drift-v1"
DT_PHI_STEP = 1e-4


def default_hutchinson_delta(x: np.ndarray) -> np.ndarray:
    return 1e-3 * (1.0 + np.linalg.norm(x, axis=1))


def hutchinson_divergence(drift_fn: Callable, t: float, x, delta, probes: int = 64,
                          rng: Optional[np.random.Generator] = None, eta: Optional[np.ndarray] = None,
                          return_samples: bool = False):
    """Randomized divergence estimate from antithetic directional differences.

    Averages eta . (b(x + delta eta) - b(x - delta eta)) / (2 delta) over
    Gaussian probes eta; the bias is O(delta^2). ``delta`` may be a scalar or
    one value per point. Pass ``eta`` with shape (probes, n, d) to reuse probes.
    """
    x = _as_batch(x)
    n, d = x.shape
    if probes < 1:
        raise ValueError("need at least one probe")
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,))
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    if eta is None:
        rng = np.random.default_rng() if rng is None else rng
        eta = rng.standard_normal((probes, n, d))
    p = eta.shape[0]
    step = delta[None, :, None] * eta
    xp = (x[None] + step).reshape(p * n, d)
    xm = (x[None] - step).reshape(p * n, d)
    diff = (np.asarray(drift_fn(t, xp)) - np.asarray(drift_fn(t, xm))).reshape(p, n, d)
    samples = np.sum(eta * diff, axis=-1) / (2.0 * delta[None, :])
    if not np.all(np.isfinite(samples)):
        raise FloatingPointError("non-finite drift evaluation in Hutchinson estimate")
    est = samples.mean(axis=0)
    return (est, samples) if return_samples else est


class DriftModel:
    dim: int
    is_gradient: bool = False

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def exact_divergence(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def divergence(self, t: float, x: np.ndarray, mode: str = "exact", delta=None,
                   probes: int = 64, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        x = _as_batch(x)
        if mode == "exact":
            return self.exact_divergence(t, x)
        if mode == "hutchinson":
            delta = default_hutchinson_delta(x) if delta is None else delta
            return hutchinson_divergence(self.drift, t, x, delta, probes, rng)
        raise ValueError(f"unknown divergence mode {mode!r}")

    def scalar_potential(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} is not gradient-parameterized")

    def dt_scalar_potential(self, t: float, x: np.ndarray) -> np.ndarray:
        """Central difference of phi in t, step 1e-4 (one-sided at the ends)."""
        lo, hi = max(t - DT_PHI_STEP, 0.0), min(t + DT_PHI_STEP, 1.0)
        return (self.scalar_potential(hi, x) - self.scalar_potential(lo, x)) / (hi - lo)

    def dt_free_energy(self, t: float) -> Optional[float]:
        return None


class ZeroDrift(DriftModel):
    """b = 0, i.e. plain annealed Langevin dynamics (AIS)."""

    is_gradient = True

    def __init__(self, dim: int):
        self.dim = dim

    def drift(self, t, x):
        return np.zeros_like(_as_batch(x))

    def exact_divergence(self, t, x):
        return np.zeros(_as_batch(x).shape[0])

    def scalar_potential(self, t, x):
        return np.zeros(_as_batch(x).shape[0])

    def dt_scalar_potential(self, t, x):
        return np.zeros(_as_batch(x).shape[0])


class AnalyticGaussianDrift(DriftModel):
    """Exact gradient-form transport for a moving Gaussian.

    phi_t(x) = db.(x-b) - (x-b)^T dA A^{-1} (x-b)/4 + tr(A^{-1} dA A^{-1})/4
    """

    is_gradient = True

    def __init__(self, potential: MovingGaussianPotential):
        self.potential = potential
        self.dim = potential.dim

    def _terms(self, t):
        p = self.potential
        A, dA = np.atleast_2d(p.precision(t)), np.atleast_2d(p.precision_dot(t))
        Ainv = np.linalg.inv(A)
        return p.mean(t), p.mean_dot(t), A, dA, Ainv

    def scalar_potential(self, t, x):
        b, db, A, dA, Ainv = self._terms(t)
        y = _as_batch(x) - b
        M = dA @ Ainv
        return y @ db - 0.25 * np.einsum("ni,ij,nj->n", y, M, y) + 0.25 * np.trace(Ainv @ dA @ Ainv)

    def drift(self, t, x):
        b, db, A, dA, Ainv = self._terms(t)
        y = _as_batch(x) - b
        M = dA @ Ainv
        return db - 0.25 * y @ (M + M.T).T

    def exact_divergence(self, t, x):
        b, db, A, dA, Ainv = self._terms(t)
        return np.full(_as_batch(x).shape[0], -0.5 * np.trace(dA @ Ainv))

    def dt_free_energy(self, t):
        return self.potential.reference(t)[1]


class ExactGradientDrift(DriftModel):
    """Wraps analytic callables phi(t, x), grad phi, laplacian phi."""

    is_gradient = True

    def __init__(self, dim, phi, grad_phi, laplacian_phi, dt_phi=None, dt_free_energy=None):
        self.dim = dim
        self._phi, self._grad, self._lap = phi, grad_phi, laplacian_phi
        self._dt_phi, self._dtF = dt_phi, dt_free_energy

    def scalar_potential(self, t, x):
        return self._phi(t, _as_batch(x))

    def drift(self, t, x):
        return self._grad(t, _as_batch(x))

    def exact_divergence(self, t, x):
        return self._lap(t, _as_batch(x))

    def dt_scalar_potential(self, t, x):
        if self._dt_phi is None:
            return super().dt_scalar_potential(t, x)
        return self._dt_phi(t, _as_batch(x))

    def dt_free_energy(self, t):
        return None if self._dtF is None else self._dtF(t)


def pinn_residual(drift: DriftModel, potential: TimePotential, t: float, x,
                  dt_free_energy: Optional[float] = None, divergence_mode: str = "exact",
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """div b - grad U . b - dU/dt + dF/dt, pointwise; zero for exact transport."""
    x = _as_batch(x)
    if dt_free_energy is None:
        dt_free_energy = drift.dt_free_energy(t)
    if dt_free_energy is None:
        raise ValueError("no free-energy derivative: the model has no F head and none was passed")
    b = drift.drift(t, x)
    div = drift.divergence(t, x, mode=divergence_mode, rng=rng)
    return div - np.sum(potential.grad(t, x) * b, axis=1) - potential.dt_energy(t, x) + dt_free_energy


# ---------------------------------------------------------------------------
# Feynman-Kac oracle


@dataclass
class FeynmanKacEstimate:
    """Per-replica time integrals, shape (n_replicas, m) for m start points."""

    replica_integrals: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.replica_integrals.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        r = self.replica_integrals
        return r.std(axis=0, ddof=1) / np.sqrt(r.shape[0])

    def difference(self, i: int, j: int) -> tuple[float, float]:
        """phi(x_i) - phi(x_j) and its standard error (replicas are coupled)."""
        diff = self.replica_integrals[:, i] - self.replica_integrals[:, j]
        return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(diff.size))


def feynman_kac_phi_oracle(potential: TimePotential, t: float, x, inner_steps: int = 8000,
                           inner_dt: float = 1e-3, n_replicas: int = 10_000,
                           rng: Optional[np.random.Generator] = None,
                           dt_free_energy: Optional[float] = None) -> FeynmanKacEstimate:
    """Monte Carlo phi_t(x) = int_0^inf E[dF/dt - dU/dt(X_tau)] dtau.

    X_tau follows Langevin dynamics at frozen t started from each point in
    ``x``; all start points share the same Brownian increments, so
    differences phi(x_i) - phi(x_j) have small variance. Without
    ``dt_free_energy`` the result is shifted by a constant
    (inner_steps * inner_dt * dF/dt), which cancels in differences.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = _as_batch(x)
    m, d = x.shape
    dtF = 0.0 if dt_free_energy is None else float(dt_free_energy)
    X = np.broadcast_to(x, (n_replicas, m, d)).copy()
    integral = np.zeros((n_replicas, m))
    noise_scale = np.sqrt(2.0 * inner_dt)
    for _ in range(inner_steps):
        flat = X.reshape(-1, d)
        integral += (dtF - potential.dt_energy(t, flat).reshape(n_replicas, m)) * inner_dt
        xi = rng.standard_normal((n_replicas, 1, d))
        X = X - inner_dt * potential.grad(t, flat).reshape(n_replicas, m, d) + noise_scale * xi
        if not np.all(np.isfinite(X)):
            raise FloatingPointError("inner Langevin dynamics diverged")
    return FeynmanKacEstimate(integral)


# ---------------------------------------------------------------------------
# neural drift


def time_features(t: torch.Tensor, n_freq: int) -> torch.Tensor:
    """[t, sin(pi k t), cos(pi k t)] for k = 1..n_freq; t has shape (n,)."""
    feats = [t[:, None]]
    for k in range(1, n_freq + 1):
        feats.append(torch.sin(np.pi * k * t)[:, None])
        feats.append(torch.cos(np.pi * k * t)[:, None])
    return torch.cat(feats, dim=1)


class Mlp(torch.nn.Module):
    def __init__(self, n_in: int, width: int, depth: int, n_out: int):
        super().__init__()
        sizes = [n_in] + [width] * depth + [n_out]
        self.layers = torch.nn.ModuleList(torch.nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, h):
        for layer in self.layers[:-1]:
            h = torch.nn.functional.silu(layer(h))
        return self.layers[-1](h)


class MlpDrift(DriftModel):
    """Feed-forward drift with a free-energy head.

    ``parameterization="vector"`` outputs b_t(x) in R^d directly;
    ``"scalar"`` outputs phi_t(x) and sets b = grad phi. Both carry a small
    network g(t) with F_t = g(t) - g(0), so F_0 = 0 by construction.
    Activations are SiLU, which is smooth, so divergences and time
    derivatives exist classically.
    """

    cheap_exact_divergence = False

    def __init__(self, dim: int, width: int = 64, depth: int = 2, parameterization: str = "vector",
                 n_freq: int = 2, free_energy_width: int = 16, seed: int = 0,
                 output_scale: float = 0.1):
        if parameterization not in ("vector", "scalar"):
            raise ValueError(f"unknown parameterization {parameterization!r}")
        self.dim = dim
        self.arch = dict(dim=dim, width=width, depth=depth, parameterization=parameterization,
                         n_freq=n_freq, free_energy_width=free_energy_width)
        self.is_gradient = parameterization == "scalar"
        n_t = 1 + 2 * n_freq
        self.net = Mlp(dim + n_t, width, depth, dim if parameterization == "vector" else 1)
        self.fnet = Mlp(n_t, free_energy_width, 1, 1)
        self.params = list(self.net.parameters()) + list(self.fnet.parameters())
        self._init(np.random.default_rng(seed), output_scale)

    def _init(self, rng, output_scale):
        for mod in (self.net, self.fnet):
            for i, layer in enumerate(mod.layers):
                fan_in, fan_out = layer.in_features, layer.out_features
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                if i == len(mod.layers) - 1:
                    bound *= output_scale
                with torch.no_grad():
                    layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, (fan_out, fan_in))))
                    layer.bias.zero_()

    # -- flat parameter vector --------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.params)

    def get_flat_params(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.params]).numpy().copy()

    def set_flat_params(self, flat) -> None:
        flat = torch.as_tensor(np.asarray(flat, dtype=np.float64))
        if flat.numel() != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.numel()}")
        i = 0
        with torch.no_grad():
            for p in self.params:
                k = p.numel()
                p.copy_(flat[i:i + k].reshape(p.shape))
                i += k

    def flat_grad(self) -> np.ndarray:
        return torch.cat([
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in self.params
        ]).numpy().copy()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    # -- torch-level evaluation (differentiable in the parameters) ---------

    def _inputs(self, t, x):
        return torch.cat([x, time_features(t, self.arch["n_freq"])], dim=1)

    def t_phi(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.net(self._inputs(t, x))[:, 0]

    def t_drift(self, t, x, create_graph=True):
        """b(t, x); for scalar models x must require grad."""
        if not self.is_gradient:
            return self.net(self._inputs(t, x))
        phi = self.t_phi(t, x)
        return torch.autograd.grad(phi.sum(), x, create_graph=create_graph)[0]

    def t_drift_and_divergence(self, t, x, create_graph=True):
        """Exact divergence from d reverse-mode passes; x must require grad."""
        b = self.t_drift(t, x, create_graph=True)
        div = torch.zeros(x.shape[0], dtype=x.dtype)
        for i in range(self.dim):
            gi = torch.autograd.grad(b[:, i].sum(), x, create_graph=create_graph, retain_graph=True)[0]
            div = div + gi[:, i]
        return b, div

    def t_drift_and_hutchinson(self, t, x, eta, delta):
        """Divergence from antithetic directional differences with probes ``eta``
        (n, d) and per-point steps ``delta`` (n,); differentiable in the parameters."""
        step = delta[:, None] * eta
        if self.is_gradient:
            xp = (x + step).detach().requires_grad_(True)
            xm = (x - step).detach().requires_grad_(True)
        else:
            xp, xm = x + step, x - step
        diff = self.t_drift(t, xp) - self.t_drift(t, xm)
        return self.t_drift(t, x), (eta * diff).sum(dim=1) / (2.0 * delta)

    def t_free_energy(self, t):
        g = self.fnet(time_features(t, self.arch["n_freq"]))[:, 0]
        g0 = self.fnet(time_features(torch.zeros(1), self.arch["n_freq"]))[0, 0]
        return g - g0

    def t_dt_free_energy(self, t, create_graph=True):
        t = t.detach().clone().requires_grad_(True)
        F = self.t_free_energy(t)
        return torch.autograd.grad(F.sum(), t, create_graph=create_graph)[0]

    def t_dt_phi(self, t, x, create_graph=True):
        t = t.detach().clone().requires_grad_(True)
        phi = self.t_phi(t, x)
        return torch.autograd.grad(phi.sum(), t, create_graph=create_graph)[0]

    # -- numpy interface -----------------------------------------------------

    @staticmethod
    def _tensors(t, x, requires_grad=False):
        x = torch.from_numpy(np.ascontiguousarray(_as_batch(x), dtype=np.float64))
        tt = torch.full((x.shape[0],), float(t))
        if requires_grad:
            x.requires_grad_(True)
        return tt, x

    def drift(self, t, x):
        if self.is_gradient:
            tt, xx = self._tensors(t, x, requires_grad=True)
            with torch.enable_grad():
                return self.t_drift(tt, xx, create_graph=False).detach().numpy()
        tt, xx = self._tensors(t, x)
        with torch.no_grad():
            return self.t_drift(tt, xx).numpy()

    def drift_and_divergence(self, t, x):
        tt, xx = self._tensors(t, x, requires_grad=True)
        with torch.enable_grad():
            b, div = self.t_drift_and_divergence(tt, xx, create_graph=False)
        return b.detach().numpy(), div.detach().numpy()

    def exact_divergence(self, t, x):
        return self.drift_and_divergence(t, x)[1]

    def scalar_potential(self, t, x):
        if not self.is_gradient:
            return super().scalar_potential(t, x)
        tt, xx = self._tensors(t, x)
        with torch.no_grad():
            return self.t_phi(tt, xx).numpy()

    def dt_scalar_potential(self, t, x):
        if not self.is_gradient:
            return super().dt_scalar_potential(t, x)
        tt, xx = self._tensors(t, x)
        with torch.enable_grad():
            return self.t_dt_phi(tt, xx, create_graph=False).detach().numpy()

    def free_energy(self, t: float) -> float:
        with torch.no_grad():
            return float(self.t_free_energy(torch.tensor([float(t)]))[0])

    def dt_free_energy(self, t):
        with torch.enable_grad():
            return float(self.t_dt_free_energy(torch.tensor([float(t)]), create_graph=False)[0])

    # -- checkpoints ---------------------------------------------------------

    def save(self, path, config_hash: str = "", extra: Optional[dict] = None) -> None:
        """Versioned ``.npz``: architecture JSON, float64 parameter vector, extras."""
        payload = dict(
            format=np.array(CHECKPOINT_FORMAT),
            arch=np.array(json.dumps(self.arch, sort_keys=True)),
            params=self.get_flat_params(),
            config_hash=np.array(config_hash),
        )
        for k, v in (extra or {}).items():
            payload[f"extra_{k}"] = np.asarray(v)
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path) -> tuple["MlpDrift", dict]:
        with np.load(Path(path), allow_pickle=False) as f:
            fmt = str(f["format"])
            if fmt != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {fmt!r}")
            arch = json.loads(str(f["arch"]))
            model = cls(**arch)
            model.set_flat_params(f["params"])
            meta = {"config_hash": str(f["config_hash"])}
            meta.update({k[6:]: f[k] for k in f.files if k.startswith("extra_")})
        return model, meta


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
