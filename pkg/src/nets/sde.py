"""Time integrators for the coupled walker/weight dynamics.

All schemes are explicit Euler-Maruyama with drift, potential and weight
integrands evaluated at the left endpoint of each step. Every step function
takes either a generator ``rng`` or pre-drawn standard normal ``noise`` of
shape (n, d), which makes runs reproducible and lets two schemes share one
Brownian path.

Walkers whose state turns non-finite are quarantined: their log-weight is set
to -inf, their position is frozen, and a record is appended to
``ensemble.diagnostics``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .drift import DriftModel
from .ensemble import WalkerEnsemble, ess, log_mean_exp, systematic_indices
from .potentials import TimePotential

EXACT_DIVERGENCE_MAX_DIM = 16


@dataclass
class TimeGrid:
    """Knots 0 = t_0 < ... < t_K = T with T <= 1."""

    knots: np.ndarray
    mode: str = "fixed"

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=np.float64)
        k = self.knots
        if k.ndim != 1 or k.size < 2:
            raise ValueError("a time grid needs at least two knots")
        if k[0] != 0.0 or k[-1] > 1.0 + 1e-12:
            raise ValueError("knots must start at 0 and end at or before 1")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        if self.mode not in ("fixed", "uniform-random"):
            raise ValueError(f"unknown grid mode {self.mode!r}")

    @classmethod
    def uniform(cls, n_steps: int, t_max: float = 1.0) -> "TimeGrid":
        return cls(np.linspace(0.0, t_max, n_steps + 1), "fixed")

    @classmethod
    def random(cls, n_steps: int, rng: np.random.Generator, t_max: float = 1.0) -> "TimeGrid":
        """Endpoints pinned; the n_steps - 1 interior knots are sorted U(0, T) draws."""
        if n_steps < 1:
            raise ValueError("need at least one step")
        while True:
            inner = np.sort(rng.uniform(0.0, t_max, n_steps - 1))
            knots = np.concatenate([[0.0], inner, [t_max]])
            if np.all(np.diff(knots) > 0):
                return cls(knots, "uniform-random")

    @property
    def n_steps(self) -> int:
        return self.knots.size - 1

    @property
    def t_max(self) -> float:
        return float(self.knots[-1])

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.knots)

    def quadrature_weights(self) -> np.ndarray:
        """Weights w_k with sum_k w_k f(t_k) estimating int_0^T f dt.

        Fixed grids use the trapezoid rule. Random grids put T/(K-1) on each
        interior knot and nothing on the pinned endpoints, which is an
        unbiased estimator because the interior knots are iid uniform.
        """
        k = self.knots
        if self.mode == "fixed" or self.n_steps < 2:
            w = np.zeros_like(k)
            d = np.diff(k)
            w[:-1] += d / 2
            w[1:] += d / 2
            return w
        w = np.full_like(k, self.t_max / (self.n_steps - 1))
        w[0] = w[-1] = 0.0
        return w


@dataclass
class DiffusionSchedule:
    """epsilon_t >= 0: constant, linear ramp, or piecewise constant."""

    kind: str = "constant"
    values: Sequence[float] = (0.0,)
    breakpoints: Sequence[float] = ()

    def __post_init__(self):
        self.values = tuple(float(v) for v in self.values)
        self.breakpoints = tuple(float(b) for b in self.breakpoints)
        if any(v < 0 or not np.isfinite(v) for v in self.values):
            raise ValueError("diffusion coefficients must be finite and non-negative")
        if self.kind == "constant" and len(self.values) != 1:
            raise ValueError("constant schedule takes one value")
        elif self.kind == "ramp" and len(self.values) != 2:
            raise ValueError("ramp schedule takes (eps_start, eps_end)")
        elif self.kind == "piecewise":
            if len(self.values) != len(self.breakpoints) + 1:
                raise ValueError("piecewise schedule needs one more value than breakpoints")
            if list(self.breakpoints) != sorted(self.breakpoints):
                raise ValueError("breakpoints must be sorted")
        elif self.kind not in ("constant", "ramp", "piecewise"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, eps: float) -> "DiffusionSchedule":
        return cls("constant", (eps,))

    @classmethod
    def ramp(cls, eps_start: float, eps_end: float) -> "DiffusionSchedule":
        return cls("ramp", (eps_start, eps_end))

    @classmethod
    def piecewise(cls, breakpoints, values) -> "DiffusionSchedule":
        return cls("piecewise", tuple(values), tuple(breakpoints))

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.values[0]
        if self.kind == "ramp":
            a, b = self.values
            return a + (b - a) * float(t)
        return self.values[int(np.searchsorted(self.breakpoints, t, side="right"))]


def as_schedule(eps) -> DiffusionSchedule:
    return eps if isinstance(eps, DiffusionSchedule) else DiffusionSchedule.constant(float(eps))


@dataclass
class InertialState:
    """Auxiliary momenta R with mobility mu; R_0 ~ N(0, mu I)."""

    momenta: np.ndarray
    mobility: float

    def __post_init__(self):
        if self.mobility < 0:
            raise ValueError("mobility must be non-negative")
        self.momenta = np.atleast_2d(np.asarray(self.momenta, dtype=np.float64))

    @classmethod
    def sample(cls, n: int, dim: int, mobility: float, rng: np.random.Generator) -> "InertialState":
        if mobility < 0:
            raise ValueError("mobility must be non-negative")
        if mobility == 0:
            return cls(np.zeros((n, dim)), 0.0)
        return cls(np.sqrt(mobility) * rng.standard_normal((n, dim)), mobility)


# ---------------------------------------------------------------------------
# shared pieces


def _noise(rng, noise, shape):
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != shape:
            raise ValueError(f"noise has shape {noise.shape}, expected {shape}")
        return noise
    if rng is None:
        raise ValueError("pass either rng or noise")
    return rng.standard_normal(shape)


def _resolve_mode(drift: DriftModel, mode: str) -> str:
    if mode != "auto":
        return mode
    cheap = getattr(drift, "cheap_exact_divergence", True)
    return "exact" if cheap or drift.dim <= EXACT_DIVERGENCE_MAX_DIM else "hutchinson"


def drift_and_divergence(drift: DriftModel, t: float, x: np.ndarray, mode: str = "auto",
                         rng: Optional[np.random.Generator] = None, probes: int = 64):
    mode = _resolve_mode(drift, mode)
    if mode == "exact" and hasattr(drift, "drift_and_divergence"):
        return drift.drift_and_divergence(t, x)
    b = drift.drift(t, x)
    return b, drift.divergence(t, x, mode=mode, rng=rng, probes=probes)


def _commit(ensemble: WalkerEnsemble, t_new: float, x_new, a_new, extra=None, reason="non-finite state"):
    """Build the post-step ensemble, quarantining walkers with bad values."""
    bad = ~np.all(np.isfinite(x_new), axis=1) | np.isnan(a_new) | (a_new == np.inf)
    if extra is not None:
        bad |= ~np.all(np.isfinite(extra), axis=1)
    dead = ~ensemble.alive
    freeze = bad | dead
    x_out = np.where(freeze[:, None], ensemble.positions, x_new)
    a_out = np.where(freeze, -np.inf, a_new)
    diags = list(ensemble.diagnostics)
    for i in np.flatnonzero(bad & ~dead):
        diags.append({"time": float(ensemble.time), "walker": int(i), "reason": reason})
    return WalkerEnsemble(x_out, a_out, t_new, diags), freeze


def _require_positive(eps_t: float, scheme: str):
    if not eps_t > 0:
        raise ValueError(f"{scheme} requires a positive diffusion coefficient")


# ---------------------------------------------------------------------------
# step functions


def step_annealed_langevin(ensemble: WalkerEnsemble, potential: TimePotential, eps, dt: float,
                           rng=None, noise=None) -> WalkerEnsemble:
    """Transport-free dynamics: Langevin moves plus A <- A - dU/dt dt (AIS)."""
    t, x = ensemble.time, ensemble.positions
    e = as_schedule(eps)(t)
    with np.errstate(all="ignore"):
        g = potential.grad(t, x)
        dtu = potential.dt_energy(t, x)
        xi = _noise(rng, noise, x.shape)
        x_new = x - e * g * dt + np.sqrt(2.0 * e * dt) * xi
        a_new = ensemble.log_weights + (-dtu) * dt
    return _commit(ensemble, t + dt, x_new, a_new)[0]


def step_overdamped(ensemble: WalkerEnsemble, potential: TimePotential, drift: DriftModel, eps,
                    dt: float, rng=None, noise=None, divergence_mode: str = "auto",
                    probes: int = 64) -> WalkerEnsemble:
    """X <- X - eps grad U dt + b dt + sqrt(2 eps dt) xi;
    A <- A + (div b - grad U . b - dU/dt) dt."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    t, x = ensemble.time, ensemble.positions
    e = as_schedule(eps)(t)
    with np.errstate(all="ignore"):
        g = potential.grad(t, x)
        dtu = potential.dt_energy(t, x)
        b, div = drift_and_divergence(drift, t, x, divergence_mode, rng, probes)
        xi = _noise(rng, noise, x.shape)
        x_new = x - e * g * dt + b * dt + np.sqrt(2.0 * e * dt) * xi
        a_new = ensemble.log_weights + (div - np.sum(g * b, axis=1) - dtu) * dt
    return _commit(ensemble, t + dt, x_new, a_new)[0]


def discrete_kernel_energy(x, y, grad_u, b, eps: float, dt: float, sign: int) -> np.ndarray:
    """|y - x + dt (eps grad U(x) - sign b(x))|^2 / (4 eps dt)."""
    r = y - x + dt * (eps * grad_u - sign * b)
    return np.sum(r * r, axis=1) / (4.0 * eps * dt)


def step_discrete_weights(ensemble: WalkerEnsemble, potential: TimePotential, drift: DriftModel, eps,
                          dt: float, rng=None, noise=None) -> WalkerEnsemble:
    """Same move as step_overdamped; the weight is the forward/backward kernel
    ratio, which keeps E[e^A] = Z_t/Z_0 exactly at any step size."""
    t, x = ensemble.time, ensemble.positions
    e = as_schedule(eps)(t)
    _require_positive(e, "discrete-time weights")
    with np.errstate(all="ignore"):
        g = potential.grad(t, x)
        b = drift.drift(t, x)
        xi = _noise(rng, noise, x.shape)
        y = x - e * g * dt + b * dt + np.sqrt(2.0 * e * dt) * xi
        g_y = potential.grad(t, y)
        b_y = drift.drift(t, y)
        inc = (potential.energy(t, x) - potential.energy(t + dt, y)
               + discrete_kernel_energy(x, y, g, b, e, dt, +1)
               - discrete_kernel_energy(y, x, g_y, b_y, e, dt, -1))
        a_new = ensemble.log_weights + inc
    return _commit(ensemble, t + dt, y, a_new)[0]


def step_inertial(ensemble: WalkerEnsemble, inertial: InertialState, potential: TimePotential,
                  drift: DriftModel, eps, dt: float, rng=None, noise=None,
                  divergence_mode: str = "auto", probes: int = 64):
    """X <- X + (b + R) dt;
    R <- R - mu grad U dt - (mu/eps) R dt + mu sqrt(2 dt/eps) xi.

    The weight integrand is the same as in step_overdamped. With mu = 0 the
    momenta stay zero and X follows dX = b dt.
    """
    t, x, r = ensemble.time, ensemble.positions, inertial.momenta
    mu = inertial.mobility
    e = as_schedule(eps)(t)
    if mu > 0:
        _require_positive(e, "inertial dynamics")
    with np.errstate(all="ignore"):
        g = potential.grad(t, x)
        dtu = potential.dt_energy(t, x)
        b, div = drift_and_divergence(drift, t, x, divergence_mode, rng, probes)
        x_new = x + (b + r) * dt
        if mu > 0:
            xi = _noise(rng, noise, x.shape)
            r_new = r - mu * g * dt - (mu / e) * r * dt + mu * np.sqrt(2.0 * dt / e) * xi
        else:
            r_new = r.copy()
        a_new = ensemble.log_weights + (div - np.sum(g * b, axis=1) - dtu) * dt
    out, frozen = _commit(ensemble, t + dt, x_new, a_new, extra=r_new)
    r_out = np.where(frozen[:, None], r, r_new)
    return out, InertialState(r_out, mu)


def step_phi_form_weights(ensemble: WalkerEnsemble, potential: TimePotential, phi_model: DriftModel,
                          eps, dt: float, rng=None, noise=None) -> WalkerEnsemble:
    """Overdamped move with b = grad phi and a Laplacian-free weight update.

    dA = eps^-1 d phi - (dU/dt + eps^-1 dphi/dt + eps^-1 |grad phi|^2) dt
         - sqrt(2/eps) grad phi . dW

    The same Brownian increment drives X. Using the left-endpoint eps inside
    each step keeps the update valid for a time-varying schedule.
    """
    if not phi_model.is_gradient:
        raise ValueError("phi-form weights need a gradient-parameterized model")
    t, x = ensemble.time, ensemble.positions
    e = as_schedule(eps)(t)
    _require_positive(e, "phi-form weights")
    with np.errstate(all="ignore"):
        g = potential.grad(t, x)
        dtu = potential.dt_energy(t, x)
        b = phi_model.drift(t, x)
        phi0 = phi_model.scalar_potential(t, x)
        dphi = phi_model.dt_scalar_potential(t, x)
        xi = _noise(rng, noise, x.shape)
        dw = np.sqrt(dt) * xi
        x_new = x - e * g * dt + b * dt + np.sqrt(2.0 * e * dt) * xi
        phi1 = phi_model.scalar_potential(t + dt, x_new)
        inc = ((phi1 - phi0) / e
               - (dtu + dphi / e + np.sum(b * b, axis=1) / e) * dt
               - np.sqrt(2.0 / e) * np.sum(b * dw, axis=1))
        a_new = ensemble.log_weights + inc
    return _commit(ensemble, t + dt, x_new, a_new)[0]


# ---------------------------------------------------------------------------
# driver

SCHEMES = ("overdamped", "discrete", "inertial", "phi", "langevin")


@dataclass
class IntegrationResult:
    ensemble: WalkerEnsemble
    times: np.ndarray
    ess: np.ndarray
    log_z: np.ndarray
    resample_steps: list = field(default_factory=list)
    positions: Optional[np.ndarray] = None
    log_weights: Optional[np.ndarray] = None
    inertial: Optional[InertialState] = None

    @property
    def n_quarantined(self) -> int:
        return int(np.sum(~self.ensemble.alive))


def integrate(ensemble: WalkerEnsemble, potential: TimePotential, drift: Optional[DriftModel],
              grid: TimeGrid, eps=0.0, scheme: str = "overdamped", rng: Optional[np.random.Generator] = None,
              mobility: float = 0.0, inertial: Optional[InertialState] = None,
              resample_threshold: Optional[float] = None, divergence_mode: str = "auto",
              probes: int = 64, record: bool = False, checkpoint_every: int = 0,
              checkpoint_dir: Optional[Path] = None,
              callback: Optional[Callable[[int, WalkerEnsemble], None]] = None) -> IntegrationResult:
    """Run one scheme across a time grid.

    With ``resample_threshold`` set, walkers are systematically resampled
    whenever the ESS fraction drops below it (never after the last step).
    ``record`` keeps the pre-resampling positions and log-weights at every
    knot. ``checkpoint_every`` > 0 dumps the ensemble to ``checkpoint_dir``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if rng is None:
        rng = np.random.default_rng()
    eps = as_schedule(eps)
    if abs(ensemble.time - grid.knots[0]) > 1e-12:
        raise ValueError("ensemble time does not match the start of the grid")
    if scheme != "langevin" and drift is None:
        raise ValueError(f"scheme {scheme!r} needs a drift model")
    if scheme == "inertial" and inertial is None:
        inertial = InertialState.sample(ensemble.n, ensemble.dim, mobility, rng)
    if checkpoint_every and checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    K = grid.n_steps
    ess_traj = np.empty(K + 1)
    logz = np.empty(K + 1)
    ess_traj[0], logz[0] = ess(ensemble.log_weights), log_mean_exp(ensemble.log_weights)
    pos = lw = None
    if record:
        pos = np.empty((K + 1,) + ensemble.positions.shape)
        lw = np.empty((K + 1, ensemble.n))
        pos[0], lw[0] = ensemble.positions, ensemble.log_weights
    resampled = []
    ens = ensemble
    for k in range(K):
        dt = grid.knots[k + 1] - grid.knots[k]
        ens.time = float(grid.knots[k])
        if scheme == "overdamped":
            ens = step_overdamped(ens, potential, drift, eps, dt, rng, None, divergence_mode, probes)
        elif scheme == "discrete":
            ens = step_discrete_weights(ens, potential, drift, eps, dt, rng)
        elif scheme == "inertial":
            ens, inertial = step_inertial(ens, inertial, potential, drift, eps, dt, rng, None,
                                          divergence_mode, probes)
        elif scheme == "phi":
            ens = step_phi_form_weights(ens, potential, drift, eps, dt, rng)
        else:
            ens = step_annealed_langevin(ens, potential, eps, dt, rng)
        ens.time = float(grid.knots[k + 1])
        ess_traj[k + 1], logz[k + 1] = ens.ess(), ens.log_partition_ratio()
        if record:
            pos[k + 1], lw[k + 1] = ens.positions, ens.log_weights
        if callback is not None:
            callback(k + 1, ens)
        if checkpoint_every and checkpoint_dir is not None and (k + 1) % checkpoint_every == 0:
            ens.save(checkpoint_dir / f"ensemble_{k + 1:06d}.npz")
        if resample_threshold is not None and k + 1 < K and ess_traj[k + 1] < resample_threshold:
            idx = systematic_indices(ens.log_weights, rng)
            level = log_mean_exp(ens.log_weights)
            ens = WalkerEnsemble(ens.positions[idx].copy(), np.full(ens.n, level), ens.time,
                                 list(ens.diagnostics))
            if inertial is not None:
                inertial = InertialState(inertial.momenta[idx].copy(), inertial.mobility)
            resampled.append(k + 1)
    return IntegrationResult(ens, grid.knots.copy(), ess_traj, logz, resampled, pos, lw, inertial)
