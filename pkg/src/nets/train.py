"""Training of drift models with the PINN and Action Matching objectives.

Each iteration draws a randomized time grid on [0, T], rolls walkers forward
under the current drift, freezes the trajectories, and takes one optimizer
step on a loss estimated from those frozen samples. No gradient flows
through the simulation.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch

from .drift import DriftModel, MlpDrift, config_hash, pinn_residual
from .ensemble import DegenerateWeightsError, WalkerEnsemble
from .potentials import TimePotential
from .sde import EXACT_DIVERGENCE_MAX_DIM, DiffusionSchedule, TimeGrid, integrate

WEIGHT_CLIP = 30.0


@dataclass
class TrainConfig:
    objective: str = "pinn"  # pinn | action-matching
    walkers: int = 256
    steps: int = 50
    iterations: int = 1000
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 0.0
    on_policy: bool = True
    random_grid: bool = True
    t_start: float = 0.1
    ramp_fraction: float = 0.5
    ess_floor: float = 0.5
    resample_threshold: Optional[float] = None
    log_every: int = 1

    def __post_init__(self):
        if self.objective not in ("pinn", "action-matching"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.t_start <= 1:
            raise ValueError("t_start must lie in (0, 1]")
        if not 0 < self.ramp_fraction <= 1:
            raise ValueError("ramp_fraction must lie in (0, 1]")
        if self.walkers < 2 or self.steps < 1 or self.iterations < 0:
            raise ValueError("need walkers >= 2, steps >= 1, iterations >= 0")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.objective == "action-matching" and not self.on_policy:
            raise ValueError("action matching needs weighted on-policy samples")
        self.betas = tuple(float(b) for b in self.betas)


class HorizonSchedule:
    """Linear ramp of T from t_start to 1, stalled while the terminal ESS is low.

    The ramp is indexed by a counter that only advances on iterations whose
    terminal ESS meets the floor, so T is non-decreasing and never exceeds 1.
    """

    def __init__(self, t_start: float, ramp_iterations: int, ess_floor: float):
        self.t_start = t_start
        self.ramp_iterations = max(int(ramp_iterations), 1)
        self.ess_floor = ess_floor
        self.progress = 0

    @property
    def T(self) -> float:
        frac = min(self.progress / self.ramp_iterations, 1.0)
        return min(self.t_start + (1.0 - self.t_start) * frac, 1.0)

    def update(self, terminal_ess: float) -> None:
        if terminal_ess >= self.ess_floor:
            self.progress += 1


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    """Frozen trajectories: positions (K+1, n, d) and log-weights (K+1, n)."""

    times: np.ndarray
    positions: np.ndarray
    log_weights: np.ndarray
    quadrature: np.ndarray
    ess: np.ndarray
    log_z: np.ndarray

    @property
    def terminal_ess(self) -> float:
        return float(self.ess[-1])


def rollout(model: DriftModel, potential: TimePotential, grid: TimeGrid, n: int, eps,
            rng: np.random.Generator, resample_threshold: Optional[float] = None,
            divergence_mode: str = "auto") -> Rollout:
    ens = WalkerEnsemble.sample_base(potential, n, rng)
    res = integrate(ens, potential, model, grid, eps=eps, scheme="overdamped", rng=rng,
                    resample_threshold=resample_threshold, divergence_mode=divergence_mode, record=True)
    return Rollout(grid.knots.copy(), res.positions, res.log_weights, grid.quadrature_weights(),
                   res.ess, res.log_z)


def slice_weights(log_weights: np.ndarray, clip: float = WEIGHT_CLIP) -> tuple[np.ndarray, bool]:
    """Self-normalized weights per time slice (rows), after clipping A - mean(A).

    Returns the (K+1, n) weight matrix and whether clipping changed anything.
    Quarantined walkers (A = -inf) get weight zero.
    """
    lw = np.atleast_2d(log_weights)
    out = np.zeros_like(lw)
    clipped = False
    for k, a in enumerate(lw):
        alive = np.isfinite(a)
        if not np.any(alive):
            raise DegenerateWeightsError(f"all weights degenerate in slice {k}")
        c = a[alive] - a[alive].mean()
        cc = np.clip(c, -clip, clip)
        clipped |= bool(np.any(cc != c))
        w = np.exp(cc - cc.max())
        out[k, alive] = w / w.sum()
    return out, clipped


# ---------------------------------------------------------------------------
# losses evaluated in numpy (any drift model)


def slice_residuals(drift: DriftModel, potential: TimePotential, ro: Rollout,
                    dt_free_energy: Union[None, str, Callable[[float], float]] = None) -> np.ndarray:
    """PINN residuals on every slice; ``dt_free_energy="optimal"`` uses the
    weighted slice mean, i.e. the best constant per slice."""
    w, _ = slice_weights(ro.log_weights)
    res = np.empty_like(ro.log_weights)
    for k, t in enumerate(ro.times):
        x = ro.positions[k]
        if dt_free_energy == "optimal":
            r0 = pinn_residual(drift, potential, t, x, dt_free_energy=0.0)
            res[k] = r0 - np.sum(w[k] * np.where(w[k] > 0, r0, 0.0))
        else:
            dtF = dt_free_energy(t) if callable(dt_free_energy) else None
            res[k] = pinn_residual(drift, potential, t, x, dt_free_energy=dtF)
    return res


def pinn_loss_on_policy(drift: DriftModel, potential: TimePotential, ro: Rollout,
                        dt_free_energy=None) -> float:
    """sum_k q_k sum_i w_ki r(t_k, X_ki)^2 with self-normalized slice weights."""
    w, _ = slice_weights(ro.log_weights)
    r = slice_residuals(drift, potential, ro, dt_free_energy)
    r = np.where(w > 0, r, 0.0)
    return float(np.sum(ro.quadrature * np.sum(w * r * r, axis=1)))


def pinn_loss_off_policy(drift: DriftModel, potential: TimePotential, times, points,
                         dt_free_energy=None) -> float:
    """Unweighted mean squared residual over arbitrary (t, x) samples."""
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if times.size == 0 or points.shape[0] == 0:
        raise ValueError("empty sample set")
    if times.size != points.shape[0]:
        raise ValueError("one time per point required")
    total = 0.0
    for t in np.unique(times):
        m = times == t
        dtF = dt_free_energy(t) if callable(dt_free_energy) else dt_free_energy
        r = pinn_residual(drift, potential, t, points[m], dt_free_energy=dtF)
        total += float(np.sum(r * r))
    return total / times.size


def weighted_dt_weight_variance(drift: DriftModel, potential: TimePotential, ro: Rollout) -> float:
    """sum_k q_k Var_w[div b - grad U.b - dU/dt] on each slice, computed directly."""
    w, _ = slice_weights(ro.log_weights)
    total = 0.0
    for k, t in enumerate(ro.times):
        x = ro.positions[k]
        b = drift.drift(t, x)
        g = drift.divergence(t, x) - np.sum(potential.grad(t, x) * b, axis=1) - potential.dt_energy(t, x)
        alive = w[k] > 0
        g, wk = g[alive], w[k][alive]
        m = np.sum(wk * g)
        total += ro.quadrature[k] * float(np.sum(wk * (g - m) ** 2))
    return total


# ---------------------------------------------------------------------------
# torch losses (differentiable in the model parameters)


def _slice_tensors(potential: TimePotential, ro: Rollout):
    K1, n, d = ro.positions.shape
    x = ro.positions.reshape(K1 * n, d)
    t = np.repeat(ro.times, n)
    grad_u = np.concatenate([potential.grad(tk, ro.positions[k]) for k, tk in enumerate(ro.times)])
    dt_u = np.concatenate([potential.dt_energy(tk, ro.positions[k]) for k, tk in enumerate(ro.times)])
    w, clipped = slice_weights(ro.log_weights)
    coef = (ro.quadrature[:, None] * w).reshape(-1)
    keep = coef > 0
    T = lambda a: torch.from_numpy(np.ascontiguousarray(a[keep]))
    return T(t), T(x).requires_grad_(True), T(grad_u), T(dt_u), T(coef), clipped


def pinn_loss_torch(model: MlpDrift, potential: TimePotential, ro: Rollout, divergence: str = "auto",
                    rng: Optional[np.random.Generator] = None) -> tuple[torch.Tensor, bool]:
    """On-policy PINN loss as a differentiable function of the parameters.

    The divergence is exact (one reverse pass per dimension) up to
    d = 16 under ``divergence="auto"``; above that, a single Hutchinson
    probe per sample with delta = 1e-3 (1 + |x|).
    """
    t, x, grad_u, dt_u, coef, clipped = _slice_tensors(potential, ro)
    if divergence == "auto":
        divergence = "exact" if model.dim <= EXACT_DIVERGENCE_MAX_DIM else "hutchinson"
    if divergence == "exact":
        b, div = model.t_drift_and_divergence(t, x, create_graph=True)
    else:
        rng = np.random.default_rng() if rng is None else rng
        xd = x.detach()
        eta = torch.from_numpy(rng.standard_normal(tuple(xd.shape)))
        delta = 1e-3 * (1.0 + torch.linalg.norm(xd, dim=1))
        b, div = model.t_drift_and_hutchinson(t, xd, eta, delta)
    r = div - (grad_u * b).sum(dim=1) - dt_u + model.t_dt_free_energy(t, create_graph=True)
    return (coef * r * r).sum(), clipped


def pinn_loss_off_policy_torch(model: MlpDrift, potential: TimePotential, times, points) -> torch.Tensor:
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if times.size == 0:
        raise ValueError("empty sample set")
    grad_u = np.concatenate([potential.grad(t, p[None]) for t, p in zip(times, points)])
    dt_u = np.concatenate([potential.dt_energy(t, p[None]) for t, p in zip(times, points)])
    t = torch.from_numpy(times)
    x = torch.from_numpy(points.copy()).requires_grad_(True)
    b, div = model.t_drift_and_divergence(t, x, create_graph=True)
    r = div - (torch.from_numpy(grad_u) * b).sum(dim=1) - torch.from_numpy(dt_u) + model.t_dt_free_energy(t)
    return (r * r).mean()


def am_loss_torch(phi_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], ro: Rollout) -> tuple[torch.Tensor, bool]:
    """Action Matching loss on frozen weighted trajectories.

    int_0^T E_t[|grad phi|^2 / 2 + d phi/dt] dt + E_0[phi_0] - E_T[phi_T]

    ``phi_fn(t, x)`` maps tensors (m,), (m, d) to (m,). Both boundary slices
    must be present in the rollout.
    """
    if ro.times.size < 2 or ro.times[0] != 0.0:
        raise ValueError("rollout must contain the t = 0 and t = T slices")
    K1, n, d = ro.positions.shape
    w, clipped = slice_weights(ro.log_weights)
    wt = torch.from_numpy(w)
    t = torch.from_numpy(np.repeat(ro.times, n)).requires_grad_(True)
    x = torch.from_numpy(ro.positions.reshape(K1 * n, d).copy()).requires_grad_(True)
    phi = phi_fn(t, x)
    gx, gt = torch.autograd.grad(phi.sum(), (x, t), create_graph=True, allow_unused=True, materialize_grads=True)
    integrand = (0.5 * (gx * gx).sum(dim=1) + gt).reshape(K1, n)
    phi = phi.reshape(K1, n)
    q = torch.from_numpy(ro.quadrature)
    bulk = (q * (wt * integrand).sum(dim=1)).sum()
    return bulk + (wt[0] * phi[0]).sum() - (wt[-1] * phi[-1]).sum(), clipped


# ---------------------------------------------------------------------------
# training loop


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainState:
    iteration: int = 0
    horizon_progress: int = 0
    log: list = field(default_factory=list)


def _adam_state(opt: torch.optim.Adam, model: MlpDrift) -> dict:
    # parameters that never received a gradient (e.g. the constant offset of
    # the free-energy head) have no optimizer state; store zeros for them
    st = [opt.state.get(p, {}) for p in model.params]
    steps = [float(s["step"]) for s in st if "step" in s]
    if not steps:
        return {}
    flat = lambda key: torch.cat([s[key].reshape(-1) if key in s else torch.zeros(p.numel())
                                  for s, p in zip(st, model.params)]).numpy()
    return dict(adam_step=np.array(max(steps)), adam_m=flat("exp_avg"), adam_v=flat("exp_avg_sq"))


def _load_adam_state(opt: torch.optim.Adam, model: MlpDrift, meta: dict) -> None:
    if "adam_step" not in meta:
        return
    m, v = torch.from_numpy(meta["adam_m"]), torch.from_numpy(meta["adam_v"])
    i = 0
    for p in model.params:
        k = p.numel()
        opt.state[p] = {"step": torch.tensor(float(meta["adam_step"])),
                        "exp_avg": m[i:i + k].reshape(p.shape).clone(),
                        "exp_avg_sq": v[i:i + k].reshape(p.shape).clone()}
        i += k


def encode_rng_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, default=lambda a: {"__array__": a.tolist(), "dtype": str(a.dtype)})


def decode_rng_state(rng: np.random.Generator, text: str) -> None:
    def hook(d):
        return np.array(d["__array__"], dtype=d["dtype"]) if "__array__" in d else d
    rng.bit_generator.state = json.loads(text, object_hook=hook)


def save_training_checkpoint(path, model: MlpDrift, opt, state: TrainState, rng: np.random.Generator,
                             cfg: TrainConfig) -> None:
    extra = _adam_state(opt, model)
    extra.update(iteration=np.array(state.iteration), horizon_progress=np.array(state.horizon_progress),
                 rng_state=np.array(encode_rng_state(rng)))
    model.save(path, config_hash(asdict(cfg)), extra)


def train(cfg: TrainConfig, potential: TimePotential, model: MlpDrift, rng: np.random.Generator,
          log_path: Optional[Path] = None, timing_path: Optional[Path] = None, checkpoint_path: Optional[Path] = None,
          checkpoint_every: int = 0, resume_meta: Optional[dict] = None,
          callback: Optional[Callable[[dict], None]] = None) -> tuple[MlpDrift, list]:
    """Run ``cfg.iterations`` optimizer steps; returns the model and the log records.

    ``resume_meta`` (from ``MlpDrift.load``) restores the iteration counter,
    horizon progress, optimizer moments and generator state. The JSONL log at
    ``log_path`` holds only seed-determined fields; wall-clock times go to
    ``timing_path`` so that reruns produce byte-identical logs.
    """
    if cfg.objective == "action-matching" and not model.is_gradient:
        raise ValueError("action matching needs a scalar-potential model")
    opt = torch.optim.Adam(model.params, lr=cfg.learning_rate, betas=cfg.betas)
    horizon = HorizonSchedule(cfg.t_start, cfg.ramp_fraction * cfg.iterations, cfg.ess_floor)
    state = TrainState()
    if resume_meta:
        _load_adam_state(opt, model, resume_meta)
        state.iteration = int(resume_meta["iteration"])
        horizon.progress = int(resume_meta["horizon_progress"])
        decode_rng_state(rng, str(resume_meta["rng_state"]))
    eps = DiffusionSchedule.constant(cfg.eps)
    log_fh = open(log_path, "a") if log_path is not None else None
    timing_fh = open(timing_path, "a") if timing_path is not None else None
    t_wall = time.perf_counter()
    try:
        while state.iteration < cfg.iterations:
            T = horizon.T
            grid = (TimeGrid.random(cfg.steps, rng, T) if cfg.random_grid
                    else TimeGrid.uniform(cfg.steps, T))
            ro = rollout(model, potential, grid, cfg.walkers, eps, rng, cfg.resample_threshold)
            if not cfg.on_policy:
                # off-policy: the rollout density itself is the sampling density
                ro = Rollout(ro.times, ro.positions, np.zeros_like(ro.log_weights), ro.quadrature,
                             ro.ess, ro.log_z)
            model.zero_grad()
            if cfg.objective == "pinn":
                loss, clipped = pinn_loss_torch(model, potential, ro, rng=rng)
            else:
                loss, clipped = am_loss_torch(model.t_phi, ro)
            value = float(loss.detach())
            if not np.isfinite(value):
                snapshot = dict(iteration=state.iteration, T=T, params=model.get_flat_params(),
                                positions=ro.positions, log_weights=ro.log_weights)
                raise TrainingDivergedError(f"non-finite loss at iteration {state.iteration}", snapshot)
            loss.backward()
            opt.step()
            horizon.update(ro.terminal_ess)
            state.horizon_progress = horizon.progress
            rec = dict(iteration=state.iteration, loss=value, ess=ro.terminal_ess,
                       log_z=float(ro.log_z[-1]), T=T, clipped=clipped,
                       wall_time=time.perf_counter() - t_wall)
            if cfg.objective == "pinn":
                rec["kl_bound"] = float(np.sqrt(max(value, 0.0)))
            state.log.append(rec)
            if log_fh is not None and state.iteration % cfg.log_every == 0:
                log_fh.write(json.dumps({k: v for k, v in rec.items() if k != "wall_time"}) + "\n")
                log_fh.flush()
            if timing_fh is not None:
                timing_fh.write(json.dumps({"iteration": rec["iteration"], "wall_time": rec["wall_time"]}) + "\n")
            if callback is not None:
                callback(rec)
            state.iteration += 1
            if checkpoint_path is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
                save_training_checkpoint(checkpoint_path, model, opt, state, rng, cfg)
    finally:
        for fh in (log_fh, timing_fh):
            if fh is not None:
                fh.close()
    if checkpoint_path is not None:
        save_training_checkpoint(checkpoint_path, model, opt, state, rng, cfg)
    return model, state.log


def evaluate_sampler(model: DriftModel, potential: TimePotential, n: int, steps: int, eps: float,
                     rng: np.random.Generator, scheme: str = "overdamped", t_max: float = 1.0):
    """Fresh walkers on a uniform grid; returns the IntegrationResult."""
    ens = WalkerEnsemble.sample_base(potential, n, rng)
    return integrate(ens, potential, model, TimeGrid.uniform(steps, t_max), eps=eps, scheme=scheme, rng=rng)
