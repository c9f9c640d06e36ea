"""Experiment configuration: YAML files validated into dataclasses.

Unknown keys are rejected and missing required keys are reported by their
dotted path. ``--override a.b=value`` edits are applied to the raw tree
before validation; values are parsed as YAML scalars.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .drift import AnalyticGaussianDrift, DriftModel, MlpDrift, ZeroDrift
from .lattice import LatticeSpec, Phi4Potential
from .potentials import (FunnelPotential, MeanInterpolatedGmm, MovingGaussianPotential,
                         StudentTMixturePotential, TimePotential, circle_means, gaussian_anneal, gmm40)
from .sde import SCHEMES, DiffusionSchedule
from .train import TrainConfig


class ConfigError(ValueError):
    pass


POTENTIAL_KEYS = {
    "gaussian-anneal": {"dim", "sigma0", "sigma1"},
    "moving-gaussian": {"mean0", "mean1", "precision0", "precision1"},
    "gmm-circle": {"n_modes", "radius", "sigma", "base_sigma"},
    "gmm40": {"base_sigma"},
    "funnel": {"dim", "sigma"},
    "mos": {"dim", "n_components", "df", "loc_range", "seed"},
    "phi4": {"L", "D", "m2_0", "m2_1", "lam_1"},
}


@dataclass
class PotentialConfig:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class DriftConfig:
    kind: str = "mlp"  # mlp | zero | analytic
    width: int = 64
    depth: int = 2
    parameterization: str = "vector"
    n_freq: int = 2
    free_energy_width: int = 16
    output_scale: float = 0.1


@dataclass
class IntegratorConfig:
    scheme: str = "overdamped"
    steps: int = 100
    eps: float = 0.0
    eps_schedule: str = "constant"  # constant | ramp | piecewise
    eps_values: Optional[list] = None
    eps_breakpoints: Optional[list] = None
    mobility: float = 0.0
    resample_threshold: Optional[float] = None
    divergence_mode: str = "auto"
    checkpoint_every: int = 0


@dataclass
class EvalConfig:
    walkers: int = 2000
    metrics: list = field(default_factory=lambda: ["ess", "log_z"])
    reference_samples: int = 2000


@dataclass
class ExperimentConfig:
    potential: PotentialConfig
    drift: DriftConfig = field(default_factory=DriftConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    name: str = "run"


KNOWN_METRICS = {"ess", "log_z", "w2", "mmd", "kl_bound"}


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        key = f"{path}.{name}" if path else name
        if name not in raw:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"missing required key: {key}")
            continue
        value = raw[name]
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, key) if sub is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_NESTED: dict = {}


def _register_nested():
    _NESTED.update({
        (ExperimentConfig, "potential"): PotentialConfig,
        (ExperimentConfig, "drift"): DriftConfig,
        (ExperimentConfig, "integrator"): IntegratorConfig,
        (ExperimentConfig, "train"): TrainConfig,
        (ExperimentConfig, "eval"): EvalConfig,
    })


_register_nested()


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    pk = cfg.potential.kind
    if pk not in POTENTIAL_KEYS:
        raise ConfigError(f"potential.kind: unknown potential {pk!r}; choose from {sorted(POTENTIAL_KEYS)}")
    bad = sorted(set(cfg.potential.params) - POTENTIAL_KEYS[pk])
    if bad:
        raise ConfigError(f"unknown key(s) in potential.params for {pk}: {', '.join(bad)}")
    if cfg.drift.kind not in ("mlp", "zero", "analytic"):
        raise ConfigError(f"drift.kind: unknown drift {cfg.drift.kind!r}")
    if cfg.drift.kind == "analytic" and pk not in ("gaussian-anneal", "moving-gaussian"):
        raise ConfigError("drift.kind: analytic drift exists only for Gaussian potentials")
    if cfg.drift.parameterization not in ("vector", "scalar"):
        raise ConfigError(f"drift.parameterization: unknown value {cfg.drift.parameterization!r}")
    ic = cfg.integrator
    if ic.scheme not in SCHEMES:
        raise ConfigError(f"integrator.scheme: unknown scheme {ic.scheme!r}; choose from {SCHEMES}")
    if ic.steps < 1:
        raise ConfigError("integrator.steps: must be >= 1")
    try:
        eps_schedule(ic)
    except ValueError as exc:
        raise ConfigError(f"integrator: {exc}") from exc
    if ic.mobility < 0:
        raise ConfigError("integrator.mobility: must be non-negative")
    if ic.divergence_mode not in ("auto", "exact", "hutchinson"):
        raise ConfigError(f"integrator.divergence_mode: unknown mode {ic.divergence_mode!r}")
    unknown = sorted(set(cfg.eval.metrics) - KNOWN_METRICS)
    if unknown:
        raise ConfigError(f"eval.metrics: unknown metric(s) {', '.join(unknown)}")
    if cfg.eval.walkers < 2:
        raise ConfigError("eval.walkers: must be >= 2")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed: must be a non-negative integer")
    return cfg


def parse_config(raw: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, raw, ""))


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a mapping")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_raw(path) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping at top level")
    return raw


def load_config(path, overrides=None, seed: Optional[int] = None) -> tuple[ExperimentConfig, dict]:
    raw = apply_overrides(load_raw(path), overrides)
    if seed is not None:
        raw["seed"] = seed
    return parse_config(raw), raw


def to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["train"]["betas"] = list(d["train"]["betas"])
    return d


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


# ---------------------------------------------------------------------------
# factories


def eps_schedule(ic: IntegratorConfig, eps: Optional[float] = None) -> DiffusionSchedule:
    if eps is not None:
        return DiffusionSchedule.constant(eps)
    if ic.eps_schedule == "constant":
        return DiffusionSchedule.constant(ic.eps)
    if ic.eps_schedule == "ramp":
        return DiffusionSchedule.ramp(*(ic.eps_values or (0.0, ic.eps)))
    if ic.eps_schedule == "piecewise":
        return DiffusionSchedule.piecewise(ic.eps_breakpoints or (), ic.eps_values or (ic.eps,))
    raise ValueError(f"unknown eps_schedule {ic.eps_schedule!r}")


def make_potential(pc: PotentialConfig) -> TimePotential:
    p = dict(pc.params)
    k = pc.kind
    if k == "gaussian-anneal":
        return gaussian_anneal(**p)
    if k == "moving-gaussian":
        mean0, mean1 = np.asarray(p["mean0"], float), np.asarray(p["mean1"], float)
        A0, A1 = np.atleast_2d(np.asarray(p["precision0"], float)), np.atleast_2d(np.asarray(p["precision1"], float))
        return MovingGaussianPotential.linear(mean0, mean1, A0, A1)
    if k == "gmm-circle":
        means = circle_means(p.get("n_modes", 8), p.get("radius", 10.0))
        return MeanInterpolatedGmm(means, p.get("sigma", 1.0), p.get("base_sigma", 2.0))
    if k == "gmm40":
        return gmm40(**p)
    if k == "funnel":
        return FunnelPotential(**p)
    if k == "mos":
        return StudentTMixturePotential.random(**p)
    if k == "phi4":
        return Phi4Potential(LatticeSpec(**p))
    raise ConfigError(f"unknown potential {k!r}")


def make_drift(cfg: ExperimentConfig, potential: TimePotential, seed: int = 0) -> DriftModel:
    dc = cfg.drift
    if dc.kind == "zero":
        return ZeroDrift(potential.dim)
    if dc.kind == "analytic":
        return AnalyticGaussianDrift(potential)
    return MlpDrift(potential.dim, dc.width, dc.depth, dc.parameterization, dc.n_freq,
                    dc.free_energy_width, seed=seed, output_scale=dc.output_scale)


STREAMS = ("init", "train", "sample", "reference", "baseline")


def make_generators(seed: int) -> dict[str, np.random.Generator]:
    """One counter-based generator per named purpose, all derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.Philox(ss)) for name, ss in zip(STREAMS, children)}
