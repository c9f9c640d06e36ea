"""Command-line runner: train, sample, benchmark, validate-config.

Every run writes into its own output directory, which must not already
contain files. The resolved configuration is stored next to the outputs.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import (ConfigError, ExperimentConfig, apply_overrides, dump_config, eps_schedule, load_config,
                     make_drift, make_generators, make_potential, parse_config, to_dict)
from .drift import DriftModel, MlpDrift, ZeroDrift, config_hash
from .ensemble import WalkerEnsemble, log_partition_stderr
from .lattice import Phi4Potential, histogram_to_csv, hmc_oracle, magnetization, magnetization_histogram
from .metrics import MetricReport, deterministic_resample, mmd_rbf, reports_to_csv, w2_distance
from .sde import TimeGrid, integrate
from .train import TrainingDivergedError, pinn_loss_on_policy, rollout, train


def _prepare_out(out: Path) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"output directory {out} is not empty; runs never overwrite earlier results")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    (out / "config.yaml").write_text(dump_config(cfg))


# ---------------------------------------------------------------------------
# train


def run_train(cfg: ExperimentConfig, out: Path, resume: Optional[Path] = None) -> dict:
    out = _prepare_out(out)
    _write_config(cfg, out)
    if cfg.drift.kind != "mlp":
        raise ConfigError("drift.kind: only mlp drifts can be trained")
    gens = make_generators(cfg.seed)
    potential = make_potential(cfg.potential)
    meta = None
    if resume is not None:
        model, meta = MlpDrift.load(resume)
    else:
        model = make_drift(cfg, potential, seed=int(gens["init"].integers(2**31)))
    try:
        model, log = train(cfg.train, potential, model, gens["train"], log_path=out / "train_log.jsonl",
                           timing_path=out / "timing.jsonl", checkpoint_path=out / "checkpoint.npz",
                           checkpoint_every=100, resume_meta=meta)
    except TrainingDivergedError as exc:
        np.savez(out / "diverged_snapshot.npz", **exc.snapshot)
        raise
    summary = dict(iterations=len(log), final_loss=log[-1]["loss"] if log else None,
                   final_ess=log[-1]["ess"] if log else None, config_hash=config_hash(to_dict(cfg)))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# sample


def load_drift(cfg: ExperimentConfig, potential, checkpoint: Optional[Path]) -> DriftModel:
    if checkpoint is not None:
        model, _ = MlpDrift.load(checkpoint)
        if model.dim != potential.dim:
            raise ValueError(f"checkpoint dimension {model.dim} does not match potential dimension {potential.dim}")
        return model
    if cfg.drift.kind == "mlp":
        return ZeroDrift(potential.dim)
    return make_drift(cfg, potential)


def reference_samples(potential, n: int, rng) -> Optional[np.ndarray]:
    try:
        return potential.sample_target(n, rng)
    except NotImplementedError:
        return None


def sample_report(cfg: ExperimentConfig, potential, drift: DriftModel, rng: np.random.Generator,
                  eps: Optional[float] = None, steps: Optional[int] = None, scheme: Optional[str] = None,
                  reference: Optional[np.ndarray] = None, label: str = ""):
    ic = cfg.integrator
    steps = ic.steps if steps is None else steps
    scheme = ic.scheme if scheme is None else scheme
    ens = WalkerEnsemble.sample_base(potential, cfg.eval.walkers, rng)
    res = integrate(ens, potential, drift, TimeGrid.uniform(steps), eps=eps_schedule(ic, eps), scheme=scheme,
                    rng=rng, mobility=ic.mobility, resample_threshold=ic.resample_threshold,
                    divergence_mode=ic.divergence_mode)
    metrics = set(cfg.eval.metrics)
    w2 = mmd = kl = None
    if reference is not None and metrics & {"w2", "mmd"}:
        pts = deterministic_resample(res.ensemble.positions, res.ensemble.log_weights)
        w2 = w2_distance(pts, reference) if "w2" in metrics else None
        mmd = mmd_rbf(pts, reference) if "mmd" in metrics else None
    if "kl_bound" in metrics and drift.dt_free_energy(0.0) is not None:
        ro = rollout(drift, potential, TimeGrid.uniform(min(steps, 50)), min(cfg.eval.walkers, 500), 0.0, rng)
        kl = float(np.sqrt(max(pinn_loss_on_policy(drift, potential, ro), 0.0)))
    report = MetricReport([(float(t), float(e)) for t, e in zip(res.times, res.ess)],
                          res.ensemble.ess(), res.ensemble.log_partition_ratio(),
                          log_partition_stderr(res.ensemble.log_weights), w2, mmd, kl, label,
                          extra=dict(eps=eps if eps is not None else ic.eps, steps=steps, scheme=scheme,
                                     resamples=len(res.resample_steps), quarantined=res.n_quarantined))
    return report, res


def _write_sample_outputs(out: Path, report: MetricReport, res, prefix: str = "") -> None:
    res.ensemble.save(out / f"{prefix}ensemble.npz")
    res.ensemble.save(out / f"{prefix}ensemble.csv")
    (out / f"{prefix}ess_trajectory.csv").write_text(
        "t,ess,log_z\n" + "".join(f"{float(t)!r},{float(e)!r},{float(z)!r}\n" for t, e, z in zip(res.times, res.ess, res.log_z)))
    (out / f"{prefix}report.json").write_text(report.to_json())


def run_sample(cfg: ExperimentConfig, out: Path, checkpoint: Optional[Path] = None,
               eps: Optional[float] = None, steps: Optional[int] = None) -> MetricReport:
    out = _prepare_out(out)
    _write_config(cfg, out)
    gens = make_generators(cfg.seed)
    potential = make_potential(cfg.potential)
    drift = load_drift(cfg, potential, checkpoint)
    reference = None
    if set(cfg.eval.metrics) & {"w2", "mmd"}:
        reference = reference_samples(potential, cfg.eval.reference_samples, gens["reference"])
    report, res = sample_report(cfg, potential, drift, gens["sample"], eps, steps, reference=reference,
                                label="sample")
    _write_sample_outputs(out, report, res)
    return report


# ---------------------------------------------------------------------------
# benchmarks

_GMM_TRAIN = dict(walkers=256, steps=30, iterations=1500, learning_rate=2e-3)

SUITES = {
    "gmm": dict(
        config=dict(name="gmm", potential=dict(kind="gmm-circle", params=dict(n_modes=8, radius=10.0, sigma=1.0,
                                                                                base_sigma=2.0)),
                    drift=dict(kind="mlp", width=64, depth=3), train=_GMM_TRAIN,
                    eval=dict(walkers=2000, metrics=["ess", "log_z", "w2"], reference_samples=2000)),
        rows=[("AIS", "langevin", 4.0, 400), ("NETS-PINN eps=0", "overdamped", 0.0, 100),
              ("NETS-PINN eps=4", "overdamped", 4.0, 400)],
    ),
    "funnel": dict(
        config=dict(name="funnel", potential=dict(kind="funnel", params=dict(dim=10, sigma=3.0)),
                    drift=dict(kind="mlp", width=128, depth=3),
                    train=dict(walkers=256, steps=30, iterations=1500, learning_rate=1e-3),
                    eval=dict(walkers=2000, metrics=["ess", "log_z", "w2", "mmd"], reference_samples=2000)),
        rows=[("AIS", "langevin", 5.0, 100), ("NETS-PINN eps=5", "overdamped", 5.0, 100)],
    ),
    "mos": dict(
        config=dict(name="mos", potential=dict(kind="mos", params=dict(dim=50, n_components=10, df=2.0,
                                                                         loc_range=10.0, seed=0)),
                    drift=dict(kind="mlp", width=128, depth=3),
                    train=dict(walkers=256, steps=30, iterations=1500, learning_rate=1e-3),
                    eval=dict(walkers=2000, metrics=["ess", "log_z", "w2", "mmd"], reference_samples=2000)),
        rows=[("AIS", "langevin", 4.0, 100), ("NETS-PINN eps=4", "overdamped", 4.0, 100)],
    ),
    "phi4-free": dict(
        config=dict(name="phi4-free", potential=dict(kind="phi4", params=dict(L=4, D=2, m2_0=1.0, m2_1=0.25,
                                                                              lam_1=0.0)),
                    drift=dict(kind="mlp", width=64, depth=2),
                    train=dict(walkers=256, steps=50, iterations=500, learning_rate=1e-3),
                    eval=dict(walkers=2000, metrics=["ess", "log_z", "w2"], reference_samples=2000)),
        rows=[("AIS", "langevin", 1.0, 200), ("NETS-PINN eps=1", "overdamped", 1.0, 200)],
        hmc=True,
    ),
    "phi4-critical": dict(
        config=dict(name="phi4-critical", potential=dict(kind="phi4", params=dict(L=8, D=2, m2_0=1.0, m2_1=-1.0,
                                                                                  lam_1=0.9)),
                    drift=dict(kind="mlp", width=128, depth=2),
                    train=dict(walkers=128, steps=50, iterations=500, learning_rate=1e-3),
                    eval=dict(walkers=1000, metrics=["ess", "log_z"], reference_samples=2000)),
        rows=[("AIS", "langevin", 1.0, 1500), ("NETS-PINN eps=1", "overdamped", 1.0, 1500)],
        hmc=True,
    ),
}


def suite_config(name: str, overrides=None, seed: Optional[int] = None) -> ExperimentConfig:
    if name not in SUITES:
        raise ValueError(f"unknown benchmark suite {name!r}; choose from {sorted(SUITES)}")
    raw = apply_overrides(copy.deepcopy(SUITES[name]["config"]), overrides)
    if seed is not None:
        raw["seed"] = seed
    return parse_config(raw)


def run_benchmark(name: str, out: Path, overrides=None, seed: Optional[int] = None) -> str:
    """Train once, then sample the AIS baseline and each NETS row; returns the CSV table."""
    cfg = suite_config(name, overrides, seed)
    suite = SUITES[name]
    out = _prepare_out(out)
    _write_config(cfg, out)
    gens = make_generators(cfg.seed)
    potential = make_potential(cfg.potential)
    model = make_drift(cfg, potential, seed=int(gens["init"].integers(2**31)))
    model, _ = train(cfg.train, potential, model, gens["train"], log_path=out / "train_log.jsonl",
                     timing_path=out / "timing.jsonl", checkpoint_path=out / "checkpoint.npz")
    reference = None
    if set(cfg.eval.metrics) & {"w2", "mmd"}:
        reference = reference_samples(potential, cfg.eval.reference_samples, gens["reference"])
    reports = []
    for label, scheme, eps, steps in suite["rows"]:
        drift = ZeroDrift(potential.dim) if scheme == "langevin" else model
        rng = gens["baseline"] if scheme == "langevin" else gens["sample"]
        report, res = sample_report(cfg, potential, drift, rng, eps, steps, scheme, reference, label)
        reports.append(report)
        slug = label.lower().replace(" ", "_").replace("=", "")
        _write_sample_outputs(out, report, res, prefix=f"{slug}_")
        if suite.get("hmc"):
            counts, edges = magnetization_histogram(res.ensemble.positions, bins=40, range_=_m_range(potential),
                                                    log_weights=res.ensemble.log_weights)
            (out / f"{slug}_magnetization_hist.csv").write_text(histogram_to_csv(counts, edges))
    if suite.get("hmc"):
        spec = potential.spec
        hmc = hmc_oracle(spec, 1.0, n_samples=200, rng=gens["reference"], step_size=0.1, n_leapfrog=10,
                         n_chains=32, burn_in=300)
        counts, edges = np.histogram(magnetization(hmc.flat), bins=40, range=_m_range(potential), density=True)
        (out / "hmc_magnetization_hist.csv").write_text(histogram_to_csv(counts, edges))
        (out / "hmc_info.json").write_text(json.dumps(dict(acceptance=hmc.acceptance,
                                                           rejected_nonfinite=hmc.rejected_nonfinite)))
    table = reports_to_csv(reports)
    (out / "table.csv").write_text(table)
    return table


def _m_range(potential: Phi4Potential):
    v = potential.spec.volume
    return (-1.5 * v, 1.5 * v)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nets", description="Nonequilibrium transport sampler experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", type=Path)

    p = sub.add_parser("train", help="train a drift model")
    common(p)
    p.add_argument("--resume", type=Path, help="training checkpoint to continue from")
    p = sub.add_parser("sample", help="sample with a trained or analytic drift")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)
    p = sub.add_parser("benchmark", help="run a benchmark suite")
    p.add_argument("suite", choices=sorted(SUITES))
    common(p, config_required=False)
    p = sub.add_parser("validate-config", help="check a config file and print the resolved form")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    try:
        if args.command == "validate-config":
            cfg, _ = load_config(args.config, args.override)
            print(dump_config(cfg), end="")
            print("config OK", file=sys.stderr)
            return 0
        if args.command == "benchmark":
            out = args.out or Path("runs") / f"bench-{args.suite}"
            print(run_benchmark(args.suite, out, args.override, args.seed), end="")
            return 0
        cfg, _ = load_config(args.config, args.override, args.seed)
        out = args.out or Path("runs") / f"{cfg.name}-{args.command}-seed{cfg.seed}"
        if args.command == "train":
            print(json.dumps(run_train(cfg, out, args.resume), indent=2, sort_keys=True))
        else:
            report = run_sample(cfg, out, args.checkpoint, args.eps, args.steps)
            print(json.dumps(dict(terminal_ess=report.terminal_ess, log_z=report.log_z,
                                  log_z_stderr=report.log_z_stderr, w2=report.w2, mmd=report.mmd),
                             indent=2))
        return 0
    except (ConfigError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
