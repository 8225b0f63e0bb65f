"""Command-line driver: tdcr <stage> [--config PATH] [--set key=value ...] [--out DIR] [--seed N]."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import compute_normalizer, generate_sessions, load_dataset, make_splits, save_dataset
from .dynamics import (
    DynamicsModel, WindowSet, evaluate_prediction, load_dynamics, save_dynamics, train_dynamics,
)
from .policy import (
    PolicyNetwork, PolicyWindows, evaluate_tracking_loss, load_policy, save_policy, train_policy,
)
from .reports import write_csv, write_svg
from .suites import (
    ABLATION_COLUMNS, CURVE_COLUMNS, EVAL_DATASETS, METRIC_COLUMNS, ablation_suite, long_horizon_episode,
    long_horizon_probe, prediction_curve_rows, robustness_suite,
)


class Run:
    """Resolved config plus the artifact layout of one run directory."""

    def __init__(self, cfg: ExperimentConfig, out: str):
        self.cfg = cfg
        self.dir = cfg.run_dir(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_file = self.dir / "config.json"
        if not cfg_file.exists():
            cfg_file.write_text(cfg.to_json() + "\n")

    @property
    def data(self) -> Path:
        return self.dir / "data"

    @property
    def dyn_ckpt(self) -> Path:
        explicit = self.cfg["dyn.checkpoint_path"]
        return Path(explicit) if explicit else self.dir / "checkpoints" / "dynamics.tdck"

    @property
    def pol_ckpt(self) -> Path:
        return self.dir / "checkpoints" / "policy.tdck"

    def dataset(self):
        if not (self.data / "manifest.json").exists():
            raise click.ClickException(f"no dataset in {self.data}; run generate-data first")
        manifest, episodes = load_dataset(self.data)
        return episodes, manifest.splits

    def split(self, name: str):
        episodes, splits = self.dataset()
        return [episodes[i] for i in splits.indices(name)], episodes, splits


def common(f):
    f = click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")(f)
    f = click.option("--out", default="runs", show_default=True, help="Output root directory.")(f)
    f = click.option("--set", "overrides", multiple=True, help="Override a config key: key=value.")(f)
    f = click.option("--config", "config_path", default=None, help="YAML config file.")(f)
    f = click.option("--force", is_flag=True, help="Recompute even if outputs exist.")(f)
    return f


def load_run(config_path, overrides, seed, out) -> Run:
    try:
        cfg = ExperimentConfig.load(config_path, overrides, seed)
    except ConfigError as err:
        raise click.UsageError(f"invalid config: {err}") from None
    return Run(cfg, out)


def echo_json(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


@click.group()
def main() -> None:
    """Learned dynamics and neural control for a simulated tendon-driven continuum robot."""


@main.command("generate-data")
@common
def generate_data(config_path, overrides, seed, out, force):
    """Collect multi-session episodes with the hybrid baseline and write splits."""
    run = load_run(config_path, overrides, seed, out)
    if (run.data / "manifest.json").exists() and not force:
        click.echo(f"dataset exists: {run.data}")
        return
    episodes = generate_sessions(run.cfg.generation(), run.cfg.plant())
    splits = make_splits(episodes, seed=run.cfg["seed"])
    save_dataset(run.data, episodes, splits, run.cfg["seed"])
    counts = {s: sum(e.steps for e, t in zip(episodes, splits.split) if t == s) for s in EVAL_DATASETS + ("train",)}
    echo_json({"run_dir": str(run.dir), "episodes": len(episodes), "steps": counts})


@main.command("train-dynamics")
@common
def train_dynamics_cmd(config_path, overrides, seed, out, force):
    """Train the dynamics model on D_train."""
    run = load_run(config_path, overrides, seed, out)
    ckpt = run.dir / "checkpoints" / "dynamics.tdck"
    if ckpt.exists() and not force:
        click.echo(f"dynamics checkpoint exists: {ckpt}")
        return
    train, _, _ = run.split("train")
    dc = run.cfg.dynamics()
    model = DynamicsModel(dc, compute_normalizer(train))
    res = train_dynamics(model, WindowSet.build(train, model.normalizer, dc.ni, dc.nr), run.cfg.dyn_train())
    save_dynamics(ckpt, model)
    write_csv(run.dir / "dyn_loss.csv", ("iteration", "loss"),
              [{"iteration": i, "loss": v} for i, v in enumerate(res.losses)])
    echo_json({"checkpoint": str(ckpt), "initial_loss": res.losses[0], "final_loss": res.losses[-1],
               "seconds": round(res.seconds, 1)})


@main.command("eval-dynamics")
@common
def eval_dynamics(config_path, overrides, seed, out, force):
    """First-step and per-step errors on D_test / D_traj / D_date plus the long-horizon probe."""
    run = load_run(config_path, overrides, seed, out)
    model = _load_dyn(run)
    episodes, splits = run.dataset()
    stride = run.cfg["eval.windows_stride"]
    curves, summary = [], {}
    for d in EVAL_DATASETS:
        ws = WindowSet.build([episodes[i] for i in splits.indices(d)], model.normalizer, model.cfg.ni,
                             model.cfg.nr, stride)
        rep = evaluate_prediction(model, ws)
        curves += prediction_curve_rows(model.cfg.variant, d, rep)
        summary[d] = {"first_pos_mm": rep.first_step[0] * 1000, "first_rot_deg": float(np.degrees(rep.first_step[1])),
                      "mean_pos_mm": rep.mean[0] * 1000}
    write_csv(run.dir / "curves.csv", CURVE_COLUMNS, curves)
    phases = run.cfg["eval.long_phases"]
    ep = long_horizon_episode(run.cfg.plant(), sum(phases) + 1, run.cfg["seed"], run.cfg.baseline())
    lh = long_horizon_probe(model, ep, phases)
    write_csv(run.dir / "long_horizon.csv", ("step", "phase", "pos_err_mm", "rot_err_deg"),
              [{"step": k, "phase": int(np.searchsorted(np.cumsum(phases), k, side="right")),
                "pos_err_mm": lh.pos_err[k] * 1000, "rot_err_deg": np.degrees(lh.rot_err[k])}
               for k in range(len(lh.pos_err))])
    summary["long_horizon_phase_mm"] = [lh.phase_mean(k) * 1000 for k in range(3)]
    series = {d: (np.arange(1, model.cfg.nr + 1), np.array([r["pos_err_mm"] for r in curves if r["dataset"] == d]))
              for d in EVAL_DATASETS}
    write_svg(run.dir / "plots" / "prediction_error.svg", series, "Prediction error vs horizon", "step", "mm")
    write_svg(run.dir / "plots" / "long_horizon.svg",
              {"position error": (np.arange(len(lh.pos_err)), lh.pos_err * 1000)},
              "Long-horizon protocol", "step", "mm")
    echo_json(summary)


@main.command("train-policy")
@common
def train_policy_cmd(config_path, overrides, seed, out, force):
    """Train the policy through the frozen dynamics model."""
    run = load_run(config_path, overrides, seed, out)
    if run.pol_ckpt.exists() and not force:
        click.echo(f"policy checkpoint exists: {run.pol_ckpt}")
        return
    dyn = _load_dyn(run)
    train, episodes, splits = run.split("train")
    test = [episodes[i] for i in splits.indices("test")]
    pcfg, tcfg = run.cfg.policy(), run.cfg.pol_train()
    u_max = run.cfg["plant.u_max"]
    windows = PolicyWindows.build(train, dyn, tcfg.nr, pcfg.nf)
    held = PolicyWindows.build(test, dyn, tcfg.nr, pcfg.nf, stride=200)
    policy = PolicyNetwork(pcfg, dyn.hidden)
    before = evaluate_tracking_loss(policy, dyn, held, tcfg, u_max)
    res = train_policy(policy, dyn, windows, tcfg, u_max)
    after = evaluate_tracking_loss(policy, dyn, held, tcfg, u_max)
    save_policy(run.pol_ckpt, policy)
    write_csv(run.dir / "policy_loss.csv", ("iteration", "loss", "tracking"),
              [{"iteration": i, "loss": a, "tracking": b} for i, (a, b) in enumerate(zip(res.losses, res.tracking))])
    echo_json({"checkpoint": str(run.pol_ckpt), "heldout_before": before, "heldout_after": after,
               "seconds": round(res.seconds, 1)})


@main.command("eval-policy")
@common
def eval_policy(config_path, overrides, seed, out, force):
    """Closed-loop grid: controllers x shapes x speeds x payloads; writes metrics.csv."""
    run = load_run(config_path, overrides, seed, out)
    cfg = run.cfg
    controllers = cfg["eval.controllers"]
    policy = dyn = None
    if "policy" in controllers:
        dyn = _load_dyn(run)
        if not run.pol_ckpt.exists():
            raise click.ClickException(f"policy checkpoint missing: {run.pol_ckpt}; run train-policy first")
        policy = load_policy(run.pol_ckpt)
    results = robustness_suite(cfg.plant(), controllers, cfg["eval.shapes"], cfg["eval.speeds"],
                               cfg["eval.payloads"], [cfg["seed"]], policy, dyn, cfg.baseline(),
                               cfg["eval.laps"], cfg["eval.max_steps"], cfg["eval.osc_cutoff"])
    write_csv(run.dir / "metrics.csv", METRIC_COLUMNS, [r.row() for r in results])
    for r in results:
        if r.payload == 0.0 and r.speed == cfg["eval.speeds"][-1] and r.episode is not None and r.episode.steps:
            ep = r.episode
            write_svg(run.dir / "plots" / f"track_{r.controller}_{r.shape}.svg",
                      {"reference": (ep.r[:, 0] * 1000, ep.r[:, 1] * 1000),
                       r.controller: (ep.o[:, 18] * 1000, ep.o[:, 19] * 1000)},
                      f"{r.controller} on {r.shape} at {r.speed}x", "x (mm)", "y (mm)", equal_aspect=True)
    aborted = sum(not r.completed for r in results)
    echo_json({"metrics": str(run.dir / "metrics.csv"), "runs": len(results), "aborted": aborted})


@main.command("ablate")
@common
def ablate(config_path, overrides, seed, out, force):
    """Architecture and training-subset ablations of the dynamics model."""
    run = load_run(config_path, overrides, seed, out)
    cfg = run.cfg
    episodes, splits = run.dataset()
    jobs = []
    for s in cfg["ablate.seeds"]:
        for v in cfg["ablate.variants"]:
            jobs.append((v, "train", s, *cfg.ablation_dynamics(v, s)))
        for sub in cfg["ablate.subsets"]:
            if sub != "train":
                jobs.append((cfg["dyn.variant"], sub, s, *cfg.ablation_dynamics(cfg["dyn.variant"], s)))
    res = ablation_suite(episodes, splits, jobs, cfg["eval.windows_stride"])
    write_csv(run.dir / "ablation.csv", ABLATION_COLUMNS, res.rows)
    write_csv(run.dir / "ablation_curves.csv", CURVE_COLUMNS, res.curves)
    series = {}
    for v in cfg["ablate.variants"]:
        pts = [r for r in res.curves if r["variant"] == v and r["dataset"] == "test"]
        series[v] = (np.array([r["horizon_step"] for r in pts]), np.array([r["pos_err_mm"] for r in pts]))
    write_svg(run.dir / "plots" / "ablation_test.svg", series, "D_test error vs horizon", "step", "mm")
    echo_json({"rows": len(res.rows), "table": str(run.dir / "ablation.csv")})


@main.command("gradcheck")
@common
def gradcheck(config_path, overrides, seed, out, force):
    """Finite-difference check of every op, cell, the stack, a rollout and the policy chain."""
    from .fidelity import gradient_fidelity

    run = load_run(config_path, overrides, seed, out)
    errs = gradient_fidelity(run.cfg["seed"])
    worst = max(errs.values())
    for k, v in errs.items():
        click.echo(f"{k:32s} {v:.3e}")
    click.echo(f"max relative error {worst:.3e}")
    if not worst < 1e-4:
        sys.exit(1)


def _load_dyn(run: Run) -> DynamicsModel:
    try:
        return load_dynamics(run.dyn_ckpt)
    except FileNotFoundError as err:
        raise click.ClickException(f"{err}; run train-dynamics first") from None


if __name__ == "__main__":
    main()
