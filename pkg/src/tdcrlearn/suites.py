"""Closed-loop runs, the robustness grid, the dynamics ablations and the long-horizon probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import BaselineConfig
from .data.harness import Episode, NoiseSpec, SafetyLimits, collect_episode, compute_normalizer
from .data.references import lap_steps, reference_trajectory
from .dynamics import (
    DynamicsModel, LongHorizonReport, PredictionReport, WindowSet, evaluate_prediction, long_horizon,
    train_dynamics,
)
from .metrics import oscillation_index, pose_errors, tracking_metrics
from .plant import Plant, PlantParams
from .policy import PolicyNetwork, deploy_closed_loop

METRIC_COLUMNS = ("controller", "shape", "speed", "payload", "seed", "pos_err_mm", "rot_err_deg",
                  "osc_index", "completed", "steps", "reason")
CURVE_COLUMNS = ("variant", "dataset", "horizon_step", "pos_err_mm", "rot_err_deg")
ABLATION_COLUMNS = ("variant", "train_subset", "seed", "dataset", "first_pos_mm", "first_rot_deg",
                    "mean_pos_mm", "mean_rot_deg", "final_loss", "n_windows")
EVAL_DATASETS = ("test", "traj", "date")


# -- closed loop --------------------------------------------------------------------------

@dataclass
class RunResult:
    controller: str
    shape: str
    speed: float
    payload: float
    seed: int
    pos_err_mm: float
    rot_err_deg: float
    osc_index: float
    completed: bool
    steps: int
    reason: str = ""
    episode: Episode | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {c: getattr(self, c) for c in METRIC_COLUMNS}


def eval_reference(shape: str, speed: float, params: PlantParams, laps: float = 1.0,
                   max_steps: int = 1500, seed: int = 0) -> np.ndarray:
    """Evaluation reference (steps + 1 poses) from the straight rest pose; nominal 5 cm scale."""
    steps = min(max_steps, int(np.ceil(laps * lap_steps(shape, speed, params.dt))) + 50)
    return reference_trajectory(shape, steps + 1, speed, params.dt, rng=np.random.default_rng([seed, 5]))


def summarize(controller: str, shape: str, speed: float, payload: float, seed: int, ep: Episode,
              completed: bool, reason: str, cutoff_hz: float) -> RunResult:
    """Metrics of a run; aborted runs keep their flag and carry no metrics."""
    if not completed or ep.steps == 0:
        nan = float("nan")
        return RunResult(controller, shape, speed, payload, seed, nan, nan, nan, False, ep.steps,
                         reason or "aborted", ep)
    mm, deg = tracking_metrics(ep.o[:, 18:24], ep.r)
    pos, _ = pose_errors(ep.o[:, 18:24], ep.r)
    osc = oscillation_index(pos, ep.t[1] - ep.t[0], cutoff_hz) if len(pos) >= 64 else float("nan")
    return RunResult(controller, shape, speed, payload, seed, mm, deg, osc, True, ep.steps, "", ep)


def run_controller(controller: str, params: PlantParams, reference: np.ndarray, seed: int = 0,
                   policy: PolicyNetwork | None = None, dyn: DynamicsModel | None = None,
                   baseline: BaselineConfig | None = None, limits: SafetyLimits = SafetyLimits(),
                   cutoff_hz: float = 2.0, shape: str = "", speed: float = 1.0) -> RunResult:
    """One closed-loop run from rest; ``controller`` is "policy" or a baseline mode."""
    plant = Plant(params, seed)
    if controller == "policy":
        if policy is None or dyn is None:
            raise ValueError("policy runs need a policy and its dynamics model")
        res = deploy_closed_loop(policy, dyn, plant, reference, limits, seed=seed)
        ep, ok, reason = res.episode, res.completed, res.reason
    else:
        base = baseline or BaselineConfig()
        cfg = BaselineConfig(controller, base.kp_pos, base.kp_rot, base.dls_lambda)
        ep = collect_episode(plant, cfg, reference, NoiseSpec(), seed, limits, shape=shape, speed=speed)
        ok = ep.valid
        reason = "" if ok else f"safety abort at step {ep.steps}"
    return summarize(controller, shape, speed, params.payload, seed, ep, ok, reason, cutoff_hz)


def robustness_suite(base: PlantParams, controllers, shapes, speeds, payloads, seeds,
                     policy: PolicyNetwork | None = None, dyn: DynamicsModel | None = None,
                     baseline: BaselineConfig | None = None, laps: float = 1.0, max_steps: int = 1500,
                     cutoff_hz: float = 2.0) -> list[RunResult]:
    """Every (controller, shape, speed, payload, seed) cell, in deterministic order."""
    out = []
    for payload in payloads:
        params = PlantParams(**{**base.__dict__, "payload": float(payload)})
        for shape in shapes:
            for speed in speeds:
                for seed in seeds:
                    ref = eval_reference(shape, speed, params, laps, max_steps, seed)
                    for c in controllers:
                        out.append(run_controller(c, params, ref, seed, policy, dyn, baseline,
                                                  cutoff_hz=cutoff_hz, shape=shape, speed=float(speed)))
    return out


def mean_metric(results: list[RunResult], attr: str, **match) -> float:
    vals = [getattr(r, attr) for r in results if all(getattr(r, k) == v for k, v in match.items())]
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


# -- dynamics ablations ----------------------------------------------------------------------

@dataclass
class AblationResult:
    rows: list[dict]
    curves: list[dict]
    reports: dict = field(default_factory=dict)  # (variant, subset, seed, dataset) -> PredictionReport
    models: dict = field(default_factory=dict)  # (variant, subset, seed) -> DynamicsModel


def ablation_suite(episodes: list[Episode], splits, jobs, stride: int = 25, keep_models: bool = False,
                   datasets=EVAL_DATASETS) -> AblationResult:
    """Train each (variant, train subset, seed, DynamicsConfig, TrainConfig) job; evaluate on held-out splits.

    The normalizer always comes from D_train so subsets share one input scaling.
    """
    nrm = compute_normalizer([episodes[i] for i in splits.indices("train")])
    rows, reports, models = [], {}, {}
    eval_sets: dict = {}
    for variant, subset, seed, dc, tc in jobs:
        key = (dc.ni, dc.nr)
        if key not in eval_sets:
            eval_sets[key] = {d: WindowSet.build([episodes[i] for i in splits.indices(d)], nrm, dc.ni, dc.nr,
                                                 stride) for d in datasets}
        train = WindowSet.build([episodes[i] for i in splits.indices(subset)], nrm, dc.ni, dc.nr)
        model = DynamicsModel(dc, nrm)
        res = train_dynamics(model, train, tc)
        final = float(np.mean(res.losses[-max(1, len(res.losses) // 10):]))
        for d in datasets:
            rep = evaluate_prediction(model, eval_sets[key][d])
            reports[(variant, subset, seed, d)] = rep
            rows.append({"variant": variant, "train_subset": subset, "seed": seed, "dataset": d,
                         "first_pos_mm": rep.first_step[0] * 1000, "first_rot_deg": np.degrees(rep.first_step[1]),
                         "mean_pos_mm": rep.mean[0] * 1000, "mean_rot_deg": np.degrees(rep.mean[1]),
                         "final_loss": final, "n_windows": rep.n_windows})
        if keep_models:
            models[(variant, subset, seed)] = model
    return AblationResult(rows, mean_curves(reports), reports, models)


def mean_curves(reports: dict) -> list[dict]:
    """Seed-averaged per-step curves for the full-D_train runs."""
    groups: dict = {}
    for (variant, subset, _seed, d), rep in reports.items():
        if subset == "train":
            groups.setdefault((variant, d), []).append(rep)
    rows = []
    for (variant, d), reps in groups.items():
        pos = np.mean([r.pos_err for r in reps], axis=0)
        rot = np.mean([r.rot_err for r in reps], axis=0)
        for i in range(len(pos)):
            rows.append({"variant": variant, "dataset": d, "horizon_step": i + 1,
                         "pos_err_mm": pos[i] * 1000, "rot_err_deg": np.degrees(rot[i])})
    return rows


def ablation_mean(rows: list[dict], column: str, **match) -> float:
    vals = [r[column] for r in rows if all(r[k] == v for k, v in match.items())]
    return float(np.mean(vals)) if vals else float("nan")


# -- long horizon ----------------------------------------------------------------------------

def long_horizon_episode(params: PlantParams, steps: int, seed: int = 0,
                         baseline: BaselineConfig = BaselineConfig(), speed: float = 1.0) -> Episode:
    """Seeded baseline run on a random closed curve; source of the long-horizon control sequence."""
    ref = reference_trajectory("random", steps + 1, speed, params.dt, rng=np.random.default_rng([seed, 9]))
    ep = collect_episode(Plant(params, seed), baseline, ref, NoiseSpec(), seed, shape="random", speed=speed)
    if not ep.valid:
        raise RuntimeError("long-horizon source run diverged; pick another seed")
    return ep


def long_horizon_probe(model: DynamicsModel, ep: Episode, phases) -> LongHorizonReport:
    return long_horizon(model, ep.o, ep.u, tuple(int(p) for p in phases))


def prediction_curve_rows(variant: str, dataset: str, rep: PredictionReport) -> list[dict]:
    return [{"variant": variant, "dataset": dataset, "horizon_step": i + 1,
             "pos_err_mm": rep.pos_err[i] * 1000, "rot_err_deg": np.degrees(rep.rot_err[i])}
            for i in range(len(rep.pos_err))]
