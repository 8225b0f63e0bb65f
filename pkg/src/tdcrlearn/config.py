"""Flat experiment configuration: defaults, YAML loading, overrides, validation, run directories."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .baselines import BaselineConfig
from .data.harness import GenerationConfig
from .dynamics import DynamicsConfig, TrainConfig
from .plant import PlantParams
from .policy import PolicyConfig, PolicyTrainConfig, ShiftSpec

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "plant.L": [0.256, 0.256, 0.256],
    "plant.r": 0.02,
    "plant.tau_m": 0.08,
    "plant.tau_c": 0.3,
    "plant.backlash": 0.002,
    "plant.creep": 0.01,
    "plant.sag_gain": 0.05,
    "plant.u_max": 0.02,
    "plant.noise_std": 1e-4,
    "plant.dt": 0.02,
    "baseline.mode": "hybrid",
    "baseline.kp_pos": 2.0,
    "baseline.kp_rot": 1.0,
    "baseline.dls_lambda": 1.0,
    "data.sessions": 6,
    "data.episodes_per_session": 8,
    "data.min_steps": 900,
    "data.max_steps": 1200,
    "data.control_noise": 0.3,
    "data.reference_noise": 0.01,
    "data.clean_per_session": 2,
    "dyn.variant": "MultiResGRU",
    "dyn.hidden": 64,
    "dyn.layers": 4,
    "dyn.dropout": 0.0,
    "dyn.ni": 50,
    "dyn.nr": 50,
    "dyn.epochs": 19,
    "dyn.windows_per_epoch": 2000,
    "dyn.batch": 32,
    "dyn.lr": 2e-3,
    "dyn.seed": 0,
    "dyn.checkpoint_path": "",
    "pol.hidden": 64,
    "pol.layers": 4,
    "pol.nf": 10,
    "pol.nr": 250,
    "pol.lambda": 0.98,
    "pol.smooth_weight": 0.01,
    "pol.length_limit": 0.006,
    "pol.length_weight": 5.0,
    "pol.epochs": 1,
    "pol.windows_per_epoch": 3200,
    "pol.batch": 8,
    "pol.lr": 1e-3,
    "pol.shift_translation": 0.02,
    "pol.shift_yaw_deg": 5.0,
    "pol.seed": 0,
    "eval.shapes": ["circle", "line", "figure-eight", "T"],
    "eval.speeds": [1.0, 1.7, 2.5],
    "eval.payloads": [0.0, 0.05, 0.10],
    "eval.controllers": ["policy", "feedback", "feedforward", "hybrid"],
    "eval.laps": 1.0,
    "eval.max_steps": 1500,
    "eval.osc_cutoff": 2.0,
    "eval.windows_stride": 25,
    "eval.long_phases": [500, 2500, 500],
    "ablate.variants": ["MultiResGRU", "ResGRU", "ResGRU_TF", "MultiGRU", "GRU",
                        "MultiResLSTM", "MultiResRNN", "ResMLP"],
    "ablate.seeds": [0, 1, 2],
    "ablate.subsets": ["train", "small", "2days", "clean"],
    "ablate.hidden": 32,
    "ablate.layers": 2,
    "ablate.ni": 20,
    "ablate.nr": 50,
    "ablate.epochs": 2,
    "ablate.windows_per_epoch": 6400,
    "ablate.batch": 32,
}


class ConfigError(ValueError):
    pass


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "ExperimentConfig":
        raw: dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            data = yaml.safe_load(path.read_text()) or {}
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            raw.update(_flatten(data))
        for item in overrides:
            k, v = parse_override(item) if isinstance(item, str) else item
            raw[k] = v
        if seed is not None:
            raw["seed"] = seed
        return cls.from_flat(raw)

    @classmethod
    def from_flat(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        unknown = sorted(set(raw) - set(DEFAULTS))
        if unknown:
            raise ConfigError("unknown config key(s): " + ", ".join(unknown))
        values = dict(DEFAULTS)
        for k, v in raw.items():
            values[k] = _coerce(k, v)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, **flat) -> "ExperimentConfig":
        return ExperimentConfig.from_flat({**self.values, **flat})

    def validate(self) -> None:
        """Build every typed config once so range errors surface with their key names."""
        checks = [("plant.*", self.plant), ("baseline.*", self.baseline), ("data.*", self.generation),
                  ("dyn.*", self.dynamics), ("dyn.*", self.dyn_train), ("pol.*", self.policy),
                  ("pol.*", self.pol_train)]
        for prefix, build in checks:
            try:
                build()
            except (ValueError, TypeError) as err:
                raise ConfigError(f"{prefix}: {err}") from None
        for k, v in self.values.items():
            if k.endswith("_path") and v and not Path(v).exists():
                raise ConfigError(f"{k}: file not found: {v}")
        if not self["eval.long_phases"] or len(self["eval.long_phases"]) != 3:
            raise ConfigError("eval.long_phases: need three phase lengths")

    # -- typed views ----------------------------------------------------------------------

    def plant(self, payload: float = 0.0) -> PlantParams:
        v = self.values
        return PlantParams(L=tuple(v["plant.L"]), r=v["plant.r"], tau_m=v["plant.tau_m"],
                           tau_c=v["plant.tau_c"], backlash=v["plant.backlash"], creep=v["plant.creep"],
                           payload=payload, sag_gain=v["plant.sag_gain"], noise_std=v["plant.noise_std"],
                           dt=v["plant.dt"], u_max=v["plant.u_max"])

    def baseline(self, mode: str | None = None) -> BaselineConfig:
        v = self.values
        return BaselineConfig(mode or v["baseline.mode"], v["baseline.kp_pos"], v["baseline.kp_rot"],
                              v["baseline.dls_lambda"])

    def generation(self) -> GenerationConfig:
        v = self.values
        return GenerationConfig(v["data.sessions"], v["data.episodes_per_session"], v["data.min_steps"],
                                v["data.max_steps"], v["data.control_noise"], v["data.reference_noise"],
                                v["data.clean_per_session"], v["seed"])

    def dynamics(self, variant: str | None = None) -> DynamicsConfig:
        v = self.values
        return DynamicsConfig(variant or v["dyn.variant"], v["dyn.hidden"], v["dyn.layers"], v["dyn.dropout"],
                              v["dyn.ni"], v["dyn.nr"], v["dyn.seed"] + v["seed"])

    def dyn_train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["dyn.epochs"], v["dyn.windows_per_epoch"], v["dyn.batch"], v["dyn.lr"],
                           v["dyn.lr"] / 10, seed=v["dyn.seed"] + v["seed"])

    def ablation_dynamics(self, variant: str, seed: int) -> tuple[DynamicsConfig, TrainConfig]:
        v = self.values
        dc = DynamicsConfig(variant, v["ablate.hidden"], v["ablate.layers"], 0.0, v["ablate.ni"],
                            v["ablate.nr"], seed)
        tc = TrainConfig(v["ablate.epochs"], v["ablate.windows_per_epoch"], v["ablate.batch"], v["dyn.lr"],
                         v["dyn.lr"] / 10, seed=seed)
        return dc, tc

    def policy(self) -> PolicyConfig:
        v = self.values
        return PolicyConfig(v["pol.hidden"], v["pol.layers"], v["pol.nf"], v["pol.seed"] + v["seed"])

    def pol_train(self) -> PolicyTrainConfig:
        v = self.values
        return PolicyTrainConfig(nr=v["pol.nr"], lam=v["pol.lambda"], smooth_weight=v["pol.smooth_weight"],
                                 length_limit=v["pol.length_limit"], length_weight=v["pol.length_weight"],
                                 epochs=v["pol.epochs"], windows_per_epoch=v["pol.windows_per_epoch"],
                                 batch=v["pol.batch"], lr=v["pol.lr"], lr_final=v["pol.lr"] / 10,
                                 shift=ShiftSpec(v["pol.shift_translation"], v["pol.shift_yaw_deg"]),
                                 seed=v["pol.seed"] + v["seed"])

    # -- identity -------------------------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=1)

    def digest(self) -> str:
        body = {k: v for k, v in self.values.items() if k != "seed"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self, out) -> Path:
        return Path(out) / f"{self.digest()}-seed{self['seed']}"
