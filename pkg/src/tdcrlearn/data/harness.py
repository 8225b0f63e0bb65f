"""Multi-session data collection with the hybrid baseline, splits and normalization."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..baselines import BaselineConfig, BaselineController, CENTER
from ..nn import Normalizer
from ..plant import N_MOTORS, OBS_DIM, Plant, PlantParams, perturb_params, tip_pose
from .references import reference_trajectory

NOISE_KINDS = ("none", "periodic-1Hz", "periodic-5Hz", "stochastic")
NOISE_TARGETS = ("control", "reference")
SPLITS = ("train", "test", "traj", "date")
SPEEDS = (1.0, 1.7, 2.5)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    amplitude: float = 0.0
    target: str = "control"

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.target not in NOISE_TARGETS:
            raise ValueError(f"unknown noise target {self.target!r}")
        if self.amplitude < 0:
            raise ValueError("noise amplitude must be non-negative")

    @property
    def tag(self) -> str:
        return "none" if self.kind == "none" else f"{self.target}-{self.kind}"


def noise_sequence(spec: NoiseSpec, steps: int, dt: float, rng: np.random.Generator) -> np.ndarray:
    """(steps, 9) command noise or (steps, 3) reference-position noise."""
    dim = N_MOTORS if spec.target == "control" else 3
    if spec.kind == "none" or spec.amplitude == 0.0:
        return np.zeros((steps, dim))
    if spec.kind == "stochastic":
        x = rng.normal(size=(steps, dim))
    else:
        freq = 1.0 if spec.kind == "periodic-1Hz" else 5.0
        half = int(round(0.5 / (freq * dt)))
        wave = np.where((np.arange(steps) // half) % 2 == 0, 1.0, -1.0)
        direction = rng.normal(size=dim)
        x = wave[:, None] * direction / np.abs(direction).max()
    if spec.target == "control":
        x = x @ CENTER
    return spec.amplitude * x


@dataclass
class Episode:
    t: np.ndarray
    u: np.ndarray
    o: np.ndarray
    r: np.ndarray
    session: int = 0
    shape: str = ""
    noise: str = "none"
    speed: float = 1.0
    seed: int = 0
    valid: bool = True
    controller: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        if self.u.shape != (n, N_MOTORS) or self.o.shape != (n, OBS_DIM) or self.r.shape != (n, 6):
            raise ValueError("episode arrays have inconsistent shapes")

    @property
    def steps(self) -> int:
        return len(self.t)

    def meta(self) -> dict:
        return {"session": self.session, "shape": self.shape, "noise": self.noise,
                "speed": self.speed, "seed": self.seed, "valid": self.valid,
                "controller": dict(self.controller)}


@dataclass(frozen=True)
class SafetyLimits:
    max_motor_length: float = 0.02
    max_position_error: float = 0.15


def collect_episode(plant: Plant, cfg: BaselineConfig, trajectory: np.ndarray, noise: NoiseSpec,
                    seed: int, limits: SafetyLimits = SafetyLimits(), session: int = 0,
                    shape: str = "", speed: float = 1.0) -> Episode:
    """Run the baseline on the (stateful) plant over ``trajectory`` (steps + 1 poses).

    The clean reference is recorded; noise only perturbs what the controller sees
    or sends. Divergence truncates the episode and clears ``valid``.
    """
    p = plant.params
    steps = len(trajectory) - 1
    rng = np.random.default_rng(seed)
    plant.rng = np.random.default_rng(rng.integers(2**63))
    n = noise_sequence(noise, steps + 1, p.dt, rng)
    seen = np.array(trajectory, dtype=np.float64)
    if noise.target == "reference":
        seen[:, :3] += n[:, :3]
    ctl = BaselineController(cfg, p)
    U, O, R = [], [], []
    valid = True
    for k in range(steps):
        o = plant.observe()
        if (np.abs(o[:N_MOTORS]).max() > limits.max_motor_length
                or np.linalg.norm(o[18:21] - trajectory[k, :3]) > limits.max_position_error):
            valid = False
            break
        a = ctl.act(o, seen[k], seen[k + 1])
        if noise.target == "control":
            a = a + n[k]
        u = np.clip(a @ CENTER, -p.u_max, p.u_max)
        U.append(u)
        O.append(o)
        R.append(trajectory[k])
        plant.step(u)
    m = len(U)
    return Episode(t=np.arange(m) * p.dt, u=np.array(U).reshape(m, N_MOTORS),
                   o=np.array(O).reshape(m, OBS_DIM), r=np.array(R).reshape(m, 6),
                   session=session, shape=shape, noise=noise.tag, speed=speed, seed=seed,
                   valid=valid, controller=asdict(cfg))


# -- sessions ------------------------------------------------------------------------

@dataclass
class GenerationConfig:
    sessions: int = 6
    episodes_per_session: int = 8
    min_steps: int = 900
    max_steps: int = 1200
    control_noise: float = 0.3  # fraction of u_max
    reference_noise: float = 0.01  # m
    clean_per_session: int = 2
    seed: int = 0


ROSTER = ("T", "circle", "line", "figure-eight", "random", "random", "circle", "figure-eight")
NOISY = tuple((k, t) for t in NOISE_TARGETS for k in NOISE_KINDS[1:])


def generate_sessions(gen: GenerationConfig, base: PlantParams) -> list[Episode]:
    """Episodes of every session in deterministic order; each session starts from rest."""
    if gen.sessions < 2:
        raise ValueError("need at least two sessions")
    episodes = []
    for s in range(1, gen.sessions + 1):
        srng = np.random.default_rng([gen.seed, s])
        params = perturb_params(base, int(srng.integers(2**31)))
        plant = Plant(params)
        shapes = [ROSTER[i % len(ROSTER)] for i in range(gen.episodes_per_session)]
        shapes = [shapes[i] for i in srng.permutation(len(shapes))]
        n_clean = min(gen.clean_per_session, len(shapes))
        for e, shape in enumerate(shapes):
            seed = int(srng.integers(2**31))
            if e < n_clean:
                spec = NoiseSpec()
            else:
                kind, target = NOISY[int(srng.integers(len(NOISY)))]
                amp = gen.control_noise * params.u_max if target == "control" else gen.reference_noise
                spec = NoiseSpec(kind, amp, target)
            speed = float(srng.choice(SPEEDS, p=(0.5, 0.3, 0.2)))
            cfg = BaselineConfig("hybrid", kp_pos=float(srng.uniform(1.0, 3.0)),
                                 kp_rot=float(srng.uniform(0.5, 1.5)))
            steps = int(srng.integers(gen.min_steps, gen.max_steps + 1))
            start = tip_pose(plant.state, params).as_vector()
            traj = reference_trajectory(shape, steps + 1, speed, params.dt,
                                        scale=float(srng.uniform(0.04, 0.06)),
                                        center=srng.uniform(-0.01, 0.01, size=2), start=start,
                                        rng=np.random.default_rng(seed))
            episodes.append(collect_episode(plant, cfg, traj, spec, seed, session=s, shape=shape,
                                            speed=speed))
    return episodes


# -- splits ----------------------------------------------------------------------------

@dataclass
class SplitResult:
    split: list[str]
    subsets: dict[str, list[int]]

    def indices(self, name: str) -> list[int]:
        if name in self.subsets:
            return list(self.subsets[name])
        return [i for i, s in enumerate(self.split) if s == name]


def _pick_fraction(idx: list[int], steps: np.ndarray, frac: float, rng: np.random.Generator,
                   tries: int = 400) -> list[int]:
    """Episode subset whose step share is closest to ``frac`` over seeded greedy passes."""
    target = frac * steps[idx].sum()
    best, best_gap = [], np.inf
    for _ in range(tries):
        chosen, total = [], 0
        for i in rng.permutation(idx):
            if abs(total + steps[i] - target) < abs(total - target):
                chosen.append(int(i))
                total += steps[i]
        gap = abs(total - target)
        if gap < best_gap:
            best, best_gap = sorted(chosen), gap
    return best


def make_splits(episodes: list[Episode], seed: int = 0, test_frac: float = 0.18,
                small_frac: float = 0.48, two_days: tuple[int, int] = (1, 2)) -> SplitResult:
    sessions = sorted({e.session for e in episodes})
    if len(sessions) < 6:
        raise ValueError(f"splits need at least 6 sessions, got {len(sessions)}")
    if not any(e.shape == "T" for e in episodes):
        raise ValueError("splits need 'T' trajectories")
    if not any(e.noise == "none" for e in episodes):
        raise ValueError("splits need noise-free episodes")
    date = sessions[-1]
    steps = np.array([e.steps for e in episodes])
    split = ["" for _ in episodes]
    pool = []
    for i, e in enumerate(episodes):
        if e.shape == "T":
            split[i] = "traj"
        elif e.session == date:
            split[i] = "date"
        else:
            pool.append(i)
    rng = np.random.default_rng([seed, 1])
    test = set(_pick_fraction(pool, steps, test_frac, rng))
    for i in pool:
        split[i] = "test" if i in test else "train"
    train = [i for i in pool if split[i] == "train"]
    subsets = {
        "small": _pick_fraction(train, steps, small_frac, rng),
        "2days": [i for i in train if episodes[i].session in two_days],
        "clean": [i for i in train if episodes[i].noise == "none"],
    }
    return SplitResult(split, subsets)


def compute_normalizer(episodes: list[Episode]) -> Normalizer:
    """Per-channel statistics over concatenated (o, u) rows."""
    if not episodes or sum(e.steps for e in episodes) == 0:
        raise ValueError("cannot compute statistics on an empty split")
    x = np.vstack([np.hstack([e.o, e.u]) for e in episodes])
    return Normalizer.fit(x)
