"""Planar reference trajectories traversed at constant tip speed."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

BASE_SPEED = 0.023  # m/s at 1.0x
Z0 = 0.765
STRAIGHT = np.array([0.0, 0.0, 0.768, 0.0, 0.0, 0.0])
SHAPES = ("circle", "line", "figure-eight", "T", "random")


def waypoint_path(name: str = "T") -> Path:
    return Path(str(resources.files("tdcrlearn.data") / "waypoints" / f"{name}.csv"))


def load_waypoints(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"waypoint file not found: {path}")
    pts = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError(f"{path}: expected at least two x,y rows")
    return pts


def _closed_curve(shape: str, scale: float, rng: np.random.Generator | None) -> np.ndarray:
    """Dense xy polyline of one lap."""
    s = np.linspace(0.0, 2 * np.pi, 2001)
    if shape == "circle":
        return scale * np.stack([np.cos(s), np.sin(s)], 1)
    if shape == "line":
        x = scale * 1.2 * np.cos(s)
        return np.stack([x, np.zeros_like(x)], 1)
    if shape == "figure-eight":
        return scale * np.stack([np.sin(s), np.sin(s) * np.cos(s)], 1)
    if shape == "T":
        pts = load_waypoints(waypoint_path("T"))
        return np.vstack([pts, pts[:1]]) * (scale / 0.05)
    if shape == "random":
        if rng is None:
            raise ValueError("random shape needs an rng")
        xy = np.zeros((len(s), 2))
        for k in range(1, 4):
            amp = rng.normal(size=(2, 2)) / k
            xy += amp[0] * np.cos(k * s)[:, None] + amp[1] * np.sin(k * s)[:, None]
        xy -= xy.mean(0)
        return xy * (scale / np.abs(xy).max())
    raise ValueError(f"unknown shape {shape!r}")


def _resample(xy: np.ndarray, step: float, n: int) -> np.ndarray:
    """Constant arc-length sampling of a closed polyline, lapping as needed."""
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    lap = s[-1]
    q = np.mod(np.arange(n) * step, lap)
    return np.stack([np.interp(q, s, xy[:, 0]), np.interp(q, s, xy[:, 1])], 1)


def reference_trajectory(shape: str, steps: int, speed: float = 1.0, dt: float = 0.02,
                         scale: float = 0.05, z0: float = Z0, center=(0.0, 0.0),
                         start: np.ndarray | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """(steps, 6) pose sequence: straight lead-in from ``start`` then laps of the shape.

    Tip speed is BASE_SPEED * speed on both the lead-in and the path; phi* = 0.
    """
    if speed <= 0:
        raise ValueError("speed multiplier must be positive")
    step = BASE_SPEED * speed * dt
    xy = _closed_curve(shape, scale, rng) + np.asarray(center)
    path = np.column_stack([xy, np.full(len(xy), z0)])
    start = STRAIGHT if start is None else np.asarray(start, dtype=np.float64)
    gap = path[0] - start[:3]
    n_lead = int(np.ceil(np.linalg.norm(gap) / step))
    lead = start[:3] + np.linspace(0.0, 1.0, n_lead, endpoint=False)[:, None] * gap
    body = _resample(xy, step, max(steps - n_lead, 0))
    body = np.column_stack([body, np.full(len(body), z0)])
    pos = np.vstack([lead, body])[:steps]
    return np.column_stack([pos, np.zeros((len(pos), 3))])


def lap_steps(shape: str, speed: float = 1.0, dt: float = 0.02, scale: float = 0.05,
              rng: np.random.Generator | None = None) -> float:
    xy = _closed_curve(shape, scale, rng)
    return float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum() / (BASE_SPEED * speed * dt))
