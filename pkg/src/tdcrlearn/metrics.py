"""Pose errors, tracking metrics and the spectral oscillation index."""

from __future__ import annotations

import numpy as np

OSC_CUTOFF_HZ = 2.0
MIN_OSC_LENGTH = 64


def rotation_matrices(phi: np.ndarray) -> np.ndarray:
    """Batched Rodrigues map (..., 3) -> (..., 3, 3)."""
    phi = np.asarray(phi, dtype=np.float64)
    a = np.linalg.norm(phi, axis=-1)
    small = a < 1e-12
    safe = np.where(small, 1.0, a)
    k = phi / safe[..., None]
    K = np.zeros(phi.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s = np.where(small, 0.0, np.sin(a))[..., None, None]
    c = np.where(small, 0.0, 1.0 - np.cos(a))[..., None, None]
    return np.eye(3) + s * K + c * (K @ K)


def relative_angle(phi_a: np.ndarray, phi_b: np.ndarray) -> np.ndarray:
    """Angle (rad) of R(a)^T R(b), batched."""
    Ra, Rb = rotation_matrices(phi_a), rotation_matrices(phi_b)
    tr = np.einsum("...ji,...ji->...", Ra, Rb)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def pose_errors(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean position error (m) and relative rotation angle (rad) of (..., 6) poses."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    pos = np.linalg.norm(pred[..., :3] - truth[..., :3], axis=-1)
    return pos, relative_angle(pred[..., 3:6], truth[..., 3:6])


def tracking_metrics(poses: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    """Mean position error in mm and mean rotation error in degrees."""
    poses, reference = np.asarray(poses), np.asarray(reference)
    if len(poses) != len(reference):
        raise ValueError(f"length mismatch: {len(poses)} vs {len(reference)}")
    pos, rot = pose_errors(poses, reference)
    return float(pos.mean() * 1000.0), float(np.degrees(rot.mean()))


def oscillation_index(err: np.ndarray, dt: float = 0.02, cutoff_hz: float = OSC_CUTOFF_HZ) -> float:
    """Fraction of Hann-windowed, mean-removed spectral power above ``cutoff_hz``."""
    x = np.asarray(err, dtype=np.float64)
    if x.ndim != 1 or len(x) < MIN_OSC_LENGTH:
        raise ValueError(f"oscillation index needs a 1-D series of length >= {MIN_OSC_LENGTH}")
    x = (x - x.mean()) * np.hanning(len(x))
    power = np.abs(np.fft.rfft(x)) ** 2
    freq = np.fft.rfftfreq(len(x), dt)
    power[0] = 0.0
    total = power.sum()
    if total <= 1e-300:
        return 0.0
    return float(power[freq > cutoff_hz].sum() / total)
