"""Episode CSV files and the dataset manifest."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import Episode, SplitResult

HEADER = (["t"] + [f"u{i}" for i in range(9)] + [f"l{i}" for i in range(9)]
          + [f"v{i}" for i in range(9)] + ["px", "py", "pz", "rx", "ry", "rz"]
          + ["rpx", "rpy", "rpz", "rrx", "rry", "rrz"])


class EpisodeFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_episode(path, ep: Episode) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.column_stack([ep.t, ep.u, ep.o, ep.r])
    with open(path, "w", newline="") as f:
        f.write(",".join(HEADER) + "\n")
        for row in rows:
            f.write(",".join(_fmt(x) for x in row) + "\n")


def read_episode(path, dt: float | None = None, **meta) -> Episode:
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EpisodeFormatError(f"{path}: line 1: empty file") from None
        if header != HEADER:
            raise EpisodeFormatError(f"{path}: line 1: header mismatch")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(HEADER):
                raise EpisodeFormatError(
                    f"{path}: line {lineno}: expected {len(HEADER)} fields, got {len(row)}")
            try:
                vals = [float(x) for x in row]
            except ValueError:
                raise EpisodeFormatError(f"{path}: line {lineno}: non-numeric field") from None
            if not np.isfinite(vals).all():
                raise EpisodeFormatError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(-1, len(HEADER))
    t = data[:, 0]
    if len(t) > 1:
        step = dt if dt is not None else t[1] - t[0]
        bad = np.flatnonzero(np.abs(np.diff(t) - step) > 1e-9)
        if len(bad):
            raise EpisodeFormatError(f"{path}: line {bad[0] + 3}: irregular time step")
    return Episode(t=t, u=data[:, 1:10], o=data[:, 10:34], r=data[:, 34:40], **meta)


@dataclass
class DatasetManifest:
    entries: list[dict]
    subsets: dict[str, list[int]]
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "episodes": self.entries, "subsets": self.subsets},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(d["episodes"], {k: list(v) for k, v in d["subsets"].items()}, d.get("seed", 0))

    @property
    def splits(self) -> SplitResult:
        return SplitResult([e["split"] for e in self.entries], self.subsets)


def save_dataset(root, episodes: list[Episode], splits: SplitResult, seed: int = 0) -> DatasetManifest:
    root = Path(root)
    entries = []
    for i, (ep, split) in enumerate(zip(episodes, splits.split)):
        rel = f"episodes/ep{i:03d}.csv"
        write_episode(root / rel, ep)
        entries.append({"path": rel, "split": split, "steps": ep.steps, **ep.meta()})
    manifest = DatasetManifest(entries, splits.subsets, seed)
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_dataset(root) -> tuple[DatasetManifest, list[Episode]]:
    root = Path(root)
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text())
    episodes = []
    for e in manifest.entries:
        meta = {k: e[k] for k in ("session", "shape", "noise", "speed", "seed", "valid", "controller")}
        episodes.append(read_episode(root / e["path"], **meta))
    return manifest, episodes
