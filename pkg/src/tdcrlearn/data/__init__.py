from .harness import (
    Episode, GenerationConfig, NoiseSpec, SafetyLimits, SplitResult, collect_episode,
    compute_normalizer, generate_sessions, make_splits, noise_sequence,
)
from .io import (
    HEADER, DatasetManifest, EpisodeFormatError, load_dataset, read_episode, save_dataset,
    write_episode,
)
from .references import BASE_SPEED, SHAPES, Z0, lap_steps, load_waypoints, reference_trajectory

__all__ = [
    "BASE_SPEED", "DatasetManifest", "Episode", "EpisodeFormatError", "GenerationConfig", "HEADER",
    "NoiseSpec", "SHAPES", "SafetyLimits", "SplitResult", "Z0", "collect_episode",
    "compute_normalizer", "generate_sessions", "lap_steps", "load_dataset", "load_waypoints",
    "make_splits", "noise_sequence", "read_episode", "reference_trajectory", "save_dataset",
    "write_episode",
]
