import collections
import math

import numpy as np
import pytest

from tdcrlearn.autodiff import load_checkpoint, save_checkpoint
from tdcrlearn.baselines import BaselineConfig
from tdcrlearn.data import (
    BASE_SPEED, HEADER, Episode, EpisodeFormatError, GenerationConfig, NoiseSpec, collect_episode,
    compute_normalizer, generate_sessions, lap_steps, load_dataset, load_waypoints, make_splits,
    noise_sequence, read_episode, reference_trajectory, save_dataset, write_episode,
)
from tdcrlearn.data.references import STRAIGHT
from tdcrlearn.nn import Normalizer
from tdcrlearn.plant import Plant, PlantParams

P = PlantParams()


# -- noise -------------------------------------------------------------------------------

@pytest.mark.parametrize("kind,half", [("periodic-1Hz", 25), ("periodic-5Hz", 5)])
def test_square_wave_toggle_period(kind, half):
    x = noise_sequence(NoiseSpec(kind, 1.0, "control"), 200, 0.02, np.random.default_rng(0))
    flips = np.flatnonzero(np.sign(x[1:, 0]) != np.sign(x[:-1, 0])) + 1
    assert list(flips) == list(range(half, 200, half))


def test_control_noise_is_zero_net_and_seeded():
    spec = NoiseSpec("stochastic", 0.006, "control")
    a = noise_sequence(spec, 50, 0.02, np.random.default_rng(3))
    b = noise_sequence(spec, 50, 0.02, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.reshape(50, 3, 3).sum(2), 0, atol=1e-15)
    assert noise_sequence(spec, 5, 0.02, np.random.default_rng(0)).shape == (5, 9)
    ref = noise_sequence(NoiseSpec("periodic-1Hz", 0.01, "reference"), 5, 0.02, np.random.default_rng(0))
    assert ref.shape == (5, 3) and np.abs(ref).max() == pytest.approx(0.01)


def test_noise_spec_validation():
    assert NoiseSpec().tag == "none"
    assert NoiseSpec("periodic-5Hz", 1.0, "reference").tag == "reference-periodic-5Hz"
    for bad in (dict(kind="2Hz"), dict(amplitude=-1.0), dict(target="plant")):
        with pytest.raises(ValueError):
            NoiseSpec(**bad)


# -- collection -----------------------------------------------------------------------------

def test_regulation_episode_and_determinism():
    hold = np.tile(STRAIGHT, (41, 1))
    runs = [collect_episode(Plant(P), BaselineConfig(), hold, NoiseSpec(), seed=7) for _ in range(2)]
    ep = runs[0]
    assert ep.steps == 40 and ep.valid
    np.testing.assert_array_equal(ep.r, hold[:40])
    for f in ("t", "u", "o", "r"):
        np.testing.assert_array_equal(getattr(runs[0], f), getattr(runs[1], f))
    assert np.abs(ep.u).max() <= P.u_max


def test_noisy_episode_records_clean_reference():
    traj = reference_trajectory("circle", 61, 1.0)
    ep = collect_episode(Plant(P), BaselineConfig(), traj, NoiseSpec("stochastic", 0.01, "reference"), 1)
    np.testing.assert_array_equal(ep.r, traj[:60])
    assert np.all(np.abs(ep.u) <= P.u_max)
    unclipped = np.all(np.abs(ep.u) < P.u_max, axis=1)
    assert unclipped.any()
    np.testing.assert_allclose(ep.u[unclipped].reshape(-1, 3, 3).sum(2), 0, atol=1e-15)


@pytest.fixture(scope="module")
def small_sessions():
    gen = GenerationConfig(episodes_per_session=3, min_steps=60, max_steps=90, clean_per_session=1)
    return generate_sessions(gen, P)


def test_generate_sessions(small_sessions):
    eps = small_sessions
    assert len({e.session for e in eps}) == 6
    assert {e.shape for e in eps} >= {"T", "circle", "line"}
    assert collections.Counter(e.noise == "none" for e in eps)[True] == 6
    taus = {e.session: e.controller["kp_pos"] for e in eps}
    assert len(set(taus.values())) == 6
    again = generate_sessions(GenerationConfig(episodes_per_session=3, min_steps=60, max_steps=90,
                                               clean_per_session=1), P)
    for a, b in zip(eps, again):
        np.testing.assert_array_equal(a.o, b.o)


# -- splits ---------------------------------------------------------------------------------

def fake_episodes(seed=0, sessions=6, per=8):
    rng = np.random.default_rng(seed)
    shapes = ["T", "circle", "line", "figure-eight", "random", "random", "circle", "figure-eight"]
    eps = []
    for s in range(1, sessions + 1):
        for k in range(per):
            n = int(rng.integers(900, 1201))
            eps.append(Episode(np.arange(n) * 0.02, np.zeros((n, 9)), np.zeros((n, 24)), np.zeros((n, 6)),
                               session=s, shape=shapes[k % 8], noise="none" if k in (1, 2) else "control-stochastic"))
    return eps


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_split_rules_and_ratios(seed):
    eps = fake_episodes(seed)
    sp = make_splits(eps, seed=seed)
    assert len(sp.split) == len(eps) and set(sp.split) <= {"train", "test", "traj", "date"}
    for e, s in zip(eps, sp.split):
        if e.shape == "T":
            assert s == "traj"
        if s in ("train", "test"):
            assert e.shape != "T" and e.session != 6
        if s == "date":
            assert e.session == 6
    steps = collections.Counter()
    for e, s in zip(eps, sp.split):
        steps[s] += e.steps
    ratio = steps["test"] / (steps["test"] + steps["train"])
    assert abs(ratio - 0.18) / 0.18 <= 0.05
    train = set(sp.indices("train"))
    small = sum(eps[i].steps for i in sp.subsets["small"]) / steps["train"]
    assert abs(small - 0.48) / 0.48 <= 0.05
    for name in ("small", "2days", "clean"):
        assert set(sp.subsets[name]) <= train
    assert all(eps[i].noise == "none" for i in sp.subsets["clean"])
    assert {eps[i].session for i in sp.subsets["2days"]} == {1, 2}


def test_split_requirements():
    eps = fake_episodes()
    with pytest.raises(ValueError, match="'T'"):
        make_splits([e for e in eps if e.shape != "T"])
    with pytest.raises(ValueError, match="sessions"):
        make_splits([e for e in eps if e.session < 6])
    with pytest.raises(ValueError, match="noise-free"):
        make_splits([e for e in eps if e.noise != "none"])


# -- persistence ----------------------------------------------------------------------------

def random_episode(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return Episode(np.arange(n) * 0.02, rng.normal(size=(n, 9)) * 1e-3, rng.normal(size=(n, 24)),
                   rng.normal(size=(n, 6)) / 3.0)


def test_episode_csv_round_trip(tmp_path):
    ep = random_episode()
    write_episode(tmp_path / "e.csv", ep)
    back = read_episode(tmp_path / "e.csv")
    for f in ("t", "u", "o", "r"):
        np.testing.assert_array_equal(getattr(ep, f), getattr(back, f))
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == ",".join(HEADER)
    assert len(HEADER) == 40


def test_episode_csv_errors(tmp_path):
    write_episode(tmp_path / "e.csv", random_episode())
    lines = (tmp_path / "e.csv").read_text().splitlines()
    (tmp_path / "trunc.csv").write_text("\n".join(lines[:5] + [lines[5][:30]]) + "\n")
    with pytest.raises(EpisodeFormatError, match="line 6"):
        read_episode(tmp_path / "trunc.csv")
    (tmp_path / "hdr.csv").write_text("\n".join(["t,x"] + lines[1:]))
    with pytest.raises(EpisodeFormatError, match="header"):
        read_episode(tmp_path / "hdr.csv")
    bad = lines[:3] + ["oops" + lines[3][lines[3].index(","):]] + lines[4:]
    (tmp_path / "nan.csv").write_text("\n".join(bad))
    with pytest.raises(EpisodeFormatError, match="line 4"):
        read_episode(tmp_path / "nan.csv")


def test_dataset_round_trip(tmp_path, small_sessions):
    sp = make_splits(small_sessions)
    manifest = save_dataset(tmp_path, small_sessions, sp, seed=0)
    m2, eps = load_dataset(tmp_path)
    assert m2.entries == manifest.entries
    assert [e["split"] for e in m2.entries] == sp.split
    for a, b in zip(small_sessions, eps):
        np.testing.assert_array_equal(a.o, b.o)
        assert a.meta() == b.meta()
    entry = m2.entries[0]
    assert set(entry) >= {"path", "session", "shape", "noise", "split", "steps"}


# -- references ------------------------------------------------------------------------------

def test_speed_scales_traversal_time():
    slow = reference_trajectory("figure-eight", 2000, 1.0)
    fast = reference_trajectory("figure-eight", 2000, 2.5)
    np.testing.assert_allclose(lap_steps("figure-eight", 1.0) / lap_steps("figure-eight", 2.5), 2.5)
    step_slow = np.linalg.norm(np.diff(slow[:, :3], axis=0), axis=1)
    step_fast = np.linalg.norm(np.diff(fast[:, :3], axis=0), axis=1)
    assert np.median(step_fast) / np.median(step_slow) == pytest.approx(2.5, rel=1e-3)
    assert step_fast.max() <= BASE_SPEED * 2.5 * 0.02 * (1 + 1e-9)


def test_circle_period():
    period_s = lap_steps("circle", 1.0) * 0.02
    assert period_s == pytest.approx(2 * math.pi * 0.05 / 0.023, rel=1e-5)
    assert period_s == pytest.approx(13.7, abs=0.05)


def test_line_and_shapes():
    line = reference_trajectory("line", 300, 1.0)
    np.testing.assert_array_equal(line[:, 3:], 0.0)
    np.testing.assert_array_equal(line[0], STRAIGHT)
    assert np.ptp(line[50:, 1]) == 0.0
    T = load_waypoints(reference_trajectory.__globals__["waypoint_path"]("T"))
    assert T.shape[1] == 2
    with pytest.raises(FileNotFoundError):
        load_waypoints("/nonexistent/W.csv")
    with pytest.raises(ValueError):
        reference_trajectory("square", 10)
    with pytest.raises(ValueError):
        reference_trajectory("circle", 10, speed=0.0)


# -- normalization ---------------------------------------------------------------------------

def test_normalizer_matches_two_pass_oracle(tmp_path):
    eps = [random_episode(30, s) for s in range(3)]
    nrm = compute_normalizer(eps)
    x = np.vstack([np.hstack([e.o, e.u]) for e in eps])
    for j in range(x.shape[1]):
        col = [float(v) for v in x[:, j]]
        mean = math.fsum(col) / len(col)
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in col) / len(col))
        assert nrm.mean[j] == pytest.approx(mean, rel=1e-12, abs=1e-15)
        assert nrm.std[j] == pytest.approx(std, rel=1e-12)
    save_checkpoint(tmp_path / "n.tdck", nrm.state_dict())
    back = Normalizer.from_state(load_checkpoint(tmp_path / "n.tdck"))
    np.testing.assert_array_equal(back.mean, nrm.mean)
    np.testing.assert_array_equal(back.std, nrm.std)


def test_normalizer_degenerate_cases():
    ep = random_episode(10)
    ep.o[:, 5] = 3.0
    nrm = compute_normalizer([ep])
    assert nrm.std[5] == 1.0 and nrm.mean[5] == 3.0
    with pytest.raises(ValueError):
        compute_normalizer([])
