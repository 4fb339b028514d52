import hashlib

import numpy as np
import pytest

from ebclkit.errors import ConfigurationError
from ebclkit.events import DetectorConfig, WindowParams, build_pairs
from ebclkit.synthetic import GeneratorConfig, generate, ramp, sigmoid, write_cohort


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_same_seed_gives_identical_files(tmp_path):
    cfg = GeneratorConfig(n_patients=30, seed=11)
    write_cohort(cfg, tmp_path / "a")
    write_cohort(cfg, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_different_seed_changes_data():
    a, _, _ = generate(GeneratorConfig(n_patients=5, seed=1))
    b, _, _ = generate(GeneratorConfig(n_patients=5, seed=2))
    assert not np.array_equal(a.trajectories[0].times, b.trajectories[0].times)


def test_outcome_prevalence_with_zero_slope():
    b = -0.5
    cfg = GeneratorConfig(n_patients=6000, obs_rate=0.5, outcome_link=(0.0, b), n_events_per_patient=(2, 2), seed=5)
    _, outcomes, _ = generate(cfg)
    labels = np.array([o.value for o in outcomes if o.task == "mortality"])
    assert labels.size >= 10_000
    p = sigmoid(b)
    sigma = np.sqrt(p * (1 - p) / labels.size)
    assert abs(labels.mean() - p) < 3 * sigma


def test_static_features_constant_per_patient():
    cfg = GeneratorConfig(n_patients=40, seed=2)
    dataset, _, _ = generate(cfg)
    for traj in dataset:
        for k in range(cfg.n_static_features):
            vals = traj.values[traj.feature_ids == k]
            if vals.size:
                assert vals.max() - vals.min() == 0


def test_static_values_disagree_across_patients():
    cfg = GeneratorConfig(n_patients=400, seed=4)
    dataset, _, _ = generate(cfg)
    pairs = build_pairs(dataset, DetectorConfig(), WindowParams(tau=64, min_len=8))

    def static_signature(window):
        sig = {}
        for f, v in zip(window.feature_ids, window.values):
            if f < cfg.n_static_features:
                sig[int(f)] = v
        return sig

    rng = np.random.default_rng(0)
    disagree = trials = 0
    for _ in range(2000):
        a, b = rng.choice(len(pairs), 2, replace=False)
        pa, pb = pairs[a], pairs[b]
        if pa.event.patient_id == pb.event.patient_id:
            continue
        sa, sb = static_signature(pa.pre), static_signature(pb.post)
        shared = set(sa) & set(sb)
        if not shared:
            continue
        trials += 1
        disagree += any(sa[k] != sb[k] for k in shared)
    # one shared static feature alone already disagrees with prob 1 - 1/card
    assert disagree / trials >= 1 - 1 / cfg.static_cardinality - 3 * np.sqrt(0.25 / trials)


def test_pre_post_of_same_event_share_statics():
    cfg = GeneratorConfig(n_patients=50, seed=8)
    dataset, _, _ = generate(cfg)
    for p in build_pairs(dataset, DetectorConfig(), WindowParams(tau=64, min_len=8))[:40]:
        for k in range(cfg.n_static_features):
            a = p.pre.values[p.pre.feature_ids == k]
            b = p.post.values[p.post.feature_ids == k]
            if a.size and b.size:
                assert a[0] == b[0]


def test_post_slope_tracks_severity_on_noiseless_config():
    cfg = GeneratorConfig(n_patients=300, noise_std=0.0, amplitude=0.0, obs_rate=4.0, seed=9)
    _, _, truths = generate(cfg)
    s = np.array([t.severity for t in truths])
    post = np.array([t.post_slope for t in truths])
    pre = np.array([t.pre_slope for t in truths])
    # the deviation peaks just after the event and then decays, so a larger
    # severity means a steeper post-event decline and a steeper pre-event rise
    assert np.corrcoef(s, post)[0, 1] < -0.9
    assert np.corrcoef(s, pre)[0, 1] > 0.9


def test_ground_truth_one_row_per_event():
    cfg = GeneratorConfig(n_patients=25, seed=1)
    dataset, outcomes, truths = generate(cfg)
    n_admissions = sum(int((t.kinds == 1).sum()) for t in dataset)
    assert len(truths) == n_admissions
    assert sum(o.task == "mortality" for o in outcomes) == n_admissions


def test_outcomes_follow_their_event():
    _, outcomes, _ = generate(GeneratorConfig(n_patients=50, seed=6))
    assert all(o.time > o.event_time for o in outcomes)


def test_ramp_shape():
    assert ramp(-2.0, 1.0, 1.5) == 0.0
    assert ramp(-1.0, 1.0, 1.5) == 0.0
    # v exp(-v/decay) peaks at v = decay
    v = np.linspace(0, 10, 2001)
    peak = v[np.argmax(ramp(v - 1.0, 1.0, 1.5))]
    assert peak == pytest.approx(1.5, abs=0.01)


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigurationError):
        GeneratorConfig(n_patients=0)
    with pytest.raises(ConfigurationError):
        GeneratorConfig(obs_rate=0.0)
    with pytest.raises(ConfigurationError):
        GeneratorConfig.from_dict({"bogus": 1})
    cfg = GeneratorConfig(n_patients=7, n_events_per_patient=(2, 3))
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
