import numpy as np
import pytest
import torch

from ebclkit.featurize import TokenBatch
from ebclkit.events import KIND_CODE, EventDataset, PatientTrajectory, WindowParams
from ebclkit.pipeline import prepare_cohort
from ebclkit.synthetic import GeneratorConfig, generate

torch.set_num_threads(1)


def make_traj(pid, times, features=None, values=None, cont=None, kinds=None):
    n = len(times)
    return PatientTrajectory.from_arrays(
        pid,
        np.asarray(times, float),
        np.zeros(n, int) if features is None else features,
        np.arange(n, dtype=float) if values is None else values,
        cont,
        kinds,
    )


def admission_traj(pid, n_before, n_after, event_time=100.0, n_features=2, seed=0):
    """Trajectory with ``n_before`` observations before an admission record
    and ``n_after`` after it (the admission record itself included in post)."""
    rng = np.random.default_rng(seed)
    before = event_time - np.sort(rng.uniform(0.01, 5.0, n_before))[::-1]
    after = event_time + np.sort(rng.uniform(0.01, 5.0, n_after))
    times = np.concatenate([before, [event_time], after])
    feats = np.concatenate([rng.integers(0, n_features, n_before), [n_features], rng.integers(0, n_features, n_after)])
    vals = np.concatenate([rng.normal(size=n_before), [0.0], rng.normal(size=n_after)])
    cont = np.concatenate([np.ones(n_before, bool), [False], np.ones(n_after, bool)])
    kinds = np.concatenate([np.zeros(n_before), [KIND_CODE["admission"]], np.zeros(n_after)]).astype(np.int8)
    return PatientTrajectory.from_arrays(pid, times, feats, vals, cont, kinds)


@pytest.fixture(scope="session")
def tiny_cohort():
    cfg = GeneratorConfig(n_patients=120, obs_rate=10.0, n_static_features=1, static_cardinality=2, seed=3)
    dataset, outcomes, truths = generate(cfg)
    prepared = prepare_cohort(dataset, outcomes, window=WindowParams(tau=24, min_len=8))
    return dataset, outcomes, truths, prepared


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_dataset(trajs, n_features, categories=()):
    return EventDataset(tuple(trajs), tuple(f"f{k}" for k in range(n_features)), tuple(categories))


def random_token_batch(n_rows, seq_len, rng, n_features=5, n_categories=4, lengths=None):
    """Random valid token batch; row ``i`` has ``lengths[i]`` real tokens."""
    lengths = rng.integers(1, seq_len + 1, n_rows) if lengths is None else np.asarray(lengths)
    mask = np.arange(seq_len)[None, :] < lengths[:, None]
    is_cont = rng.random((n_rows, seq_len)) < 0.7
    fid = rng.integers(1, n_features + 1, (n_rows, seq_len))
    cat = np.where(is_cont, 0, rng.integers(1, n_categories, (n_rows, seq_len)))
    return TokenBatch(
        times=np.where(mask, rng.normal(size=(n_rows, seq_len)), 0.0),
        feature_ids=np.where(mask, fid, 0),
        cont_values=np.where(mask & is_cont, rng.normal(size=(n_rows, seq_len)), 0.0),
        cat_value_ids=np.where(mask, cat, 0),
        is_cont=is_cont & mask,
        mask=mask,
    )


# acceptance verdicts, printed together at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
