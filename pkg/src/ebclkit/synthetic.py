"""Synthetic event-anchored cohorts with known ground truth.

Each patient carries a few static categorical features (constant for life),
several oscillating continuous features (sinusoid plus a patient-local linear
trend plus noise) and one or more admission events. At every admission a
latent severity ``s ~ Normal(0, trend_shift_scale)`` bends the trajectories
of the oscillating features: a deviation ``s * loading * ramp(t)`` starts
``shift_lead_days`` before the admission, grows linearly and decays with time
constant ``shift_decay_days``. Outcomes are drawn through a logistic link on
``s``, so a representation that captures the event-local trend can predict
them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .events import KIND_CODE, EventDataset, Outcome, PatientTrajectory, write_events, write_outcomes


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 2000
    n_static_features: int = 3
    static_cardinality: int = 6
    n_oscillating_features: int = 6
    n_events_per_patient: tuple = (1, 2)
    obs_rate: float = 24.0
    trend_shift_scale: float = 1.0
    outcome_link: tuple = (2.0, -0.5)
    seed: int = 0
    # shape of the timeline, in days
    history_days: float = 6.0
    event_gap_days: float = 12.0
    followup_days: float = 6.0
    # oscillating features
    base_std: float = 1.0
    amplitude: float = 0.5
    period_days: tuple = (0.5, 2.0)
    trend_slope_mean: float = 0.0
    trend_slope_std: float = 0.02
    noise_std: float = 0.2
    # event-triggered deviation
    shift_lead_days: float = 1.0
    shift_decay_days: float = 1.5
    # fraction of observations that are static-feature readings
    static_share: float = 0.25
    outcome_offset_days: float = 8.0
    horizon_days: float = 365.0

    def __post_init__(self):
        counts = (self.n_patients, self.n_static_features, self.static_cardinality, self.n_oscillating_features)
        if min(counts) < 1:
            raise ConfigurationError("generator counts must be positive")
        lo, hi = self.n_events_per_patient
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"bad n_events_per_patient {self.n_events_per_patient}")
        if self.obs_rate <= 0:
            raise ConfigurationError("obs_rate must be > 0")
        if not 0 <= self.static_share < 1:
            raise ConfigurationError("static_share must lie in [0, 1)")
        if self.shift_decay_days <= 0:
            raise ConfigurationError("shift_decay_days must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown generator fields: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class EventTruth:
    patient_id: str
    event_time: float
    severity: float
    pre_slope: float
    post_slope: float


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def ramp(u, lead: float, decay: float):
    """Deviation profile around an event at ``u = 0``: zero before ``-lead``,
    then ``v * exp(-v / decay)`` with ``v = u + lead``."""
    v = np.maximum(np.asarray(u, dtype=float) + lead, 0.0)
    return v * np.exp(-v / decay)


def _ls_slope(t, y) -> float:
    t = t - t.mean()
    return float(np.dot(t, y - y.mean()) / np.dot(t, t))


def feature_names(config: GeneratorConfig) -> tuple:
    static = [f"static_{k}" for k in range(config.n_static_features)]
    osc = [f"osc_{k}" for k in range(config.n_oscillating_features)]
    return tuple(static + osc + ["admission", "discharge"])


def category_names(config: GeneratorConfig) -> tuple:
    static = [f"s{k}_v{c}" for k in range(config.n_static_features) for c in range(config.static_cardinality)]
    return tuple(static + ["inpatient", "home"])


def _feature_loadings(config: GeneratorConfig) -> np.ndarray:
    # osc_0 is the reference feature with loading +1
    rng = np.random.default_rng([config.seed, 2**31 - 1])
    g = rng.choice([-1.0, 1.0], size=config.n_oscillating_features) * rng.uniform(0.5, 1.0, config.n_oscillating_features)
    g[0] = 1.0
    return g


def _patient(config: GeneratorConfig, index: int, loadings: np.ndarray):
    rng = np.random.default_rng([config.seed, index])
    pid = f"P{index:06d}"
    n_static, n_osc = config.n_static_features, config.n_oscillating_features
    lo, hi = config.n_events_per_patient
    n_events = int(rng.integers(lo, hi + 1))
    jitter = rng.uniform(0.0, 0.25 * config.event_gap_days, size=n_events)
    event_times = config.history_days + config.event_gap_days * np.arange(n_events) + jitter
    end = event_times[-1] + config.followup_days

    n_obs = int(rng.poisson(config.obs_rate * end))
    times = np.sort(rng.uniform(0.0, end, size=n_obs))
    is_static = rng.random(n_obs) < config.static_share
    feat = np.where(is_static, rng.integers(0, n_static, n_obs), n_static + rng.integers(0, n_osc, n_obs))

    static_values = rng.integers(0, config.static_cardinality, n_static)
    base = rng.normal(0.0, config.base_std, n_osc)
    period = rng.uniform(*config.period_days, size=n_osc)
    phase = rng.uniform(0, 2 * np.pi, n_osc)
    slope = rng.normal(config.trend_slope_mean, config.trend_slope_std, n_osc)
    severity = rng.normal(0.0, config.trend_shift_scale, n_events)

    def mean_curve(k, t, with_osc=True):
        y = base[k] + slope[k] * (t - end / 2)
        if with_osc:
            y = y + config.amplitude * np.sin(2 * np.pi * t / period[k] + phase[k])
        for te, s in zip(event_times, severity):
            y = y + s * loadings[k] * ramp(t - te, config.shift_lead_days, config.shift_decay_days)
        return y

    values = np.empty(n_obs)
    static_idx = np.flatnonzero(is_static)
    values[static_idx] = feat[static_idx] * config.static_cardinality + static_values[feat[static_idx]]
    for k in range(n_osc):
        idx = np.flatnonzero(feat == n_static + k)
        values[idx] = mean_curve(k, times[idx]) + rng.normal(0.0, config.noise_std, idx.size)

    admit_fid, discharge_fid = n_static + n_osc, n_static + n_osc + 1
    n_cat = n_static * config.static_cardinality
    stays = np.exp(rng.normal(np.log(4.0) + 0.4 * severity, 0.4))
    stays = np.minimum(stays, config.event_gap_days * 0.5)
    enc_times = np.concatenate([event_times, event_times + stays])
    enc_feat = np.concatenate([np.full(n_events, admit_fid), np.full(n_events, discharge_fid)])
    enc_vals = np.concatenate([np.full(n_events, n_cat), np.full(n_events, n_cat + 1)]).astype(float)
    enc_kind = np.concatenate([np.full(n_events, KIND_CODE["admission"]), np.full(n_events, KIND_CODE["discharge"])])

    all_t = np.concatenate([times, enc_times])
    all_f = np.concatenate([feat, enc_feat])
    all_v = np.concatenate([values, enc_vals])
    all_c = np.concatenate([~is_static, np.zeros(2 * n_events, bool)])
    all_k = np.concatenate([np.zeros(n_obs, np.int8), enc_kind]).astype(np.int8)
    traj = PatientTrajectory.from_arrays(pid, all_t, all_f, all_v, all_c, all_k)

    a, b = config.outcome_link
    outcomes, truths = [], []
    grid = np.linspace(0.0, config.shift_decay_days * 2, 64)
    for te, s, stay in zip(event_times, severity, stays):
        died = rng.random() < sigmoid(a * s + b)
        wait = min(rng.exponential(0.25 * config.horizon_days * np.exp(-0.5 * s)), config.horizon_days)
        when = te + config.outcome_offset_days + (wait if died else config.horizon_days)
        outcomes.append(Outcome(pid, "mortality", float(when), int(died), float(te)))
        outcomes.append(Outcome(pid, "long_stay", float(te + stay), int(stay > 5.0), float(te)))
        pre_slope = _ls_slope(te - grid, mean_curve(0, te - grid, with_osc=False))
        post_slope = _ls_slope(te + grid, mean_curve(0, te + grid, with_osc=False))
        truths.append(EventTruth(pid, float(te), float(s), pre_slope, post_slope))
    return traj, outcomes, truths


def generate(config: GeneratorConfig) -> tuple:
    """Draw a cohort.

    Returns
    -------
    dataset : EventDataset
    outcomes : list of Outcome
        ``mortality`` (severity-linked, consumes pre and post) and
        ``long_stay`` (pre-only) rows, each bound to its event time.
    ground_truth : list of EventTruth
    """
    loadings = _feature_loadings(config)
    trajs, outcomes, truths = [], [], []
    for i in range(config.n_patients):
        traj, outs, tr = _patient(config, i, loadings)
        trajs.append(traj)
        outcomes.extend(outs)
        truths.extend(tr)
    dataset = EventDataset(tuple(trajs), feature_names(config), category_names(config))
    return dataset, outcomes, truths


def write_ground_truth(truths, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in truths:
            fh.write(json.dumps(asdict(t)) + "\n")


def write_cohort(config: GeneratorConfig, directory) -> dict:
    """Generate and write ``events.jsonl``, ``outcomes.jsonl`` and
    ``ground_truth.jsonl`` into ``directory``; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset, outcomes, truths = generate(config)
    paths = {
        "events": directory / "events.jsonl",
        "outcomes": directory / "outcomes.jsonl",
        "ground_truth": directory / "ground_truth.jsonl",
    }
    write_events(dataset, paths["events"])
    write_outcomes(outcomes, paths["outcomes"])
    write_ground_truth(truths, paths["ground_truth"])
    return paths
