import json
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import admission_traj, make_traj, toy_dataset
from ebclkit.errors import ConfigurationError, EventStreamError
from ebclkit.events import (
    KIND_CODE,
    DetectorConfig,
    Excluded,
    IndexEvent,
    Observation,
    Outcome,
    PatientTrajectory,
    Rejected,
    SplitSpec,
    WindowParams,
    attach_labels,
    build_pairs,
    detect_events,
    extract_window_pair,
    hypotension_positions,
    ingest,
    parse_time,
    read_outcomes,
    split_by_patient,
    split_manifest,
    write_events,
    write_outcomes,
)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


# -- data model ---------------------------------------------------------------

def test_observation_rejects_nonfinite_continuous():
    with pytest.raises(EventStreamError):
        Observation(0.0, 1, float("nan"), True)


def test_observation_rejects_negative_category():
    with pytest.raises(EventStreamError):
        Observation(0.0, 1, -1, False)


def test_trajectory_sorts_stably():
    traj = PatientTrajectory.from_observations("p", [
        Observation(2.0, 0, 1.0), Observation(1.0, 1, 2.0), Observation(1.0, 2, 3.0), Observation(0.5, 3, 4.0),
    ])
    assert traj.times.tolist() == [0.5, 1.0, 1.0, 2.0]
    # tie at t=1 keeps input order
    assert traj.feature_ids.tolist() == [3, 1, 2, 0]


def test_trajectory_arrays_are_frozen():
    traj = make_traj("p", [0.0, 1.0])
    with pytest.raises(ValueError):
        traj.times[0] = 5.0


# -- ingestion ----------------------------------------------------------------

def test_ingest_sorts_shuffled_records(tmp_path):
    path = write_jsonl(tmp_path / "e.jsonl", [
        {"patient_id": "a", "time": 3.0, "feature": "x", "value": 1.0},
        {"patient_id": "a", "time": 1.0, "feature": "x", "value": 2.0},
        {"patient_id": "a", "time": 2.0, "feature": "x", "value": 3.0},
    ])
    ds = ingest(path)
    assert len(ds) == 1
    assert ds["a"].times.tolist() == [1.0, 2.0, 3.0]
    assert ds["a"].values.tolist() == [2.0, 3.0, 1.0]


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert len(ingest(path)) == 0


def test_ingest_potassium_triple(tmp_path):
    path = write_jsonl(tmp_path / "k.jsonl", [
        {"patient_id": "p", "time": "2/1/2024 8:00", "feature": "potassium", "value": "4.2"},
    ])
    ds = ingest(path, feature_index={"potassium": 7})
    obs = ds["p"][0]
    expected_days = (datetime(2024, 2, 1, 8, 0) - datetime(1970, 1, 1)).total_seconds() / 86400
    assert obs.time == pytest.approx(expected_days, abs=1e-9)
    assert (obs.feature_id, obs.value, obs.is_continuous) == (7, 4.2, True)


def test_parse_time_with_custom_epoch():
    assert parse_time("1/2/2024 12:00", datetime(2024, 1, 1)) == pytest.approx(1.5)


def test_ingest_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"patient_id": "a", "time": 0, "feature": "x", "value": 1}) + "\n{not json\n")
    with pytest.raises(EventStreamError, match=":2:"):
        ingest(path)


def test_ingest_unknown_kind_is_malformed(tmp_path):
    path = write_jsonl(tmp_path / "k.jsonl", [{"patient_id": "a", "time": 0, "feature": "x", "value": 1, "kind": "bogus"}])
    with pytest.raises(EventStreamError):
        ingest(path)


def test_ingest_preserves_record_count_and_categories(tmp_path):
    recs = [
        {"patient_id": "a", "time": 0, "feature": "sex", "value": "F"},
        {"patient_id": "b", "time": 1, "feature": "sex", "value": "M"},
        {"patient_id": "a", "time": 2, "feature": "hr", "value": 80},
        {"patient_id": "a", "time": 3, "feature": "adm", "value": "inpatient", "kind": "admission"},
    ]
    ds = ingest(write_jsonl(tmp_path / "c.jsonl", recs))
    assert ds.n_observations == 4
    assert set(ds.category_names) == {"F", "M", "inpatient"}
    a = ds["a"]
    assert a[0].is_continuous is False
    assert ds.category_names[a[0].value] == "F"
    assert a[2].kind == "admission"


def test_write_then_ingest_round_trip(tmp_path, tiny_cohort):
    dataset = tiny_cohort[0].subset(tiny_cohort[0].patient_ids[:5])
    write_events(dataset, tmp_path / "e.jsonl")
    back = ingest(tmp_path / "e.jsonl", feature_index=dataset.feature_index)
    for traj in dataset:
        other = back[traj.patient_id]
        np.testing.assert_array_equal(traj.times, other.times)
        np.testing.assert_array_equal(traj.feature_ids, other.feature_ids)
        np.testing.assert_array_equal(traj.is_continuous, other.is_continuous)
        np.testing.assert_array_equal(traj.values[traj.is_continuous], other.values[other.is_continuous])


def test_outcomes_round_trip(tmp_path):
    outs = [Outcome("a", "mortality", 3.5, 1, 1.0), Outcome("b", "long_stay", 2.0, 0)]
    write_outcomes(outs, tmp_path / "o.jsonl")
    assert read_outcomes(tmp_path / "o.jsonl") == outs


def test_read_outcomes_rejects_non_binary(tmp_path):
    path = write_jsonl(tmp_path / "o.jsonl", [{"patient_id": "a", "task": "m", "time": 1, "value": 2}])
    with pytest.raises(EventStreamError, match=":1:"):
        read_outcomes(path)


# -- splits -------------------------------------------------------------------

def _n_patient_dataset(n, events_per_patient=1):
    trajs = [make_traj(f"p{k:02d}", np.arange(events_per_patient, dtype=float)) for k in range(n)]
    return toy_dataset(trajs, 1)


def test_split_sizes_ten_patients():
    train, val, test = split_by_patient(_n_patient_dataset(10), SplitSpec((0.8, 0.1, 0.1), seed=7))
    assert (len(train), len(val), len(test)) == (8, 1, 1)
    ids = [set(s.patient_ids) for s in (train, val, test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_split_is_deterministic():
    ds = _n_patient_dataset(37)
    a = split_manifest(split_by_patient(ds, SplitSpec(seed=3)))
    b = split_manifest(split_by_patient(ds, SplitSpec(seed=3)))
    assert a == b


def test_split_keeps_all_events_of_a_patient_together():
    ds = _n_patient_dataset(10, events_per_patient=5)
    for part in split_by_patient(ds, SplitSpec(seed=1)):
        for traj in part:
            assert len(traj) == 5


def test_split_too_few_patients():
    with pytest.raises(EventStreamError):
        split_by_patient(_n_patient_dataset(2))


def test_split_fractions_validated():
    with pytest.raises(ConfigurationError):
        SplitSpec((0.5, 0.5, 0.5))


@given(st.integers(3, 200), st.integers(0, 2**16))
@settings(max_examples=40, deadline=None)
def test_split_is_a_partition(n, seed):
    ds = _n_patient_dataset(n)
    parts = split_by_patient(ds, SplitSpec(seed=seed))
    ids = [p.patient_ids for p in parts]
    assert sorted(sum(ids, [])) == sorted(ds.patient_ids)
    assert all(len(i) >= 1 for i in ids)


# -- event detection ----------------------------------------------------------

def _map_traj(values):
    n = len(values)
    return make_traj("p", np.arange(n, dtype=float), np.zeros(n, int), np.asarray(values, float))


@pytest.mark.parametrize("series, expected", [
    ([65, 58], [1]),
    ([58, 55], []),
    ([65, 58, 70, 59], [1, 3]),
    ([65, 60, 58], []),        # exactly 60 neither arms nor fires
    ([60, 58], []),
])
def test_hypotension_examples(series, expected):
    events = detect_events(_map_traj(series), DetectorConfig("hypotension", "MAP"), ["MAP"])
    assert [e.position for e in events] == expected
    assert all(e.kind == "hypotension" for e in events)


def _brute_force_crossings(values, threshold=60.0):
    hits = []
    for k in range(1, len(values)):
        if values[k - 1] > threshold and values[k] < threshold:
            hits.append(k)
    return hits


@given(st.lists(st.sampled_from([55.0, 59.0, 60.0, 61.0, 70.0]), max_size=40))
def test_hypotension_matches_brute_force(values):
    assert hypotension_positions(np.array(values)).tolist() == _brute_force_crossings(values)


def test_hypotension_ignores_other_features():
    traj = make_traj("p", [0, 1, 2, 3], [0, 1, 1, 0], [65.0, 40.0, 40.0, 58.0])
    events = detect_events(traj, DetectorConfig("hypotension", "MAP"), ["MAP", "HR"])
    assert [e.position for e in events] == [3]


def test_hypotension_missing_feature_is_config_error():
    with pytest.raises(ConfigurationError):
        detect_events(_map_traj([65, 58]), DetectorConfig("hypotension", "MAP"), ["HR"])


def test_encounter_event_sets():
    kinds = [KIND_CODE[k] for k in ("obs", "admission", "outpatient", "vent_start", "other", "discharge")]
    traj = make_traj("p", np.arange(6.0), kinds=kinds)
    pos = lambda s: [e.position for e in detect_events(traj, DetectorConfig(s))]
    assert pos("admission") == [1]
    assert pos("outpatient") == [2]
    assert pos("ventilation") == [3]
    assert pos("non_admission") == [2, 4]


def test_detector_config_validation():
    with pytest.raises(ConfigurationError):
        DetectorConfig("nonsense")
    with pytest.raises(ConfigurationError):
        DetectorConfig("hypotension")


# -- windows ------------------------------------------------------------------

def _event(traj):
    return detect_events(traj, DetectorConfig())[0]


def test_fifteen_pre_observations_rejected():
    traj = admission_traj("p", 15, 40)
    assert isinstance(extract_window_pair(traj, _event(traj), tau=512, min_len=16), Rejected)


def test_short_post_rejected():
    traj = admission_traj("p", 40, 10)
    out = extract_window_pair(traj, _event(traj), tau=512, min_len=16)
    assert isinstance(out, Rejected) and "post" in out.reason


def test_nearest_tau_observations_kept():
    traj = admission_traj("p", 600, 20)
    ev = _event(traj)
    pair = extract_window_pair(traj, ev, tau=512, min_len=16)
    assert len(pair.pre) == 512
    np.testing.assert_array_equal(pair.pre.times, traj.times[ev.position - 512:ev.position])
    assert np.all(np.diff(pair.pre.times) >= 0)


def test_censoring_hand_walk():
    # positions p1..p6 before the event, event at index 6
    traj = make_traj("p", np.arange(10.0), kinds=[0] * 6 + [KIND_CODE["admission"]] + [0] * 3)
    ev = _event(traj)
    pair = extract_window_pair(traj, ev, tau=3, min_len=1, censor_pre=2)
    assert pair.pre.times.tolist() == [1.0, 2.0, 3.0]     # p2, p3, p4
    assert pair.post.times.tolist() == [6.0, 7.0, 8.0]


def test_censor_post_drops_from_event():
    traj = make_traj("p", np.arange(10.0), kinds=[0] * 4 + [KIND_CODE["admission"]] + [0] * 5)
    pair = extract_window_pair(traj, _event(traj), tau=3, min_len=1, censor_post=2)
    assert pair.post.times.tolist() == [6.0, 7.0, 8.0]


def test_stop_time_trims_post_window():
    traj = make_traj("p", np.arange(10.0), kinds=[0] * 3 + [KIND_CODE["admission"]] + [0] * 6)
    pair = extract_window_pair(traj, _event(traj), tau=10, min_len=1, stop_time=5.0)
    assert pair.post.times.tolist() == [3.0, 4.0, 5.0]


def test_window_argument_validation():
    traj = admission_traj("p", 20, 20)
    with pytest.raises(ConfigurationError):
        extract_window_pair(traj, _event(traj), tau=8, min_len=16)
    with pytest.raises(EventStreamError):
        extract_window_pair(traj, IndexEvent("p", 3, -1.0), tau=16, min_len=1)


@given(st.integers(0, 60), st.integers(1, 60), st.integers(1, 40), st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_uncensored_windows_are_contiguous(n_before, n_after, tau, min_len):
    min_len = min(min_len, tau)
    traj = admission_traj("p", n_before, n_after, seed=n_before)
    ev = _event(traj)
    pair = extract_window_pair(traj, ev, tau=tau, min_len=min_len)
    if not pair:
        return
    j = ev.position
    joined = np.concatenate([pair.pre.times, pair.post.times])
    start = j - len(pair.pre)
    np.testing.assert_array_equal(joined, traj.times[start:start + joined.size])
    assert pair.pre.times.max() <= ev.time
    assert pair.post.times.min() >= ev.time
    assert min(len(pair.pre), len(pair.post)) >= min_len


# -- labels -------------------------------------------------------------------

def _pair():
    # pre ends at t=4, post ends at t=9, event at t=5
    traj = make_traj("p", np.arange(10.0), kinds=[0] * 5 + [KIND_CODE["admission"]] + [0] * 4)
    return extract_window_pair(traj, _event(traj), tau=10, min_len=1)


def test_mortality_too_close_excluded():
    assert isinstance(attach_labels(_pair(), {"mortality": (9.5, 1)}), Excluded)


def test_mortality_two_days_after_labelled():
    assert attach_labels(_pair(), {"mortality": (11.0, 1)}).labels == {"mortality": 1}


def test_pre_only_task_uses_pre_boundary():
    # 1.5 days after the last pre observation, before the last post observation
    assert attach_labels(_pair(), {"long_stay": (5.5, 0)}).labels == {"long_stay": 0}


def test_unknown_task_is_config_error():
    with pytest.raises(ConfigurationError):
        attach_labels(_pair(), {"nonsense": (20.0, 1)})


def test_build_pairs_attaches_event_bound_labels(tiny_cohort):
    dataset, outcomes, truths, _ = tiny_cohort
    pairs = build_pairs(dataset, DetectorConfig(), WindowParams(tau=24, min_len=8), outcomes)
    assert pairs
    by_event = {(o.patient_id, o.event_time, o.task): o.value for o in outcomes}
    for p in pairs[:50]:
        for task, value in p.labels.items():
            assert by_event[(p.event.patient_id, p.event.time, task)] == value


def test_end_at_discharge_limits_post(tiny_cohort):
    dataset = tiny_cohort[0]
    pairs = build_pairs(dataset, DetectorConfig(), WindowParams(tau=4000, min_len=8, end_at_discharge=True))
    for p in pairs[:30]:
        traj = dataset[p.event.patient_id]
        discharges = traj.times[(traj.kinds == KIND_CODE["discharge"]) & (traj.times >= p.event.time)]
        assert p.post.times[-1] <= discharges[0]
