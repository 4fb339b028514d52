"""Event-stream data model, ingestion, patient-level splits, index-event
detection and window-pair extraction.

Trajectories are stored column-wise as read-only numpy arrays so a cohort of a
few thousand patients with hundreds of observations each stays cheap to slice.
All times are fractional days from a per-dataset epoch.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import ConfigurationError, EventStreamError

#: Encounter kinds accepted in the ``kind`` field of event-stream records.
RECORD_KINDS = ("obs", "admission", "discharge", "outpatient", "vent_start", "other")
KIND_CODE = {name: code for code, name in enumerate(RECORD_KINDS)}

TIME_FORMATS = ("%m/%d/%Y %H:%M", "%m/%d/%Y, %I:%M %p", "%m/%d/%Y", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M")
DEFAULT_EPOCH = datetime(1970, 1, 1)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Observation:
    """One ``(time, feature, value)`` triple.

    ``value`` is a float for continuous features and a nonnegative integer
    code for categorical ones; ``is_continuous`` is the union tag.
    """

    time: float
    feature_id: int
    value: Union[float, int]
    is_continuous: bool = True
    kind: str = "obs"

    def __post_init__(self):
        if self.is_continuous:
            if not math.isfinite(self.value):
                raise EventStreamError(f"non-finite continuous value {self.value!r}")
        elif int(self.value) != self.value or self.value < 0:
            raise EventStreamError(f"categorical code must be a nonnegative integer, got {self.value!r}")
        if self.kind not in KIND_CODE:
            raise EventStreamError(f"unknown record kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class PatientTrajectory:
    """Chronologically ordered observations of one patient.

    Build with :meth:`from_observations` (which sorts stably) or
    :meth:`from_arrays`; the arrays are frozen after construction.
    """

    patient_id: str
    times: np.ndarray
    feature_ids: np.ndarray
    values: np.ndarray
    is_continuous: np.ndarray
    kinds: np.ndarray

    @classmethod
    def from_arrays(cls, patient_id, times, feature_ids, values, is_continuous=None, kinds=None, *, presorted=False):
        times = np.asarray(times, dtype=np.float64)
        n = times.shape[0]
        feature_ids = np.asarray(feature_ids, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        is_continuous = np.ones(n, bool) if is_continuous is None else np.asarray(is_continuous, dtype=bool)
        kinds = np.zeros(n, np.int8) if kinds is None else np.asarray(kinds, dtype=np.int8)
        if not (feature_ids.shape == values.shape == is_continuous.shape == kinds.shape == (n,)):
            raise EventStreamError(f"patient {patient_id}: column lengths differ")
        if not np.all(np.isfinite(times)):
            raise EventStreamError(f"patient {patient_id}: non-finite observation time")
        if not np.all(np.isfinite(values[is_continuous])):
            raise EventStreamError(f"patient {patient_id}: non-finite continuous value")
        cat = values[~is_continuous]
        if np.any(cat < 0) or np.any(cat != np.floor(cat)):
            raise EventStreamError(f"patient {patient_id}: categorical codes must be nonnegative integers")
        if not presorted:
            order = np.argsort(times, kind="stable")
            times, feature_ids, values = times[order], feature_ids[order], values[order]
            is_continuous, kinds = is_continuous[order], kinds[order]
        return cls(
            str(patient_id),
            _readonly(np.array(times)),
            _readonly(np.array(feature_ids)),
            _readonly(np.array(values)),
            _readonly(np.array(is_continuous)),
            _readonly(np.array(kinds)),
        )

    @classmethod
    def from_observations(cls, patient_id, observations: Iterable[Observation]):
        obs = list(observations)
        return cls.from_arrays(
            patient_id,
            [o.time for o in obs],
            [o.feature_id for o in obs],
            [float(o.value) for o in obs],
            [o.is_continuous for o in obs],
            [KIND_CODE[o.kind] for o in obs],
        )

    def __len__(self) -> int:
        return self.times.shape[0]

    def __getitem__(self, j: int) -> Observation:
        cont = bool(self.is_continuous[j])
        value = float(self.values[j]) if cont else int(self.values[j])
        return Observation(float(self.times[j]), int(self.feature_ids[j]), value, cont, RECORD_KINDS[self.kinds[j]])

    def __iter__(self) -> Iterator[Observation]:
        return (self[j] for j in range(len(self)))

    def slice(self, start: int, stop: int) -> "PatientTrajectory":
        """Contiguous sub-trajectory ``[start, stop)``; shares memory."""
        start, stop = max(start, 0), min(stop, len(self))
        stop = max(stop, start)
        return PatientTrajectory(
            self.patient_id,
            self.times[start:stop],
            self.feature_ids[start:stop],
            self.values[start:stop],
            self.is_continuous[start:stop],
            self.kinds[start:stop],
        )

    def take(self, index: np.ndarray) -> "PatientTrajectory":
        index = np.asarray(index, dtype=np.int64)
        return PatientTrajectory(
            self.patient_id,
            _readonly(self.times[index]),
            _readonly(self.feature_ids[index]),
            _readonly(self.values[index]),
            _readonly(self.is_continuous[index]),
            _readonly(self.kinds[index]),
        )


@dataclass(frozen=True)
class EventDataset:
    """A cohort of trajectories plus the codebooks used to build them.

    ``feature_names[k]`` names raw feature code ``k``; ``category_names[c]``
    names raw categorical code ``c``.
    """

    trajectories: tuple
    feature_names: tuple = ()
    category_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "category_names", tuple(self.category_names))
        ids = [t.patient_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise EventStreamError("duplicate patient_id in dataset")
        object.__setattr__(self, "_index", {pid: k for k, pid in enumerate(ids)})

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[PatientTrajectory]:
        return iter(self.trajectories)

    def __getitem__(self, patient_id: str) -> PatientTrajectory:
        return self.trajectories[self._index[patient_id]]

    def __contains__(self, patient_id) -> bool:
        return patient_id in self._index

    @property
    def patient_ids(self) -> list:
        return [t.patient_id for t in self.trajectories]

    @property
    def feature_index(self) -> dict:
        return {name: k for k, name in enumerate(self.feature_names)}

    @property
    def n_observations(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def subset(self, patient_ids: Iterable[str]) -> "EventDataset":
        return EventDataset(tuple(self[p] for p in patient_ids), self.feature_names, self.category_names)


def parse_time(raw, epoch: datetime = DEFAULT_EPOCH) -> float:
    """Day offset from ``epoch``. Numbers pass through as days already."""
    if isinstance(raw, bool):
        raise ValueError(f"bad time {raw!r}")
    if isinstance(raw, (int, float)):
        return float(raw)
    for fmt in TIME_FORMATS:
        try:
            stamp = datetime.strptime(raw.strip(), fmt)
        except ValueError:
            continue
        return (stamp - epoch).total_seconds() / 86400.0
    raise ValueError(f"unrecognised timestamp {raw!r}")


def _parse_value(raw, feature: str, categorical_features) -> tuple:
    """Return ``(value, is_continuous, category_label)``."""
    if isinstance(raw, bool) or raw is None:
        raise ValueError(f"bad value {raw!r}")
    if feature in categorical_features:
        return None, False, str(raw)
    if isinstance(raw, (int, float)):
        return float(raw), True, None
    try:
        return float(raw), True, None
    except ValueError:
        return None, False, str(raw)


def ingest(
    path,
    format: str = "jsonl",
    *,
    feature_index: Mapping[str, int] | None = None,
    categorical_features: Iterable[str] = (),
    epoch: datetime = DEFAULT_EPOCH,
) -> EventDataset:
    """Read an event-stream file into an :class:`EventDataset`.

    Each line is ``{"patient_id", "time", "feature", "value", "kind"}``.
    Numeric strings are read as continuous values unless the feature is in
    ``categorical_features``. Feature codes come from ``feature_index`` when
    given; unseen names get fresh codes in sorted-name order.

    Raises
    ------
    EventStreamError
        On a malformed line, with its 1-based line number.
    """
    if format != "jsonl":
        raise ConfigurationError(f"unsupported event-stream format {format!r}; only 'jsonl'")
    categorical_features = set(categorical_features)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pid = str(rec["patient_id"])
                feature = str(rec["feature"])
                kind = rec.get("kind", "obs")
                if kind not in KIND_CODE:
                    raise ValueError(f"unknown kind {kind!r}")
                t = parse_time(rec["time"], epoch)
                value, cont, label = _parse_value(rec["value"], feature, categorical_features)
                if cont and not math.isfinite(value):
                    raise ValueError("non-finite value")
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise EventStreamError(f"{path}:{lineno}: malformed record ({exc})") from exc
            rows.append((pid, t, feature, value, cont, label, KIND_CODE[kind]))
    return _assemble(rows, feature_index)


def _assemble(rows, feature_index=None) -> EventDataset:
    names = dict(feature_index or {})
    for new in sorted({r[2] for r in rows} - set(names)):
        names[new] = max(names.values(), default=-1) + 1
    size = max(names.values(), default=-1) + 1
    feature_names = [f"__unused_{k}" for k in range(size)]
    for name, k in names.items():
        feature_names[k] = name
    categories = sorted({r[5] for r in rows if r[5] is not None})
    cat_code = {c: k for k, c in enumerate(categories)}

    per_patient: dict = {}
    for pid, t, feature, value, cont, label, kind in rows:
        per_patient.setdefault(pid, []).append(
            (t, names[feature], value if cont else float(cat_code[label]), cont, kind)
        )
    trajectories = []
    for pid, recs in per_patient.items():
        cols = list(zip(*recs))
        trajectories.append(PatientTrajectory.from_arrays(pid, *cols))
    return EventDataset(tuple(trajectories), tuple(feature_names), tuple(categories))


def write_events(dataset: EventDataset, path) -> None:
    """Write ``dataset`` in the JSON-Lines event-stream schema."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in dataset:
            for j in range(len(traj)):
                cont = bool(traj.is_continuous[j])
                value = float(traj.values[j]) if cont else dataset.category_names[int(traj.values[j])]
                rec = {
                    "patient_id": traj.patient_id,
                    "time": float(traj.times[j]),
                    "feature": dataset.feature_names[traj.feature_ids[j]],
                    "value": value,
                    "kind": RECORD_KINDS[traj.kinds[j]],
                }
                fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigurationError("split fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions sum to {sum(self.fractions)}, expected 1")


def _split_sizes(n: int, fractions) -> list:
    raw = [n * f for f in fractions]
    sizes = [max(1, int(math.floor(r))) for r in raw]
    # largest remainder, then trim from the biggest split if the floor-to-1 rule overshot
    while sum(sizes) < n:
        k = max(range(len(raw)), key=lambda i: (raw[i] - sizes[i], -i))
        sizes[k] += 1
    while sum(sizes) > n:
        k = max(range(len(sizes)), key=lambda i: sizes[i])
        sizes[k] -= 1
    return sizes


def split_by_patient(dataset: EventDataset, spec: SplitSpec = SplitSpec()) -> tuple:
    """Partition ``dataset`` into train/val/test by patient.

    The permutation is drawn from ``np.random.default_rng(spec.seed)`` over
    sorted patient ids, so the result does not depend on input order.
    """
    if len(dataset) < len(spec.fractions):
        raise EventStreamError(f"need at least {len(spec.fractions)} patients to split, got {len(dataset)}")
    ids = sorted(dataset.patient_ids)
    perm = np.random.default_rng(spec.seed).permutation(len(ids))
    sizes = _split_sizes(len(ids), spec.fractions)
    bounds = np.cumsum([0] + sizes)
    return tuple(
        dataset.subset(sorted(ids[k] for k in perm[lo:hi])) for lo, hi in zip(bounds[:-1], bounds[1:])
    )


def split_manifest(splits: Sequence[EventDataset], names=("train", "val", "test")) -> dict:
    return {name: split.patient_ids for name, split in zip(names, splits)}


# ---------------------------------------------------------------------------
# index events

EVENT_KINDS = ("admission", "discharge", "hypotension", "ventilation_start", "outpatient_visit", "other")


@dataclass(frozen=True)
class IndexEvent:
    patient_id: str
    position: int
    time: float
    kind: str = "admission"


@dataclass(frozen=True)
class DetectorConfig:
    """Which index events to anchor windows on.

    ``event_set`` is one of

    * ``"admission"`` -- inpatient admission records (the default EBCL anchor)
    * ``"non_admission"`` -- every encounter record that is not an admission
      or discharge (outpatient and other visits)
    * ``"outpatient"`` -- outpatient records only
    * ``"hypotension"`` -- MAP drops from above ``threshold`` to below it
    * ``"ventilation"`` -- ventilation-start records
    """

    event_set: str = "admission"
    map_feature: str | None = None
    threshold: float = 60.0

    def __post_init__(self):
        if self.event_set not in ("admission", "non_admission", "outpatient", "hypotension", "ventilation"):
            raise ConfigurationError(f"unknown event_set {self.event_set!r}")
        if self.event_set == "hypotension" and self.map_feature is None:
            raise ConfigurationError("hypotension detector needs map_feature")


def hypotension_positions(values: np.ndarray, threshold: float = 60.0) -> np.ndarray:
    """Indices ``k`` with ``values[k] < threshold`` and ``values[k-1] > threshold``.

    ``values`` is the MAP series alone, in time order. A reading exactly at
    the threshold neither arms nor fires.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero((values[1:] < threshold) & (values[:-1] > threshold)) + 1


def detect_events(trajectory: PatientTrajectory, detector: DetectorConfig, feature_names: Sequence[str] = ()) -> list:
    """Index events of ``trajectory`` in time order."""
    kinds = trajectory.kinds
    if detector.event_set == "admission":
        pos, label = np.flatnonzero(kinds == KIND_CODE["admission"]), "admission"
    elif detector.event_set == "outpatient":
        pos, label = np.flatnonzero(kinds == KIND_CODE["outpatient"]), "outpatient_visit"
    elif detector.event_set == "non_admission":
        enc = (kinds == KIND_CODE["outpatient"]) | (kinds == KIND_CODE["other"])
        pos, label = np.flatnonzero(enc), None
    elif detector.event_set == "ventilation":
        pos, label = np.flatnonzero(kinds == KIND_CODE["vent_start"]), "ventilation_start"
    else:
        names = list(feature_names)
        if detector.map_feature not in names:
            raise ConfigurationError(f"hypotension detector: feature {detector.map_feature!r} not in vocabulary")
        fid = names.index(detector.map_feature)
        map_pos = np.flatnonzero((trajectory.feature_ids == fid) & trajectory.is_continuous)
        pos = map_pos[hypotension_positions(trajectory.values[map_pos], detector.threshold)]
        label = "hypotension"
    events = []
    for j in pos:
        kind = label or ("outpatient_visit" if kinds[j] == KIND_CODE["outpatient"] else "other")
        events.append(IndexEvent(trajectory.patient_id, int(j), float(trajectory.times[j]), kind))
    return events


# ---------------------------------------------------------------------------
# windows and labels


@dataclass(frozen=True)
class Rejected:
    """An event whose windows could not be built; carries the reason."""

    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class Excluded:
    """A pair dropped by the label-leakage rule."""

    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class WindowPair:
    pre: PatientTrajectory
    post: PatientTrajectory
    event: IndexEvent
    labels: Mapping = field(default_factory=dict)

    def with_labels(self, labels: Mapping) -> "WindowPair":
        return WindowPair(self.pre, self.post, self.event, dict(labels))


def extract_window_pair(
    trajectory: PatientTrajectory,
    event: IndexEvent,
    tau: int = 512,
    min_len: int = 16,
    censor_pre: int = 0,
    censor_post: int = 0,
    stop_time: float | None = None,
):
    """Pre/post windows around ``event``.

    Pre is the ``tau`` observations before position ``j`` and post the ``tau``
    observations from ``j`` on, after first discarding ``censor_pre``
    observations just before ``j`` and ``censor_post`` at/after it. With
    ``stop_time`` set, post observations later than it are discarded first
    (used to end post windows at discharge).

    Returns a :class:`WindowPair` or :class:`Rejected` when either side has
    fewer than ``min_len`` observations.
    """
    if not (tau >= min_len >= 1):
        raise ConfigurationError(f"need tau >= min_len >= 1, got tau={tau}, min_len={min_len}")
    if censor_pre < 0 or censor_post < 0:
        raise ConfigurationError("censor counts must be nonnegative")
    j = event.position
    if not (0 <= j < len(trajectory)) or trajectory.times[j] != event.time:
        raise EventStreamError(f"event {event} does not index into trajectory {trajectory.patient_id}")
    pre_stop = j - censor_pre
    pre_start = max(0, pre_stop - tau)
    post_start = j + censor_post
    post_limit = len(trajectory)
    if stop_time is not None:
        post_limit = int(np.searchsorted(trajectory.times, stop_time, side="right"))
    post_stop = min(post_start + tau, post_limit)
    n_pre = max(0, pre_stop - pre_start)
    n_post = max(0, post_stop - post_start)
    if n_pre < min_len:
        return Rejected(f"pre window has {n_pre} < {min_len} observations")
    if n_post < min_len:
        return Rejected(f"post window has {n_post} < {min_len} observations")
    return WindowPair(trajectory.slice(pre_start, pre_stop), trajectory.slice(post_start, post_stop), event)


@dataclass(frozen=True)
class LeakageRule:
    """Maps each task to the inputs it consumes: ``"both"`` or ``"pre"``.

    A label is usable only if its outcome time is at least ``min_gap_days``
    after the last consumed observation.
    """

    tasks: Mapping = field(default_factory=lambda: {"mortality": "both", "readmission": "both", "long_stay": "pre"})
    min_gap_days: float = 1.0

    def inputs(self, task: str) -> str:
        if task not in self.tasks:
            raise ConfigurationError(f"unknown task {task!r}; known: {sorted(self.tasks)}")
        mode = self.tasks[task]
        if mode not in ("both", "pre", "post"):
            raise ConfigurationError(f"task {task!r}: bad input mode {mode!r}")
        return mode


def attach_labels(pair: WindowPair, outcomes: Mapping, rule: LeakageRule = LeakageRule()):
    """Attach ``{task: (outcome_time, value)}`` labels under the leakage rule.

    Returns the labelled pair, or :class:`Excluded` if any outcome falls less
    than ``rule.min_gap_days`` after the last observation its task consumes.
    """
    labels = {}
    for task, (when, value) in outcomes.items():
        mode = rule.inputs(task)
        last = pair.pre.times[-1] if mode == "pre" else max(pair.pre.times[-1], pair.post.times[-1])
        if when - last < rule.min_gap_days:
            return Excluded(f"{task}: outcome {when - last:.3f} days after last input observation")
        labels[task] = int(value)
    return pair.with_labels({**pair.labels, **labels})


@dataclass(frozen=True)
class Outcome:
    patient_id: str
    task: str
    time: float
    value: int
    event_time: float | None = None


def read_outcomes(path) -> list:
    """Read the outcome JSON-Lines file (``patient_id, task, time, value`` and
    an optional ``event_time`` tying the outcome to one index event)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                value = int(rec["value"])
                if value not in (0, 1):
                    raise ValueError(f"value must be 0 or 1, got {value}")
                out.append(
                    Outcome(str(rec["patient_id"]), str(rec["task"]), float(rec["time"]), value, rec.get("event_time"))
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise EventStreamError(f"{path}:{lineno}: malformed outcome ({exc})") from exc
    return out


def write_outcomes(outcomes: Iterable[Outcome], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for o in outcomes:
            rec = {"patient_id": o.patient_id, "task": o.task, "time": o.time, "value": o.value}
            if o.event_time is not None:
                rec["event_time"] = o.event_time
            fh.write(json.dumps(rec) + "\n")


def outcomes_for(event: IndexEvent, outcomes: Iterable[Outcome]) -> dict:
    """``{task: (time, value)}`` for one event; event-bound rows take precedence
    over patient-level rows."""
    found = {}
    for o in outcomes:
        if o.patient_id != event.patient_id:
            continue
        if o.event_time is None:
            found.setdefault(o.task, (o.time, o.value))
        elif abs(o.event_time - event.time) < 1e-9:
            found[o.task] = (o.time, o.value)
    return found


def index_outcomes(outcomes: Iterable[Outcome]) -> dict:
    by_patient: dict = {}
    for o in outcomes:
        by_patient.setdefault(o.patient_id, []).append(o)
    return by_patient


def next_discharge_time(trajectory: PatientTrajectory, event: IndexEvent) -> float | None:
    """Time of the first discharge record at or after ``event``, if any."""
    later = np.flatnonzero((trajectory.kinds == KIND_CODE["discharge"]) & (np.arange(len(trajectory)) >= event.position))
    return float(trajectory.times[later[0]]) if later.size else None


@dataclass(frozen=True)
class WindowParams:
    tau: int = 512
    min_len: int = 16
    censor_pre: int = 0
    censor_post: int = 0
    end_at_discharge: bool = False

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigurationError(f"tau must be >= 1, got {self.tau}")
        if min(self.min_len, self.censor_pre, self.censor_post) < 0:
            raise ConfigurationError("min_len and censoring counts must be >= 0")


def build_pairs(
    dataset: EventDataset,
    detector: DetectorConfig = DetectorConfig(),
    window: WindowParams = WindowParams(),
    outcomes: Iterable[Outcome] | None = None,
    rule: LeakageRule | None = None,
) -> list:
    """All valid window pairs of ``dataset``, one per (patient, event).

    When ``outcomes`` is given, labels are attached and excluded pairs are
    dropped; tasks missing for an event are simply not labelled.
    """
    by_patient = index_outcomes(outcomes) if outcomes is not None else None
    rule = rule or LeakageRule()
    pairs = []
    for traj in dataset:
        for event in detect_events(traj, detector, dataset.feature_names):
            stop = next_discharge_time(traj, event) if window.end_at_discharge else None
            pair = extract_window_pair(
                traj, event, window.tau, window.min_len, window.censor_pre, window.censor_post, stop_time=stop
            )
            if not pair:
                continue
            if by_patient is not None:
                found = outcomes_for(event, by_patient.get(traj.patient_id, ()))
                found = {k: v for k, v in found.items() if k in rule.tasks}
                pair = attach_labels(pair, found, rule)
                if not pair:
                    continue
            pairs.append(pair)
    return pairs
