"""Vocabulary, triplet tokenization and the tabular aggregation featurizer.

Token id conventions: feature id ``0`` and categorical-value id ``0`` are
padding; categorical id ``1`` is the shared ``UNKNOWN`` bucket for rare
values.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError
from .events import KIND_CODE, EventDataset, PatientTrajectory, Rejected

PAD_ID = 0
UNKNOWN_ID = 1


def default_min_count(n_observations: int) -> int:
    """Rare-feature threshold for small corpora: ``max(5, 1e-5 * N_obs)``.

    A corpus the size of the original heart-failure cohort lands near 1000.
    """
    return max(5, int(n_observations * 1e-5))


@dataclass
class Vocabulary:
    """Feature and categorical-value codebook fitted on a training split.

    Entries are keyed by name so a serialized vocabulary can be rebound to
    any dataset codebook with :meth:`bind`.
    """

    features: list            # retained feature names; vocab id = position + 1
    kinds: list               # "continuous" | "categorical" per retained feature
    means: np.ndarray         # [n_features + 1], index 0 unused
    stds: np.ndarray
    feature_counts: list
    categories: list = field(default_factory=list)   # (feature name, value name) -> id = position + 2
    category_counts: list = field(default_factory=list)
    time_std: float = 1.0
    min_count: int = 1
    _tables: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_categories(self) -> int:
        """Size of the categorical lookup table incl. PAD and UNKNOWN."""
        return len(self.categories) + 2

    def feature_id(self, name: str) -> int:
        return self.features.index(name) + 1

    def category_id(self, feature: str, value: str) -> int:
        try:
            return self.categories.index((feature, value)) + 2
        except ValueError:
            return UNKNOWN_ID

    def bind(self, feature_names: Sequence[str], category_names: Sequence[str]) -> "Vocabulary":
        """Precompute raw-code lookup tables for a dataset codebook."""
        fmap = np.zeros(len(feature_names), dtype=np.int64)
        pos = {name: k + 1 for k, name in enumerate(self.features)}
        for raw, name in enumerate(feature_names):
            fmap[raw] = pos.get(name, PAD_ID)
        n_cat = max(len(category_names), 1)
        cat_pos = {c: k for k, c in enumerate(category_names)}
        keys, ids = [], []
        for k, (fname, vname) in enumerate(self.categories):
            if fname in feature_names and vname in cat_pos:
                keys.append(list(feature_names).index(fname) * n_cat + cat_pos[vname])
                ids.append(k + 2)
        order = np.argsort(keys)
        self._tables = (tuple(feature_names), n_cat, fmap, np.asarray(keys, np.int64)[order], np.asarray(ids, np.int64)[order])
        return self

    def codes(self, traj: PatientTrajectory):
        """Vocab feature ids and categorical ids for every observation
        (``0`` feature id means the observation is dropped)."""
        if self._tables is None:
            raise ConfigurationError("vocabulary is not bound to a dataset codebook; call bind()")
        _, n_cat, fmap, keys, ids = self._tables
        fid = fmap[traj.feature_ids]
        cat = np.zeros(len(traj), dtype=np.int64)
        is_cat = ~traj.is_continuous
        if is_cat.any():
            k = traj.feature_ids[is_cat] * n_cat + traj.values[is_cat].astype(np.int64)
            at = np.searchsorted(keys, k)
            at_c = np.minimum(at, max(len(keys) - 1, 0))
            hit = (at < len(keys)) & (keys[at_c] == k) if len(keys) else np.zeros(k.shape, bool)
            cat[is_cat] = np.where(hit, ids[at_c] if len(keys) else UNKNOWN_ID, UNKNOWN_ID)
        return fid, cat

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "min_count": self.min_count,
            "time_std": self.time_std,
            "features": [
                {"id": k + 1, "name": n, "kind": kind, "count": c, "mean": float(self.means[k + 1]), "std": float(self.stds[k + 1])}
                for k, (n, kind, c) in enumerate(zip(self.features, self.kinds, self.feature_counts))
            ],
            "categories": [
                {"id": k + 2, "feature": f, "value": v, "count": c}
                for k, ((f, v), c) in enumerate(zip(self.categories, self.category_counts))
            ],
            "reserved": {"PAD": PAD_ID, "UNKNOWN": UNKNOWN_ID},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        feats = sorted(doc["features"], key=lambda e: e["id"])
        if [e["id"] for e in feats] != list(range(1, len(feats) + 1)):
            raise ConfigurationError("vocabulary feature ids must be 1..n")
        cats = sorted(doc["categories"], key=lambda e: e["id"])
        if [e["id"] for e in cats] != list(range(2, len(cats) + 2)):
            raise ConfigurationError("vocabulary category ids must be 2..n+1")
        means = np.array([0.0] + [e["mean"] for e in feats])
        stds = np.array([1.0] + [e["std"] for e in feats])
        return cls(
            [e["name"] for e in feats],
            [e["kind"] for e in feats],
            means,
            stds,
            [e["count"] for e in feats],
            [(e["feature"], e["value"]) for e in cats],
            [e["count"] for e in cats],
            float(doc["time_std"]),
            int(doc["min_count"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.to_json() == other.to_json()


def build_vocabulary(train: EventDataset, min_count: int | None = None, pairs: Iterable | None = None) -> Vocabulary:
    """Fit a :class:`Vocabulary` on the training split.

    Features with fewer than ``min_count`` observations are dropped;
    categorical values below it map to ``UNKNOWN``. ``time_std`` is the
    standard deviation of event-relative times over all tokens of ``pairs``
    (training window pairs); without pairs it stays 1.
    """
    if len(train) == 0:
        raise ConfigurationError("cannot build a vocabulary from an empty dataset")
    if min_count is None:
        min_count = default_min_count(train.n_observations)
    f_counts: Counter = Counter()
    cont_counts: Counter = Counter()
    c_counts: Counter = Counter()
    sums: dict = {}
    for traj in train:
        fids = traj.feature_ids
        f_counts.update(fids.tolist())
        cont = traj.is_continuous
        cont_counts.update(fids[cont].tolist())
        for f, v in zip(fids[~cont].tolist(), traj.values[~cont].astype(np.int64).tolist()):
            c_counts[(f, v)] += 1
        for f in np.unique(fids[cont]):
            vals = traj.values[cont & (fids == f)]
            s = sums.setdefault(int(f), [0, 0.0, 0.0])
            s[0] += vals.size
            s[1] += vals.sum()
            s[2] += np.square(vals).sum()
    names = train.feature_names
    keep = sorted((names[f], f) for f, c in f_counts.items() if c >= min_count)
    if not keep:
        raise ConfigurationError(f"every feature has fewer than min_count={min_count} observations")
    features, kinds, counts = [], [], []
    means, stds = [0.0], [1.0]
    for name, f in keep:
        features.append(name)
        counts.append(f_counts[f])
        continuous = cont_counts[f] * 2 >= f_counts[f]
        kinds.append("continuous" if continuous else "categorical")
        n, s1, s2 = sums.get(f, (0, 0.0, 0.0))
        mean = s1 / n if n else 0.0
        var = max(s2 / n - mean * mean, 0.0) if n else 0.0
        std = math.sqrt(var)
        # float noise on a constant feature leaves var ~ 1e-16 * mean^2
        if std <= 1e-9 * max(1.0, abs(mean)):
            std = 1.0
        means.append(mean)
        stds.append(std)
    kept = {f for _, f in keep}
    cat_names = train.category_names
    categories, cat_counts = [], []
    for (f, v), c in sorted(c_counts.items(), key=lambda kv: (names[kv[0][0]], cat_names[kv[0][1]])):
        if f in kept and c >= min_count:
            categories.append((names[f], cat_names[v]))
            cat_counts.append(c)
    vocab = Vocabulary(features, kinds, np.array(means), np.array(stds), counts, categories, cat_counts, 1.0, int(min_count))
    vocab.bind(train.feature_names, train.category_names)
    if pairs is not None:
        rel = []
        for p in pairs:
            for side in (p.pre, p.post):
                fid, _ = vocab.codes(side)
                rel.append(side.times[fid != PAD_ID] - p.event.time)
        rel = np.concatenate(rel) if rel else np.zeros(0)
        sd = float(rel.std()) if rel.size > 1 else 0.0
        vocab.time_std = sd if sd > 0 else 1.0
    return vocab


# ---------------------------------------------------------------------------
# token batches


@dataclass
class TokenBatch:
    """Padded token tensors, all shaped ``[B, S]``; ``mask`` is true on real
    tokens."""

    times: np.ndarray
    feature_ids: np.ndarray
    cont_values: np.ndarray
    cat_value_ids: np.ndarray
    is_cont: np.ndarray
    mask: np.ndarray

    FIELDS = ("times", "feature_ids", "cont_values", "cat_value_ids", "is_cont", "mask")

    def __len__(self):
        return self.mask.shape[0]

    @property
    def seq_len(self) -> int:
        return self.mask.shape[1]

    def __getitem__(self, idx) -> "TokenBatch":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return TokenBatch(*(getattr(self, f)[idx] for f in self.FIELDS))

    @classmethod
    def empty(cls, batch: int, seq_len: int) -> "TokenBatch":
        return cls(
            np.zeros((batch, seq_len)),
            np.zeros((batch, seq_len), np.int64),
            np.zeros((batch, seq_len)),
            np.zeros((batch, seq_len), np.int64),
            np.zeros((batch, seq_len), bool),
            np.zeros((batch, seq_len), bool),
        )

    @classmethod
    def concat(cls, batches: Sequence["TokenBatch"]) -> "TokenBatch":
        seq = max(b.seq_len for b in batches)
        batches = [b.pad_to(seq) for b in batches]
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in cls.FIELDS))

    def pad_to(self, seq_len: int) -> "TokenBatch":
        extra = seq_len - self.seq_len
        if extra < 0:
            raise ValueError(f"cannot pad {self.seq_len} columns down to {seq_len}")
        if extra == 0:
            return self
        return TokenBatch(*(np.pad(getattr(self, f), ((0, 0), (0, extra))) for f in self.FIELDS))

    def trim(self) -> "TokenBatch":
        """Drop trailing columns that are padding in every row."""
        used = np.flatnonzero(self.mask.any(axis=0))
        width = int(used[-1]) + 1 if used.size else 1
        return TokenBatch(*(getattr(self, f)[:, :width] for f in self.FIELDS))


def encode_window(
    window: PatientTrajectory,
    event_time: float,
    vocab: Vocabulary,
    max_len: int = 512,
    min_len: int = 16,
    *,
    pad: bool = True,
):
    """Tokenize one window into a single-row :class:`TokenBatch`.

    Observations of dropped features are removed; if more than ``max_len``
    remain, those nearest ``event_time`` are kept (in time order). Times
    become ``(t - event_time) / time_std``; continuous values are z-scored.

    Returns :class:`Rejected` if fewer than ``min_len`` tokens survive.
    """
    fid, cat = vocab.codes(window)
    keep = np.flatnonzero(fid != PAD_ID)
    if keep.size > max_len:
        dist = np.abs(window.times[keep] - event_time)
        keep = np.sort(keep[np.argsort(dist, kind="stable")[:max_len]])
    if keep.size < min_len:
        return Rejected(f"{keep.size} tokens after vocabulary filtering, need {min_len}")
    width = max_len if pad else keep.size
    out = TokenBatch.empty(1, width)
    n = keep.size
    f = fid[keep]
    cont = window.is_continuous[keep]
    out.times[0, :n] = (window.times[keep] - event_time) / vocab.time_std
    out.feature_ids[0, :n] = f
    out.cont_values[0, :n] = np.where(cont, (window.values[keep] - vocab.means[f]) / vocab.stds[f], 0.0)
    out.cat_value_ids[0, :n] = np.where(cont, PAD_ID, cat[keep])
    out.is_cont[0, :n] = cont
    out.mask[0, :n] = True
    return out


def encode_times(times: np.ndarray, anchor: float, vocab: Vocabulary) -> np.ndarray:
    return (np.asarray(times) - anchor) / vocab.time_std


def encode_sequence(window: PatientTrajectory, rel_times: np.ndarray, vocab: Vocabulary, max_len: int) -> TokenBatch:
    """Tokenize ``window`` with caller-supplied (already scaled) times.

    Used by objectives that build their own time axis; dropped features are
    removed and at most the last ``max_len`` kept.
    """
    fid, cat = vocab.codes(window)
    keep = np.flatnonzero(fid != PAD_ID)[-max_len:]
    out = TokenBatch.empty(1, max_len)
    n = keep.size
    f = fid[keep]
    cont = window.is_continuous[keep]
    out.times[0, :n] = np.asarray(rel_times)[keep]
    out.feature_ids[0, :n] = f
    out.cont_values[0, :n] = np.where(cont, (window.values[keep] - vocab.means[f]) / vocab.stds[f], 0.0)
    out.cat_value_ids[0, :n] = np.where(cont, PAD_ID, cat[keep])
    out.is_cont[0, :n] = cont
    out.mask[0, :n] = True
    return out


@dataclass
class EncodedPairs:
    """Tokenized window pairs with their identities and labels."""

    pre: TokenBatch
    post: TokenBatch
    patient_ids: np.ndarray
    event_times: np.ndarray
    labels: dict          # task -> float array, NaN where unlabelled

    def __len__(self):
        return len(self.pre)

    def subset(self, idx) -> "EncodedPairs":
        idx = np.asarray(idx)
        return EncodedPairs(
            self.pre[idx], self.post[idx], self.patient_ids[idx], self.event_times[idx],
            {k: v[idx] for k, v in self.labels.items()},
        )

    def labelled(self, task: str) -> "EncodedPairs":
        if task not in self.labels:
            raise ConfigurationError(f"no labels for task {task!r}")
        return self.subset(np.flatnonzero(~np.isnan(self.labels[task])))


def encode_pairs(pairs: Sequence, vocab: Vocabulary, max_len: int = 512, min_len: int = 16) -> EncodedPairs:
    """Tokenize window pairs; pairs that fail :func:`encode_window` on either
    side are skipped."""
    pre, post, pids, times, kept = [], [], [], [], []
    for p in pairs:
        a = encode_window(p.pre, p.event.time, vocab, max_len, min_len)
        b = encode_window(p.post, p.event.time, vocab, max_len, min_len)
        if not a or not b:
            continue
        pre.append(a)
        post.append(b)
        pids.append(p.event.patient_id)
        times.append(p.event.time)
        kept.append(p)
    if not kept:
        raise ConfigurationError("no window pair survived tokenization")
    tasks = sorted({t for p in kept for t in p.labels})
    labels = {t: np.array([p.labels.get(t, np.nan) for p in kept], dtype=float) for t in tasks}
    return EncodedPairs(TokenBatch.concat(pre), TokenBatch.concat(post), np.array(pids), np.array(times), labels)


# ---------------------------------------------------------------------------
# tabular aggregation featurizer

DEFAULT_WINDOWS = (1.0, 7.0, 30.0, 365.0, math.inf)
DEFAULT_AGGS = ("mean", "count", "min", "max")


def top_features(dataset: EventDataset, top_k: int = 128, exclude_encounters: bool = True) -> list:
    """Raw feature codes of the ``top_k`` most frequent features (ties by code)."""
    counts: Counter = Counter()
    for traj in dataset:
        ids = traj.feature_ids[traj.kinds == KIND_CODE["obs"]] if exclude_encounters else traj.feature_ids
        counts.update(ids.tolist())
    return [f for f, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]]


def aggregate_tabular(
    trajectory: PatientTrajectory,
    cutoff_time: float,
    features: Sequence[int],
    windows: Sequence[float] = DEFAULT_WINDOWS,
    aggs: Sequence[str] = DEFAULT_AGGS,
    top_k: int = 128,
) -> np.ndarray:
    """Fixed-length summary vector for a gradient-boosted tree learner.

    For each window ``(cutoff - w, cutoff]`` and each aggregate, one block of
    ``top_k + 1`` cells: the ``top_k`` features (slots beyond ``len(features)``
    stay empty) followed by the observation-time pseudo-feature, whose values
    are ``t - cutoff`` over every retained observation. Empty cells hold NaN
    except counts, which are 0. Categorical features contribute counts only.
    Values are raw, not z-scored.
    """
    features = list(features)[:top_k]
    unknown = set(aggs) - set(DEFAULT_AGGS)
    if unknown:
        raise ConfigurationError(f"unknown aggregates {sorted(unknown)}")
    width = top_k + 1
    out = np.full((len(windows), len(aggs), width), np.nan)
    slot = {f: k for k, f in enumerate(features)}
    t = trajectory.times
    before = t <= cutoff_time
    retained = before & np.isin(trajectory.feature_ids, features)
    for wi, w in enumerate(windows):
        in_win = retained & (t > cutoff_time - w) if math.isfinite(w) else retained
        groups = [(slot[f], in_win & (trajectory.feature_ids == f), True) for f in features]
        groups.append((top_k, in_win, False))
        for k, sel, is_feature in groups:
            n = int(sel.sum())
            if is_feature:
                vals = trajectory.values[sel & trajectory.is_continuous]
            else:
                vals = t[sel] - cutoff_time
            for ai, agg in enumerate(aggs):
                if agg == "count":
                    out[wi, ai, k] = n
                elif vals.size:
                    out[wi, ai, k] = {"mean": np.mean, "min": np.min, "max": np.max}[agg](vals)
        # empty feature slots still report a zero count
        for ai, agg in enumerate(aggs):
            if agg == "count":
                out[wi, ai, len(features):top_k] = 0
    return out.reshape(-1)


class TabularBaseline:
    """Aggregation featurizer plus a pluggable tree learner.

    ``learner`` is any object with ``fit(X, y)`` and ``predict_proba(X)``
    that accepts NaN as missing (XGBoost's ``XGBClassifier`` or
    scikit-learn's ``HistGradientBoostingClassifier``). When omitted, the
    scikit-learn learner is used.
    """

    def __init__(self, features: Sequence[int], learner=None, top_k: int = 128):
        self.features = list(features)
        self.top_k = top_k
        if learner is None:
            from sklearn.ensemble import HistGradientBoostingClassifier

            learner = HistGradientBoostingClassifier(random_state=0)
        self.learner = learner

    def transform(self, items: Iterable) -> np.ndarray:
        """``items`` yields ``(trajectory, cutoff_time)`` tuples."""
        return np.stack([aggregate_tabular(tr, cut, self.features, top_k=self.top_k) for tr, cut in items])

    def fit(self, items, labels):
        self.learner.fit(self.transform(items), np.asarray(labels))
        return self

    def predict_proba(self, items) -> np.ndarray:
        return self.learner.predict_proba(self.transform(items))[:, 1]
