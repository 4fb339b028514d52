"""Glue from a raw cohort to tokenized, split window pairs."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import (
    DetectorConfig,
    EventDataset,
    LeakageRule,
    SplitSpec,
    WindowParams,
    build_pairs,
    split_by_patient,
)
from .featurize import EncodedPairs, TokenBatch, Vocabulary, build_vocabulary, encode_pairs
from .training import PretrainData

SPLITS = ("train", "val", "test")


@dataclass
class PreparedCohort:
    splits: dict        # name -> EventDataset
    pairs: dict         # name -> list of WindowPair
    vocab: Vocabulary
    encoded: dict       # name -> EncodedPairs
    window: WindowParams

    def pretrain_data(self) -> PretrainData:
        return PretrainData(
            self.vocab,
            self.encoded["train"],
            self.encoded["val"],
            list(self.splits["train"]),
            list(self.splits["val"]),
        )


def prepare_cohort(
    dataset: EventDataset,
    outcomes=None,
    *,
    detector: DetectorConfig = DetectorConfig(),
    window: WindowParams = WindowParams(),
    split: SplitSpec = SplitSpec(),
    min_count: int | None = None,
    rule: LeakageRule | None = None,
    splits: dict | None = None,
) -> PreparedCohort:
    """Split by patient, extract and label window pairs, fit the vocabulary
    on the training split only and tokenize every split.

    Pass ``splits`` (name -> list of patient ids) to reuse an existing
    partition instead of drawing one.
    """
    if splits is None:
        parts = dict(zip(SPLITS, split_by_patient(dataset, split)))
    else:
        parts = {name: dataset.subset(ids) for name, ids in splits.items()}
    pairs = {name: build_pairs(part, detector, window, outcomes, rule) for name, part in parts.items()}
    vocab = build_vocabulary(parts["train"], min_count, pairs["train"])
    encoded = {name: encode_pairs(p, vocab, window.tau, window.min_len) for name, p in pairs.items()}
    return PreparedCohort(parts, pairs, vocab, encoded, window)


def save_encoded(pairs: EncodedPairs, path) -> None:
    """Store tokenized pairs as one ``.npz`` archive."""
    arrays = {f"{side}__{f}": getattr(getattr(pairs, side), f) for side in ("pre", "post") for f in TokenBatch.FIELDS}
    arrays["patient_ids"] = pairs.patient_ids.astype(str)
    arrays["event_times"] = pairs.event_times
    arrays.update({f"label__{k}": v for k, v in pairs.labels.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_encoded(path) -> EncodedPairs:
    with np.load(Path(path)) as z:
        pre = TokenBatch(*(z[f"pre__{f}"] for f in TokenBatch.FIELDS))
        post = TokenBatch(*(z[f"post__{f}"] for f in TokenBatch.FIELDS))
        labels = {k.split("__", 1)[1]: z[k] for k in z.files if k.startswith("label__")}
        return EncodedPairs(pre, post, z["patient_ids"], z["event_times"], labels)
