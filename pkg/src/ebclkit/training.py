"""Pretraining and finetuning loops, successive-halving hyperparameter search,
early stopping and checkpoint files."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import EncoderConfig, EventEncoder, init_weights
from .errors import CheckpointError, ConfigurationError, TrainingError
from .evaluation import binary_metrics
from .events import PatientTrajectory
from .featurize import EncodedPairs, TokenBatch, Vocabulary
from .objectives import (
    OBJECTIVES,
    DuettModel,
    build_pretrain_model,
    collate_targets,
    duett_example_from_tokens,
    iter_ebcl_batches,
    ocp_make_example,
    strats_make_example,
)

log = logging.getLogger(__name__)

INPUT_MODES = ("both", "pre", "post")
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class RunConfig:
    """One training run. ``name`` is the objective for pretraining or the
    task for finetuning."""

    name: str = "ebcl"
    learning_rate: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 64
    max_epochs: int = 300
    early_stop_tolerance: int | None = None
    seed: int = 0
    init_checkpoint: str | None = None
    weight_decay: float = 0.0
    # objective-specific knobs
    ocp_max_len: int = 512
    strats_window_days: float = 6.0
    duett_mask_rate: float = 0.15
    duett_bins: int = 32
    freeze_temperature: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0.0 <= self.dropout <= 0.6:
            raise ConfigurationError(f"dropout {self.dropout} outside [0, 0.6]")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")

    @property
    def tolerance(self) -> int:
        if self.early_stop_tolerance is not None:
            return self.early_stop_tolerance
        return 10 if self.name in ("ocp", "duett") else 3

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigurationError(f"unknown run-config fields: {sorted(set(d) - known)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Tracks the best epoch; ``update`` returns True once ``tolerance``
    epochs pass without improvement."""

    def __init__(self, tolerance: int, mode: str = "min"):
        self.tolerance = tolerance
        self.sign = 1.0 if mode == "min" else -1.0
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        score = self.sign * value
        if score < self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.tolerance

    @property
    def best_value(self) -> float:
        return self.sign * self.best


@dataclass
class PretrainData:
    vocab: Vocabulary
    train_pairs: EncodedPairs
    val_pairs: EncodedPairs
    train_trajectories: Sequence[PatientTrajectory] = ()
    val_trajectories: Sequence[PatientTrajectory] = ()


@dataclass
class TrainResult:
    model: nn.Module
    trace: list               # per-epoch dicts: epoch, train_loss, val
    best_epoch: int
    best_val: float

    @property
    def epochs_run(self) -> int:
        return len(self.trace)


def _chunks(items, size):
    for k in range(0, len(items), size):
        yield items[k:k + size]


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# per-objective batch construction


def _ebcl_batches(pairs: EncodedPairs, batch_size: int, rng) -> list:
    n_patients = np.unique(pairs.patient_ids).size
    size = min(batch_size, n_patients)
    return [(pairs.pre[idx].trim(), pairs.post[idx].trim()) for idx in iter_ebcl_batches(pairs.patient_ids, size, rng)]


def _ocp_batches(trajs, vocab, run: RunConfig, rng, shuffle=True) -> list:
    examples = [ocp_make_example(t, rng, vocab, run.ocp_max_len) for t in trajs]
    examples = [e for e in examples if e]
    if shuffle:
        examples = [examples[k] for k in rng.permutation(len(examples))]
    return [(TokenBatch.concat([e.tokens for e in chunk]).trim(), np.array([e.label for e in chunk], float))
            for chunk in _chunks(examples, run.batch_size)]


def _strats_batches(trajs, vocab, run: RunConfig, rng, shuffle=True) -> list:
    examples = [strats_make_example(t, run.strats_window_days, rng, vocab, run.ocp_max_len) for t in trajs]
    examples = [e for e in examples if e]
    if shuffle:
        examples = [examples[k] for k in rng.permutation(len(examples))]
    out = []
    for chunk in _chunks(examples, run.batch_size):
        target, mask = collate_targets(chunk, vocab.n_features)
        out.append((TokenBatch.concat([e.tokens for e in chunk]).trim(), target, mask))
    return out


def _duett_batches(pairs: EncodedPairs, features, run: RunConfig, rng, shuffle=True) -> list:
    order = rng.permutation(len(pairs)) if shuffle else np.arange(len(pairs))
    examples = [duett_example_from_tokens([(pairs.pre, i), (pairs.post, i)], features, run.duett_bins, run.duett_mask_rate, rng)
                for i in order]
    examples = [e for e in examples if e]
    return list(_chunks(examples, run.batch_size))


def make_batches(objective: str, model, data: PretrainData, run: RunConfig, rng, split: str) -> list:
    train = split == "train"
    pairs = data.train_pairs if train else data.val_pairs
    trajs = data.train_trajectories if train else data.val_trajectories
    if objective == "ebcl":
        return _ebcl_batches(pairs, run.batch_size, rng)
    if objective == "ocp":
        return _ocp_batches(trajs, data.vocab, run, rng, shuffle=train)
    if objective == "strats":
        return _strats_batches(trajs, data.vocab, run, rng, shuffle=train)
    return _duett_batches(pairs, np.asarray(model.feature_list), run, rng, shuffle=train)


# ---------------------------------------------------------------------------
# pretraining


def pretrain_epochs(run: RunConfig, data: PretrainData, encoder_config: EncoderConfig | None = None,
                    model: nn.Module | None = None) -> Iterator[dict]:
    """Generator over pretraining epochs.

    Yields ``{"epoch", "train_loss", "val_loss", "model"}`` after each epoch;
    the caller decides when to stop. Raises :class:`TrainingError` on a
    non-finite loss.
    """
    objective = run.name
    if objective not in OBJECTIVES:
        raise ConfigurationError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    encoder_config = replace(encoder_config or EncoderConfig(), dropout=run.dropout)
    _seed_everything(run.seed)
    rng = np.random.default_rng(run.seed)
    if model is None:
        model = build_pretrain_model(objective, data.vocab, encoder_config, freeze_temperature=run.freeze_temperature)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=run.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8, weight_decay=run.weight_decay)
    val_batches = make_batches(objective, model, data, run, np.random.default_rng(run.seed + 7919), "val")
    if not val_batches:
        raise ConfigurationError("validation split produced no batches")
    for epoch in range(1, run.max_epochs + 1):
        model.train()
        losses = []
        for batch in make_batches(objective, model, data, run, rng, "train"):
            opt.zero_grad()
            loss = model.loss(batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"{objective}: non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = evaluate_loss(model, val_batches)
        if not math.isfinite(val):
            raise TrainingError(f"{objective}: non-finite validation loss at epoch {epoch}")
        yield {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else math.nan, "val_loss": val, "model": model}


@torch.no_grad()
def evaluate_loss(model, batches) -> float:
    model.eval()
    total = [float(model.loss(b)) for b in batches]
    return float(np.mean(total))


def run_with_early_stopping(epochs: Iterator[dict], tolerance: int, key: str = "val_loss", mode: str = "min") -> TrainResult:
    """Drive an epoch generator, keeping the parameters of the best epoch."""
    stopper = EarlyStopping(tolerance, mode)
    best_state, model, trace = None, None, []
    for rec in epochs:
        model = rec["model"]
        trace.append({k: v for k, v in rec.items() if k != "model"})
        stop = stopper.update(rec["epoch"], rec[key])
        if stopper.best_epoch == rec["epoch"]:
            best_state = copy.deepcopy(model.state_dict())
        log.info("epoch %d %s=%.5f", rec["epoch"], key, rec[key])
        if stop:
            break
    if model is None:
        raise TrainingError("no epochs were run")
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, trace, stopper.best_epoch, stopper.best_value)


def pretrain(run: RunConfig, data: PretrainData, encoder_config: EncoderConfig | None = None) -> TrainResult:
    """Pretrain with early stopping on validation loss; returns the model
    restored to its best-validation epoch."""
    return run_with_early_stopping(pretrain_epochs(run, data, encoder_config), run.tolerance)


# ---------------------------------------------------------------------------
# finetuning


class FinetuneModel(nn.Module):
    """Backbone plus a one-hidden-layer head over the pre and/or post
    embeddings. In ``"pre"`` mode the post window is never encoded."""

    def __init__(self, backbone: nn.Module, d_embed: int, mode: str = "both", dropout: float = 0.1):
        super().__init__()
        if mode not in INPUT_MODES:
            raise ConfigurationError(f"input mode must be one of {INPUT_MODES}")
        self.backbone = backbone
        self.mode = mode
        width = 2 * d_embed if mode == "both" else d_embed
        self.head = nn.Sequential(nn.Linear(width, d_embed), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_embed, 1))
        init_weights(self.head)

    def _embed(self, tokens):
        if isinstance(self.backbone, EventEncoder):
            return self.backbone(tokens)
        return self.backbone.embed(tokens)

    def forward(self, pre: TokenBatch | None, post: TokenBatch | None) -> torch.Tensor:
        parts = []
        if self.mode in ("both", "pre"):
            parts.append(self._embed(pre))
        if self.mode in ("both", "post"):
            parts.append(self._embed(post))
        return self.head(torch.cat(parts, dim=-1)).squeeze(-1)


def backbone_dim(backbone: nn.Module) -> int:
    if isinstance(backbone, DuettModel):
        return backbone.d_model
    return backbone.config.d_embed


def extract_backbone(model: nn.Module) -> nn.Module:
    """The shared encoder of a pretraining model (the whole model for DuETT)."""
    return model if isinstance(model, DuettModel) else model.encoder


@torch.no_grad()
def predict(model: FinetuneModel, pairs: EncodedPairs, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for k in range(0, len(pairs), batch_size):
        idx = np.arange(k, min(k + batch_size, len(pairs)))
        pre = pairs.pre[idx].trim() if model.mode != "post" else None
        post = pairs.post[idx].trim() if model.mode != "pre" else None
        out.append(torch.sigmoid(model(pre, post)).double().numpy())
    return np.concatenate(out)


@dataclass
class FinetuneResult(TrainResult):
    test_scores: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    test_metrics: dict = field(default_factory=dict)


def finetune_epochs(run: RunConfig, task: str, train: EncodedPairs, val: EncodedPairs, backbone: nn.Module,
                    mode: str = "both") -> Iterator[dict]:
    """Generator over finetuning epochs yielding validation AUROC."""
    train, val = train.labelled(task), val.labelled(task)
    y_train, y_val = train.labels[task], val.labels[task]
    if np.unique(y_train).size < 2:
        raise ConfigurationError(f"task {task!r}: training labels contain a single class")
    if np.unique(y_val).size < 2:
        raise ConfigurationError(f"task {task!r}: validation labels contain a single class")
    _seed_everything(run.seed)
    rng = np.random.default_rng(run.seed)
    backbone = copy.deepcopy(backbone)
    for m in backbone.modules():
        if isinstance(m, nn.Dropout):
            m.p = run.dropout
    model = FinetuneModel(backbone, backbone_dim(backbone), mode, run.dropout)
    opt = torch.optim.Adam(model.parameters(), lr=run.learning_rate, betas=(0.9, 0.999), eps=1e-8,
                           weight_decay=run.weight_decay)
    for epoch in range(1, run.max_epochs + 1):
        model.train()
        losses = []
        for idx in _chunks(rng.permutation(len(train)), run.batch_size):
            pre = train.pre[idx].trim() if mode != "post" else None
            post = train.post[idx].trim() if mode != "pre" else None
            logits = model(pre, post)
            target = torch.as_tensor(y_train[idx], dtype=logits.dtype)
            loss = nn.functional.binary_cross_entropy_with_logits(logits, target)
            if not torch.isfinite(loss):
                raise TrainingError(f"{task}: non-finite finetuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        auroc, _ = binary_metrics(predict(model, val), y_val)
        yield {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auroc": auroc, "model": model}


def finetune(run: RunConfig, task: str, train: EncodedPairs, val: EncodedPairs, test: EncodedPairs | None,
             backbone: nn.Module, mode: str = "both") -> FinetuneResult:
    """Finetune ``backbone`` (unfrozen) on ``task``; the epoch with the best
    validation AUROC is kept and scored on ``test``."""
    res = run_with_early_stopping(finetune_epochs(run, task, train, val, backbone, mode), run.tolerance,
                                  key="val_auroc", mode="max")
    out = FinetuneResult(res.model, res.trace, res.best_epoch, res.best_val)
    if test is not None:
        test = test.labelled(task)
        out.test_scores = predict(res.model, test)
        out.test_labels = test.labels[task]
        auroc, auprc = binary_metrics(out.test_scores, out.test_labels)
        out.test_metrics = {"auroc": auroc, "auprc": auprc}
    return out


def random_backbone(vocab: Vocabulary, config: EncoderConfig, seed: int) -> EventEncoder:
    """Randomly initialised encoder (the supervised-from-scratch baseline)."""
    _seed_everything(seed)
    return EventEncoder(config, vocab.n_features, vocab.n_categories)


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass(frozen=True)
class SearchSpec:
    n_trials: int = 16
    lr_range: tuple = (1e-6, 1e-2)
    dropout_range: tuple = (0.0, 0.6)
    grace_period: int = 4
    reduction_factor: int = 2
    max_epochs: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigurationError("n_trials must be >= 1")
        if self.reduction_factor < 2 or self.grace_period < 1:
            raise ConfigurationError("need reduction_factor >= 2 and grace_period >= 1")


def sample_trials(spec: SearchSpec) -> list:
    """``(learning_rate, dropout)`` per trial: log-uniform and uniform draws."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = np.log(spec.lr_range[0]), np.log(spec.lr_range[1])
    lrs = np.exp(rng.uniform(lo, hi, spec.n_trials))
    drops = rng.uniform(*spec.dropout_range, spec.n_trials)
    return [(float(np.clip(lr, *spec.lr_range)), float(d)) for lr, d in zip(lrs, drops)]


def rung_epochs(spec: SearchSpec) -> list:
    rungs, e = [], spec.grace_period
    while e < spec.max_epochs:
        rungs.append(e)
        e *= spec.reduction_factor
    return rungs


@dataclass
class _Trial:
    trial_id: int
    lr: float
    dropout: float
    epochs: Iterator[float]
    trace: list = field(default_factory=list)
    done: bool = False
    promoted: list = field(default_factory=list)

    def advance(self, until: int) -> None:
        while not self.done and len(self.trace) < until:
            try:
                value = float(next(self.epochs))
            except StopIteration:
                self.done = True
                return
            except (TrainingError, FloatingPointError):
                value = math.inf
            if not math.isfinite(value):
                self.trace.append(math.inf)
                self.done = True
                return
            self.trace.append(value)

    @property
    def current(self) -> float:
        return self.trace[-1] if self.trace else math.inf

    @property
    def best(self) -> float:
        return min(self.trace) if self.trace else math.inf


@dataclass
class SearchResult:
    best: dict
    table: list
    rung_populations: list

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["trial_id", "lr", "dropout", "epochs_run", "best_val", "promoted_rungs"])
        w.writeheader()
        for row in self.table:
            w.writerow({**row, "promoted_rungs": ";".join(str(r) for r in row["promoted_rungs"])})
        return buf.getvalue()


def hyperparameter_search(spec: SearchSpec, runner: Callable) -> SearchResult:
    """Synchronous successive halving.

    ``runner(trial_id, lr, dropout)`` returns an iterator of per-epoch
    validation losses (lower is better; stop iterating to end a trial early).
    All trials run to ``grace_period`` epochs; at each rung
    ``grace_period * r**k`` the best ``1/r`` (by the loss at that epoch)
    continue. Survivors then run to ``max_epochs`` and the trial with the
    lowest validation loss wins.
    """
    trials = [_Trial(k, lr, d, iter(runner(k, lr, d))) for k, (lr, d) in enumerate(sample_trials(spec))]
    alive = list(trials)
    populations = []
    for rung in rung_epochs(spec):
        populations.append((rung, len(alive)))
        if len(alive) == 1:
            break
        for t in alive:
            t.advance(rung)
        ranked = sorted(alive, key=lambda t: (t.current, t.trial_id))
        keep = max(1, len(alive) // spec.reduction_factor)
        alive = ranked[:keep]
        for t in alive:
            t.promoted.append(rung)
    for t in alive:
        t.advance(spec.max_epochs)
    winner = min(alive, key=lambda t: (t.best, t.trial_id))
    if not math.isfinite(winner.best):
        raise TrainingError("every trial diverged")
    table = [
        {"trial_id": t.trial_id, "lr": t.lr, "dropout": t.dropout, "epochs_run": len(t.trace),
         "best_val": t.best, "promoted_rungs": list(t.promoted)}
        for t in trials
    ]
    return SearchResult({"trial_id": winner.trial_id, "learning_rate": winner.lr, "dropout": winner.dropout,
                         "best_val": winner.best}, table, populations)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    vocabulary: Vocabulary | None
    tensors: dict
    provenance: dict


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: nn.Module, config: dict, vocabulary: Vocabulary | None, provenance: dict) -> Path:
    """Write a zip archive with ``config.json``, ``vocabulary.json``,
    ``tensors.bin`` (little-endian float32, concatenated), ``manifest.json``
    (name -> dtype, shape, byte offset) and ``provenance.json``."""
    path = Path(path)
    manifest, blobs, offset = {}, [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        manifest[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    members = [("config.json", json.dumps(config, indent=1, sort_keys=True))]
    if vocabulary is not None:
        members.append(("vocabulary.json", vocabulary.dumps()))
    members += [("manifest.json", json.dumps(manifest, indent=1)), ("tensors.bin", b"".join(blobs)),
                ("provenance.json", json.dumps(provenance, indent=1, sort_keys=True))]
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in members:
            # fixed entry timestamps keep the archive byte-reproducible
            info = zipfile.ZipInfo(name, date_time=ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    _atomic_write_bytes(path, buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
        missing = {"config.json", "manifest.json", "tensors.bin", "provenance.json"} - names
        if missing:
            raise CheckpointError(f"{path}: archive lacks {sorted(missing)}")
        config = json.loads(zf.read("config.json"))
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("tensors.bin")
        vocab = Vocabulary.from_json(json.loads(zf.read("vocabulary.json"))) if "vocabulary.json" in names else None
        provenance = json.loads(zf.read("provenance.json"))
    tensors = {}
    for name, entry in manifest.items():
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return Checkpoint(config, vocab, tensors, provenance)


def load_into(model: nn.Module, ckpt: Checkpoint) -> nn.Module:
    """Copy checkpoint tensors into ``model``, checking names and shapes."""
    state = model.state_dict()
    missing = sorted(set(state) - set(ckpt.tensors))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {missing}")
    unexpected = sorted(set(ckpt.tensors) - set(state))
    if unexpected:
        raise CheckpointError(f"checkpoint has unexpected tensors: {unexpected}")
    for name, target in state.items():
        src = ckpt.tensors[name]
        if tuple(src.shape) != tuple(target.shape):
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {tuple(src.shape)} != model shape {tuple(target.shape)}")
    model.load_state_dict({k: torch.as_tensor(v, dtype=state[k].dtype) for k, v in ckpt.tensors.items()})
    return model


def model_config(objective: str, encoder_config: EncoderConfig, model: nn.Module) -> dict:
    cfg = {"objective": objective, "encoder": encoder_config.to_dict()}
    if isinstance(model, DuettModel):
        cfg["duett_features"] = model.feature_list
        cfg["duett_bins"] = model.n_bins
    return cfg


def restore_pretrained(path) -> tuple:
    """Rebuild a pretraining model from a checkpoint; returns ``(model, ckpt)``."""
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    if ckpt.vocabulary is None:
        raise CheckpointError(f"{path}: no vocabulary in checkpoint")
    enc = EncoderConfig.from_dict(cfg["encoder"])
    feats = np.asarray(cfg["duett_features"]) if "duett_features" in cfg else None
    model = build_pretrain_model(cfg["objective"], ckpt.vocabulary, enc, features=feats)
    load_into(model, ckpt)
    model.eval()
    return model, ckpt
