"""Pretraining example construction and losses: EBCL, OCP, STraTS-style
forecasting and simplified DuETT masked imputation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoder import ContrastiveHeads, EncoderConfig, EventEncoder, init_weights
from .errors import ConfigurationError
from .events import PatientTrajectory, Rejected, WindowPair
from .featurize import PAD_ID, EncodedPairs, TokenBatch, Vocabulary, encode_sequence, encode_window

OBJECTIVES = ("ebcl", "ocp", "strats", "duett")


# ---------------------------------------------------------------------------
# EBCL


def sample_ebcl_batch(patient_ids: Sequence, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``batch_size`` pairs from distinct patients.

    Every patient is equally likely to be picked; one of their pairs is then
    drawn uniformly.
    """
    patient_ids = np.asarray(patient_ids)
    uniq, inverse = np.unique(patient_ids, return_inverse=True)
    if uniq.size < batch_size:
        raise ConfigurationError(f"batch of {batch_size} needs {batch_size} distinct patients, have {uniq.size}")
    chosen = rng.choice(uniq.size, size=batch_size, replace=False)
    out = []
    for p in chosen:
        rows = np.flatnonzero(inverse == p)
        out.append(rows[rng.integers(rows.size)])
    return np.asarray(out)


def iter_ebcl_batches(patient_ids: Sequence, batch_size: int, rng: np.random.Generator, drop_last: bool = True) -> Iterator[np.ndarray]:
    """One epoch of index batches: every pair at most once, no patient twice
    within a batch. Pairs that cannot fill a full batch of distinct patients
    at the end of the epoch are dropped when ``drop_last``."""
    patient_ids = np.asarray(patient_ids)
    if np.unique(patient_ids).size < batch_size:
        raise ConfigurationError(f"batch of {batch_size} needs {batch_size} distinct patients")
    pending = list(rng.permutation(len(patient_ids)))
    while pending:
        batch, seen, leftover = [], set(), []
        for idx in pending:
            pid = patient_ids[idx]
            if len(batch) < batch_size and pid not in seen:
                batch.append(idx)
                seen.add(pid)
            else:
                leftover.append(idx)
        if len(batch) < batch_size and drop_last:
            return
        yield np.asarray(batch)
        pending = leftover


def ebcl_clip_loss(pre_emb: torch.Tensor, post_emb: torch.Tensor, log_temp) -> torch.Tensor:
    """Symmetric CLIP loss over a batch of matched unit-norm embeddings.

    ``logits = pre @ post.T * exp(log_temp)``; the loss averages the
    cross-entropies of matching each pre row to its post row and each post
    row to its pre row.
    """
    n = pre_emb.shape[0]
    if n == 0:
        raise ValueError("ebcl_clip_loss needs at least one pair")
    log_temp = torch.as_tensor(log_temp, dtype=pre_emb.dtype)
    logits = pre_emb @ post_emb.T * log_temp.exp()
    labels = torch.arange(n, device=logits.device)
    loss_i = F.cross_entropy(logits.T, labels)   # softmax over pre rows, per post column
    loss_t = F.cross_entropy(logits, labels)     # softmax over post rows, per pre row
    return (loss_i + loss_t) / 2


class EbclModel(nn.Module):
    def __init__(self, encoder: EventEncoder, freeze_temperature: bool = False):
        super().__init__()
        self.encoder = encoder
        self.heads = ContrastiveHeads(encoder.config.d_embed, freeze_temperature=freeze_temperature)

    def project_pair(self, pre: TokenBatch, post: TokenBatch):
        return (self.heads.project(self.encoder(pre), "pre"), self.heads.project(self.encoder(post), "post"))

    def loss(self, batch) -> torch.Tensor:
        pre, post = self.project_pair(batch[0], batch[1])
        return ebcl_clip_loss(pre, post, self.heads.log_temp.clamp(max=math.log(100.0)))

    def embed(self, batch: TokenBatch) -> torch.Tensor:
        return self.encoder(batch)


def retrieval_accuracy(model: EbclModel, data: EncodedPairs, batch_size: int = 32, seed: int = 0) -> float:
    """Top-1 pre->post retrieval accuracy within random batches of distinct
    patients (chance = 1 / batch_size)."""
    rng = np.random.default_rng(seed)
    hits = total = 0
    model.eval()
    with torch.no_grad():
        for idx in iter_ebcl_batches(data.patient_ids, batch_size, rng):
            pre, post = model.project_pair(data.pre[idx].trim(), data.post[idx].trim())
            pred = (pre @ post.T).argmax(dim=1).numpy()
            hits += int((pred == np.arange(len(idx))).sum())
            total += len(idx)
    if total == 0:
        raise ConfigurationError("not enough distinct patients for one retrieval batch")
    return hits / total


# ---------------------------------------------------------------------------
# OCP


@dataclass
class OcpExample:
    tokens: TokenBatch
    label: int


def ocp_relative_times(times: np.ndarray, swapped: bool) -> tuple:
    """Order and relative times of an OCP sequence.

    Unswapped: original order, last point at 0. Swapped: the latter half
    comes first with its own spacing; the former half is shifted to start one
    original junction gap (``T[h] - T[h-1]``) after the latter half ends, so
    the swapped sequence has the same span and the same multiset of
    consecutive gaps as the original. The last point is again 0.

    Returns ``(order, rel_times)`` where ``order`` indexes ``times``.
    """
    times = np.asarray(times, dtype=float)
    n = times.size
    h = n // 2
    if not swapped:
        return np.arange(n), times - times[-1]
    junction = times[h] - times[h - 1]
    shift = (times[-1] - times[0]) + junction
    order = np.concatenate([np.arange(h, n), np.arange(h)])
    seq = np.concatenate([times[h:], times[:h] + shift])
    return order, seq - seq[-1]


def ocp_make_example(
    trajectory: PatientTrajectory,
    rng: np.random.Generator,
    vocab: Vocabulary,
    max_len: int = 512,
    min_half: int = 16,
):
    """Random contiguous run of at most ``max_len`` retained observations,
    halves swapped with probability 1/2 (label 1 when swapped)."""
    fid, _ = vocab.codes(trajectory)
    kept = trajectory.take(np.flatnonzero(fid != PAD_ID))
    if len(kept) < 2 * min_half:
        return Rejected(f"{len(kept)} observations, OCP needs {2 * min_half}")
    length = min(len(kept), max_len)
    length -= length % 2
    start = int(rng.integers(0, len(kept) - length + 1))
    window = kept.slice(start, start + length)
    swapped = bool(rng.random() < 0.5)
    order, rel = ocp_relative_times(window.times, swapped)
    tokens = encode_sequence(window.take(order), rel / vocab.time_std, vocab, max_len)
    return OcpExample(tokens, int(swapped))


def ocp_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.numel() == 0:
        raise ValueError("ocp_loss needs a nonempty batch")
    return F.binary_cross_entropy_with_logits(logits.reshape(-1), labels.reshape(-1).to(logits.dtype))


class OcpModel(nn.Module):
    def __init__(self, encoder: EventEncoder):
        super().__init__()
        self.encoder = encoder
        self.classifier = nn.Linear(encoder.config.d_embed, 1)
        init_weights(self.classifier)

    def logits(self, tokens: TokenBatch) -> torch.Tensor:
        return self.classifier(self.encoder(tokens)).squeeze(-1)

    def loss(self, batch) -> torch.Tensor:
        tokens, labels = batch
        return ocp_loss(self.logits(tokens), torch.as_tensor(labels))

    def embed(self, batch: TokenBatch) -> torch.Tensor:
        return self.encoder(batch)


@torch.no_grad()
def ocp_accuracy(model: OcpModel, trajectories: Sequence[PatientTrajectory], vocab: Vocabulary,
                 max_len: int = 512, seed: int = 0, batch_size: int = 128) -> float:
    """Fraction of freshly drawn OCP examples whose swap label the model
    predicts correctly (logit > 0 means swapped)."""
    rng = np.random.default_rng(seed)
    examples = [e for e in (ocp_make_example(t, rng, vocab, max_len) for t in trajectories) if e]
    if not examples:
        raise ConfigurationError("no trajectory is long enough for an OCP example")
    model.eval()
    hits = 0
    for k in range(0, len(examples), batch_size):
        chunk = examples[k:k + batch_size]
        logits = model.logits(TokenBatch.concat([e.tokens for e in chunk]).trim())
        hits += int(((logits > 0).numpy().astype(int) == np.array([e.label for e in chunk])).sum())
    return hits / len(examples)


# ---------------------------------------------------------------------------
# STraTS-style forecasting


@dataclass
class ForecastExample:
    tokens: TokenBatch
    targets: dict           # vocab feature id -> z-scored value


def strats_make_example(
    trajectory: PatientTrajectory,
    window_len_days: float,
    rng: np.random.Generator,
    vocab: Vocabulary,
    max_len: int = 512,
    min_inputs: int = 16,
    attempts: int = 64,
):
    """Sample a forecast window ``[w, w + window_len_days)``.

    Inputs are the (at most ``max_len``) retained observations before ``w``,
    timed relative to the last of them; targets are the z-scored first
    continuous observation of each feature inside the window.
    """
    fid, _ = vocab.codes(trajectory)
    keep = np.flatnonzero(fid != PAD_ID)
    if keep.size <= min_inputs:
        return Rejected(f"{keep.size} observations, forecasting needs more than {min_inputs}")
    kept = trajectory.take(keep)
    fid = fid[keep]
    t = kept.times
    lo, hi = t[min_inputs - 1], t[-1]
    for _ in range(attempts):
        w = float(rng.uniform(lo, hi)) if hi > lo else float(hi)
        n_in = int(np.searchsorted(t, w, side="left"))
        if n_in < min_inputs:
            continue
        in_win = np.flatnonzero((t >= w) & (t < w + window_len_days) & kept.is_continuous)
        if in_win.size == 0:
            continue
        targets = {}
        for j in in_win:
            f = int(fid[j])
            if f not in targets:
                targets[f] = float((kept.values[j] - vocab.means[f]) / vocab.stds[f])
        inputs = kept.slice(max(0, n_in - max_len), n_in)
        rel = (inputs.times - inputs.times[-1]) / vocab.time_std
        return ForecastExample(encode_sequence(inputs, rel, vocab, max_len), targets)
    return Rejected(f"no valid forecast window after {attempts} attempts")


def strats_loss(pred: torch.Tensor, target: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Squared error averaged over observed targets only.

    ``pred``, ``target`` and ``target_mask`` are ``[B, n_features + 1]``.
    """
    n = target_mask.sum()
    if int(n) == 0:
        raise ValueError("strats_loss needs at least one observed target")
    diff = torch.where(target_mask, pred - target, torch.zeros_like(pred))
    return diff.square().sum() / n


def collate_targets(examples: Sequence[ForecastExample], n_features: int) -> tuple:
    target = np.zeros((len(examples), n_features + 1))
    mask = np.zeros((len(examples), n_features + 1), bool)
    for i, ex in enumerate(examples):
        for f, v in ex.targets.items():
            target[i, f] = v
            mask[i, f] = True
    return target, mask


class StratsModel(nn.Module):
    def __init__(self, encoder: EventEncoder, n_features: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.d_embed, n_features + 1)
        init_weights(self.head)

    def loss(self, batch) -> torch.Tensor:
        tokens, target, mask = batch
        pred = self.head(self.encoder(tokens))
        return strats_loss(pred, torch.as_tensor(target, dtype=pred.dtype), torch.as_tensor(mask))

    def embed(self, batch: TokenBatch) -> torch.Tensor:
        return self.encoder(batch)


# ---------------------------------------------------------------------------
# DuETT-style masked imputation


@dataclass
class ImputationExample:
    values: np.ndarray     # [n_bins, n_feat], NaN where no continuous value
    counts: np.ndarray     # [n_bins, n_feat]
    mask: np.ndarray       # [n_bins, n_feat], true = hidden from the model

    @property
    def grid(self) -> np.ndarray:
        """Values stacked with counts: ``[2, n_bins, n_feat]``."""
        return np.stack([self.values, self.counts])


def duett_features(vocab: Vocabulary, top_k: int = 128) -> np.ndarray:
    """Vocab ids of the ``top_k`` most frequent features."""
    order = sorted(range(vocab.n_features), key=lambda k: (-vocab.feature_counts[k], k))
    return np.asarray([k + 1 for k in order[:top_k]], dtype=np.int64)


def duett_grid(times, feature_ids, values, is_cont, features: np.ndarray, n_bins: int = 32) -> tuple:
    """Bin tokens into ``[n_bins, len(features)]`` mean-value and count grids.

    Bins split ``[min(times), max(times)]`` uniformly; tokens of features not
    in ``features`` are ignored.
    """
    times = np.asarray(times, float)
    col = {int(f): k for k, f in enumerate(features)}
    sel = np.array([int(f) in col for f in feature_ids], dtype=bool)
    counts = np.zeros((n_bins, len(features)))
    sums = np.zeros((n_bins, len(features)))
    nvals = np.zeros((n_bins, len(features)))
    if sel.any():
        t = times[sel]
        lo, hi = t.min(), t.max()
        span = hi - lo
        b = np.zeros(t.size, np.int64) if span <= 0 else np.minimum(((t - lo) / span * n_bins).astype(np.int64), n_bins - 1)
        c = np.array([col[int(f)] for f in np.asarray(feature_ids)[sel]], dtype=np.int64)
        np.add.at(counts, (b, c), 1.0)
        cont = np.asarray(is_cont, bool)[sel]
        np.add.at(sums, (b[cont], c[cont]), np.asarray(values, float)[sel][cont])
        np.add.at(nvals, (b[cont], c[cont]), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(nvals > 0, sums / np.maximum(nvals, 1), np.nan)
    return means, counts


def _token_rows(tokens: TokenBatch, row: int):
    m = tokens.mask[row]
    return tokens.times[row, m], tokens.feature_ids[row, m], tokens.cont_values[row, m], tokens.is_cont[row, m]


def duett_example_from_tokens(token_sets: Sequence, features, n_bins: int, mask_rate: float, rng):
    parts = [_token_rows(tb, r) for tb, r in token_sets]
    cols = [np.concatenate(x) for x in zip(*parts)]
    values, counts = duett_grid(*cols, features, n_bins)
    if counts.sum() == 0:
        return Rejected("empty imputation grid")
    mask = rng.random(counts.shape) < mask_rate
    if not mask.any():
        mask[np.unravel_index(int(rng.integers(mask.size)), mask.shape)] = True
    return ImputationExample(values, counts, mask)


def duett_make_example(
    pair: WindowPair,
    vocab: Vocabulary,
    n_bins: int = 32,
    top_k: int = 128,
    mask_rate: float = 0.15,
    rng: np.random.Generator | None = None,
    features: np.ndarray | None = None,
):
    """Imputation grid over the combined pre+post span of ``pair``."""
    rng = rng if rng is not None else np.random.default_rng()
    features = duett_features(vocab, top_k) if features is None else features
    pre = encode_window(pair.pre, pair.event.time, vocab, max_len=len(pair.pre) or 1, min_len=0, pad=False)
    post = encode_window(pair.post, pair.event.time, vocab, max_len=len(pair.post) or 1, min_len=0, pad=False)
    return duett_example_from_tokens([(pre, 0), (post, 0)], features, n_bins, mask_rate, rng)


def duett_loss(presence_logits: torch.Tensor, value_pred: torch.Tensor, values: torch.Tensor, counts: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """BCE on presence (count > 0) plus MSE on values, both over masked cells.

    Value error counts only masked cells holding a continuous value.
    """
    if int(mask.sum()) == 0:
        raise ValueError("duett_loss needs at least one masked cell")
    present = (counts > 0).to(presence_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(presence_logits[mask], present[mask])
    has_value = mask & torch.isfinite(values)
    if int(has_value.sum()) == 0:
        return bce
    mse = (value_pred[has_value] - values[has_value]).square().mean()
    return bce + mse


class AxisAttention(nn.Module):
    """A transformer layer applied along one axis of a ``[B, T, K, d]`` grid."""

    def __init__(self, d: int, n_heads: int, d_ff: int, dropout: float, axis: str):
        super().__init__()
        self.axis = axis
        self.layer = nn.TransformerEncoderLayer(d, n_heads, d_ff, dropout, batch_first=True)

    def forward(self, x):
        b, t, k, d = x.shape
        if self.axis == "time":
            y = self.layer(x.permute(0, 2, 1, 3).reshape(b * k, t, d))
            return y.reshape(b, k, t, d).permute(0, 2, 1, 3)
        return self.layer(x.reshape(b * t, k, d)).reshape(b, t, k, d)


class DuettModel(nn.Module):
    """Cell embedding, alternating time/feature attention (2 + 2 layers) and
    per-cell presence/value heads. Embeddings average the cell outputs."""

    def __init__(self, features: np.ndarray, n_bins: int = 32, d_model: int = 24, n_heads: int = 2, d_ff: int = 96, dropout: float = 0.1):
        super().__init__()
        self.register_buffer("features", torch.as_tensor(np.asarray(features), dtype=torch.long), persistent=False)
        self.feature_list = [int(f) for f in features]
        self.n_bins = n_bins
        self.d_model = d_model
        self.cell = nn.Linear(4, d_model)
        self.feature_embed = nn.Embedding(len(features), d_model)
        self.layers = nn.ModuleList(
            AxisAttention(d_model, n_heads, d_ff, dropout, axis) for axis in ("time", "feature", "time", "feature")
        )
        self.head = nn.Linear(d_model, 2)
        init_weights(self)

    def forward(self, values, counts, hidden):
        """Returns ``(presence_logits, value_pred, cell_outputs)``."""
        observed = torch.isfinite(values) & ~hidden
        v = torch.where(observed, values, torch.zeros_like(values))
        c = torch.where(hidden, torch.zeros_like(counts), torch.log1p(counts))
        x = torch.stack([v, c, observed.to(v.dtype), hidden.to(v.dtype)], dim=-1)
        h = self.cell(x) + self.feature_embed.weight
        for layer in self.layers:
            h = layer(h)
        out = self.head(h)
        return out[..., 0], out[..., 1], h

    def loss(self, batch) -> torch.Tensor:
        dtype = self.cell.weight.dtype
        values = torch.as_tensor(np.stack([e.values for e in batch]), dtype=dtype)
        counts = torch.as_tensor(np.stack([e.counts for e in batch]), dtype=dtype)
        mask = torch.as_tensor(np.stack([e.mask for e in batch]))
        presence, value_pred, _ = self(values, counts, mask)
        return duett_loss(presence, value_pred, values, counts, mask)

    def embed(self, tokens: TokenBatch) -> torch.Tensor:
        """Embed each token row on its own span (no hidden cells)."""
        feats = np.asarray(self.feature_list)
        grids = [duett_grid(*_token_rows(tokens, r), feats, self.n_bins) for r in range(len(tokens))]
        dtype = self.cell.weight.dtype
        values = torch.as_tensor(np.stack([g[0] for g in grids]), dtype=dtype)
        counts = torch.as_tensor(np.stack([g[1] for g in grids]), dtype=dtype)
        hidden = torch.zeros(values.shape, dtype=torch.bool)
        return self(values, counts, hidden)[2].mean(dim=(1, 2))


# ---------------------------------------------------------------------------
# objective registry


def build_pretrain_model(objective: str, vocab: Vocabulary, config: EncoderConfig, features: np.ndarray | None = None, freeze_temperature: bool = False) -> nn.Module:
    if objective not in OBJECTIVES:
        raise ConfigurationError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    if objective == "duett":
        feats = duett_features(vocab) if features is None else features
        return DuettModel(feats, dropout=config.dropout)
    encoder = EventEncoder(config, vocab.n_features, vocab.n_categories)
    if objective == "ebcl":
        return EbclModel(encoder, freeze_temperature)
    if objective == "ocp":
        return OcpModel(encoder)
    return StratsModel(encoder, vocab.n_features)
