"""Triplet embedding, transformer encoder with fusion-attention pooling, and
the unshared pre/post projection heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError
from .featurize import TokenBatch

MAX_LOGIT_SCALE = 100.0


@dataclass(frozen=True)
class EncoderConfig:
    d_token: int = 32
    n_layers: int = 2
    d_ff: int = 128
    n_heads: int = 2
    max_len: int = 512
    d_embed: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_token % self.n_heads:
            raise ConfigurationError(f"d_token={self.d_token} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout <= 0.6:
            raise ConfigurationError(f"dropout {self.dropout} outside [0, 0.6]")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigurationError(f"unknown encoder fields: {sorted(set(d) - known)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Truncated normal for weights and lookup tables, zeros for biases."""
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif "norm" in name:
            nn.init.ones_(p)
        elif p.dim() >= 2:
            nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)


def batch_tensors(batch: TokenBatch, dtype=torch.float32, device=None) -> dict:
    return {
        "times": torch.as_tensor(batch.times, dtype=dtype, device=device),
        "feature_ids": torch.as_tensor(batch.feature_ids, dtype=torch.long, device=device),
        "cont_values": torch.as_tensor(batch.cont_values, dtype=dtype, device=device),
        "cat_value_ids": torch.as_tensor(batch.cat_value_ids, dtype=torch.long, device=device),
        "is_cont": torch.as_tensor(batch.is_cont, dtype=torch.bool, device=device),
        "mask": torch.as_tensor(batch.mask, dtype=torch.bool, device=device),
    }


class ContinuousEmbedding(nn.Module):
    """One-to-many feed-forward map from a scalar to a token vector."""

    def __init__(self, d: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(1, d), nn.Tanh(), nn.Linear(d, d))

    def forward(self, x):
        return self.net(x.unsqueeze(-1))


class TripletEmbedding(nn.Module):
    def __init__(self, n_features: int, n_categories: int, d_token: int):
        super().__init__()
        self.n_features = n_features
        self.n_categories = n_categories
        self.time = ContinuousEmbedding(d_token)
        self.value = ContinuousEmbedding(d_token)
        self.feature_table = nn.Embedding(n_features + 1, d_token)
        self.category_table = nn.Embedding(n_categories, d_token)

    def forward(self, t: dict) -> torch.Tensor:
        fid, cid = t["feature_ids"], t["cat_value_ids"]
        if fid.numel() and (fid.min() < 0 or fid.max() > self.n_features):
            raise IndexError(f"feature id outside [0, {self.n_features}]")
        if cid.numel() and (cid.min() < 0 or cid.max() >= self.n_categories):
            raise IndexError(f"categorical id outside [0, {self.n_categories})")
        value = torch.where(t["is_cont"].unsqueeze(-1), self.value(t["cont_values"]), self.category_table(cid))
        tok = self.time(t["times"]) + self.feature_table(fid) + value
        return tok * t["mask"].unsqueeze(-1).to(tok.dtype)


class FusionPooling(nn.Module):
    """Attention-weighted average of token outputs: ``softmax(w . tanh(W h))``
    over unmasked positions."""

    def __init__(self, d: int):
        super().__init__()
        self.hidden = nn.Linear(d, d)
        self.score = nn.Linear(d, 1, bias=False)

    def forward(self, h, mask):
        scores = self.score(torch.tanh(self.hidden(h))).squeeze(-1)
        scores = scores.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(scores, dim=-1)
        return torch.einsum("bs,bsd->bd", alpha, h)


class EventEncoder(nn.Module):
    """``f_theta``: token batch -> one ``d_embed`` vector per row."""

    def __init__(self, config: EncoderConfig, n_features: int, n_categories: int):
        super().__init__()
        self.config = config
        self.embed = TripletEmbedding(n_features, n_categories, config.d_token)
        layer = nn.TransformerEncoderLayer(
            config.d_token, config.n_heads, config.d_ff, config.dropout, batch_first=True
        )
        self.transformer = nn.TransformerEncoder(layer, config.n_layers, enable_nested_tensor=False)
        self.pool = FusionPooling(config.d_token)
        self.out = nn.Linear(config.d_token, config.d_embed)
        init_weights(self)

    def forward(self, batch) -> torch.Tensor:
        t = batch if isinstance(batch, dict) else batch_tensors(batch, self.out.weight.dtype, self.out.weight.device)
        mask = t["mask"]
        if mask.shape[1] > self.config.max_len:
            raise ConfigurationError(f"sequence length {mask.shape[1]} exceeds max_len={self.config.max_len}")
        if not bool(mask.any(dim=1).all()):
            raise ConfigurationError("every row needs at least one unmasked token")
        h = self.transformer(self.embed(t), src_key_padding_mask=~mask)
        return self.out(self.pool(h, mask))

    @torch.no_grad()
    def embed_numpy(self, batch: TokenBatch, chunk: int = 256) -> np.ndarray:
        """Eval-mode embeddings as a float64 array, computed in chunks."""
        was_training = self.training
        self.eval()
        out = [self(batch[np.arange(k, min(k + chunk, len(batch)))].trim()).double().cpu().numpy()
               for k in range(0, len(batch), chunk)]
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, self.config.d_embed))


def l2_normalize(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms <= eps).any()):
        raise FloatingPointError("cannot L2-normalize a zero-norm row")
    return x / norms


class ContrastiveHeads(nn.Module):
    """Unshared pre/post linear projections plus the learnable log-temperature."""

    def __init__(self, d_embed: int, init_temperature: float = 0.07, freeze_temperature: bool = False):
        super().__init__()
        self.pre = nn.Linear(d_embed, d_embed, bias=False)
        self.post = nn.Linear(d_embed, d_embed, bias=False)
        self.log_temp = nn.Parameter(torch.tensor(math.log(1.0 / init_temperature)), requires_grad=not freeze_temperature)
        init_weights(self)

    def project(self, emb: torch.Tensor, side: str) -> torch.Tensor:
        if side not in ("pre", "post"):
            raise ValueError(f"side must be 'pre' or 'post', got {side!r}")
        return l2_normalize((self.pre if side == "pre" else self.post)(emb))

    def logit_scale(self) -> torch.Tensor:
        return self.log_temp.clamp(max=math.log(MAX_LOGIT_SCALE)).exp()
