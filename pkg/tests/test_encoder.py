import math

import numpy as np
import pytest
import torch

from conftest import random_token_batch
from ebclkit.encoder import (
    MAX_LOGIT_SCALE,
    ContrastiveHeads,
    EncoderConfig,
    EventEncoder,
    FusionPooling,
    batch_tensors,
    l2_normalize,
)
from ebclkit.errors import ConfigurationError
from ebclkit.featurize import TokenBatch

N_FEATURES, N_CATEGORIES = 5, 4


def random_batch(n_rows, seq_len, rng, lengths=None):
    return random_token_batch(n_rows, seq_len, rng, N_FEATURES, N_CATEGORIES, lengths)


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    enc = EventEncoder(EncoderConfig(d_token=16, d_ff=32, d_embed=8, max_len=64), N_FEATURES, N_CATEGORIES)
    return enc.double().eval()


def run(enc, batch):
    return enc(batch_tensors(batch, torch.float64))


def test_output_shape(encoder, rng):
    out = run(encoder, random_batch(3, 10, rng))
    assert out.shape == (3, 8)


def test_extra_padding_does_not_change_output(encoder, rng):
    batch = random_batch(4, 12, rng)
    a = run(encoder, batch)
    b = run(encoder, batch.pad_to(40))
    torch.testing.assert_close(a, b, atol=1e-10, rtol=0)


def test_padded_content_is_ignored(encoder, rng):
    batch = random_batch(2, 10, rng, lengths=[4, 6])
    noisy = TokenBatch(**{k: v.copy() for k, v in vars(batch).items()})
    noisy.times[~batch.mask] = 123.0
    noisy.cont_values[~batch.mask] = -7.0
    noisy.feature_ids[~batch.mask] = 3
    torch.testing.assert_close(run(encoder, batch), run(encoder, noisy), atol=1e-10, rtol=0)


def test_row_permutation_equivariance(encoder, rng):
    batch = random_batch(6, 9, rng)
    perm = rng.permutation(6)
    torch.testing.assert_close(run(encoder, batch)[perm], run(encoder, batch[perm]), atol=1e-10, rtol=0)


def test_token_order_within_row_is_irrelevant(encoder, rng):
    # no positional encoding: the time embedding carries all ordering information
    batch = random_batch(1, 12, rng, lengths=[12])
    order = rng.permutation(12)
    shuffled = TokenBatch(**{k: v[:, order] for k, v in vars(batch).items()})
    torch.testing.assert_close(run(encoder, batch), run(encoder, shuffled), atol=1e-10, rtol=0)


def test_rows_are_independent(encoder, rng):
    batch = random_batch(5, 8, rng)
    alone = run(encoder, batch[np.array([2])])
    torch.testing.assert_close(run(encoder, batch)[2:3], alone, atol=1e-10, rtol=0)


def test_triplet_embedding_is_additive(encoder, rng):
    emb = encoder.embed
    t = batch_tensors(random_batch(3, 7, rng, lengths=[7, 7, 7]), torch.float64)
    tok = emb(t)
    expected = emb.time(t["times"]) + emb.feature_table(t["feature_ids"])
    expected = expected + torch.where(
        t["is_cont"].unsqueeze(-1), emb.value(t["cont_values"]), emb.category_table(t["cat_value_ids"])
    )
    torch.testing.assert_close(tok, expected)


def test_padding_tokens_embed_to_zero(encoder, rng):
    t = batch_tensors(random_batch(3, 9, rng, lengths=[2, 5, 9]), torch.float64)
    tok = encoder.embed(t)
    assert torch.all(tok[~t["mask"]] == 0)


def test_single_unmasked_token_pools_to_its_output():
    torch.manual_seed(1)
    pool = FusionPooling(6).double()
    h = torch.randn(2, 5, 6, dtype=torch.float64)
    mask = torch.zeros(2, 5, dtype=torch.bool)
    mask[0, 3] = mask[1, 0] = True
    out = pool(h, mask)
    torch.testing.assert_close(out, torch.stack([h[0, 3], h[1, 0]]))


def test_pooling_is_convex_combination():
    torch.manual_seed(2)
    pool = FusionPooling(4).double()
    h = torch.randn(1, 6, 4, dtype=torch.float64)
    out = pool(h, torch.ones(1, 6, dtype=torch.bool))
    lo, hi = h.min(dim=1).values, h.max(dim=1).values
    assert torch.all(out >= lo - 1e-12) and torch.all(out <= hi + 1e-12)


def test_fully_masked_row_is_rejected(encoder, rng):
    batch = random_batch(2, 5, rng)
    batch.mask[1] = False
    with pytest.raises(ConfigurationError):
        run(encoder, batch)


def test_out_of_range_ids_rejected(encoder, rng):
    batch = random_batch(2, 5, rng, lengths=[5, 5])
    batch.feature_ids[0, 0] = N_FEATURES + 1
    with pytest.raises(IndexError):
        run(encoder, batch)
    batch = random_batch(2, 5, rng, lengths=[5, 5])
    batch.is_cont[0, 0] = False
    batch.cat_value_ids[0, 0] = N_CATEGORIES
    with pytest.raises(IndexError):
        run(encoder, batch)


def test_sequence_longer_than_max_len_rejected(encoder, rng):
    with pytest.raises(ConfigurationError):
        run(encoder, random_batch(1, 65, rng))


def test_projection_heads_are_unit_norm_and_unshared():
    torch.manual_seed(3)
    heads = ContrastiveHeads(8).double()
    emb = torch.randn(10, 8, dtype=torch.float64)
    pre, post = heads.project(emb, "pre"), heads.project(emb, "post")
    torch.testing.assert_close(pre.norm(dim=1), torch.ones(10, dtype=torch.float64))
    torch.testing.assert_close(post.norm(dim=1), torch.ones(10, dtype=torch.float64))
    assert heads.pre.weight.data_ptr() != heads.post.weight.data_ptr()
    assert not torch.allclose(pre, post)
    with pytest.raises(ValueError):
        heads.project(emb, "middle")


def test_temperature_initialisation_and_clamp():
    heads = ContrastiveHeads(4)
    assert heads.log_temp.item() == pytest.approx(math.log(1 / 0.07), rel=1e-6)
    assert heads.logit_scale().item() == pytest.approx(1 / 0.07, rel=1e-5)
    with torch.no_grad():
        heads.log_temp.fill_(10.0)
    assert heads.logit_scale().item() == pytest.approx(MAX_LOGIT_SCALE)
    assert not ContrastiveHeads(4, freeze_temperature=True).log_temp.requires_grad


def test_zero_norm_row_cannot_be_normalised():
    with pytest.raises(FloatingPointError):
        l2_normalize(torch.zeros(2, 3))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(d_token=30, n_heads=4)
    with pytest.raises(ConfigurationError):
        EncoderConfig(dropout=0.7)
    with pytest.raises(ConfigurationError):
        EncoderConfig.from_dict({"width": 3})
    cfg = EncoderConfig(d_token=8, n_heads=2)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_embed_numpy_matches_forward_and_restores_mode(rng):
    torch.manual_seed(4)
    enc = EventEncoder(EncoderConfig(d_token=8, d_ff=16, d_embed=4, max_len=16), N_FEATURES, N_CATEGORIES)
    enc.train()
    batch = random_batch(7, 10, rng)
    got = enc.embed_numpy(batch, chunk=3)
    assert enc.training
    enc.eval()
    with torch.no_grad():
        ref = enc(batch).double().numpy()
    np.testing.assert_allclose(got, ref, atol=1e-5)
