import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from geomask.errors import InvalidArgumentError
from geomask.fsq import (
    DEFAULT_LEVELS,
    LULC_LEVELS,
    FSQuantizer,
    VectorQuantizer,
    codebook_size,
    codes_to_index,
    codes_to_quantized,
    fsq_bound,
    fsq_preimage,
    fsq_quantize,
    index_to_codes,
)

# frozen oracles
PRODUCT_16K = 15360  # 8*8*8*6*5
PRODUCT_4K = 4096  # 8**4


def test_codebook_sizes():
    assert codebook_size(DEFAULT_LEVELS) == PRODUCT_16K
    assert codebook_size(LULC_LEVELS) == PRODUCT_4K


def test_zero_latent_maps_to_center():
    z = torch.zeros(5, dtype=torch.float64)
    assert torch.allclose(fsq_bound(z), torch.zeros(5, dtype=torch.float64), atol=1e-12)
    q, codes = fsq_quantize(z)
    assert torch.equal(q, torch.zeros(5, dtype=torch.float64))
    assert codes.tolist() == [3, 3, 3, 2, 2]


def test_saturation_stays_inside_rounding_cells():
    big = torch.full((5,), 50.0, dtype=torch.float64)
    hi = fsq_bound(big)
    lo = fsq_bound(-big)
    _, codes_hi = fsq_quantize(big)
    _, codes_lo = fsq_quantize(-big)
    assert codes_hi.tolist() == [l - 1 for l in DEFAULT_LEVELS]
    assert codes_lo.tolist() == [0] * 5
    # odd levels saturate at +-(L-1)/2 (up to the 1e-3 safety margin)
    assert hi[-1].item() == pytest.approx(2.0, abs=3e-3)
    assert lo[-1].item() == pytest.approx(-2.0, abs=3e-3)


def test_symmetric_even_level_bound_reaches_only_l_minus_1_integers():
    # 3.5*tanh(z) for L=8 stays strictly inside (-3.5, 3.5), so it rounds to
    # only the 7 integers -3..3; the offset form used by fsq_bound reaches all 8.
    assert 3.5 * math.tanh(0.5) == pytest.approx(1.617410, abs=1e-6)
    z = torch.linspace(-20, 20, 200_001, dtype=torch.float64)
    symmetric = torch.round(3.5 * torch.tanh(z) * (1 - 1e-3)).unique()
    assert len(symmetric) == 7
    offset = torch.round(fsq_bound(z[:, None], [8])).unique()
    assert len(offset) == 8


@pytest.mark.parametrize("level", [2, 3, 4, 5, 6, 7, 8, 9])
def test_dense_sweep_hits_exactly_l_values(level):
    z = torch.linspace(-20, 20, 100_001, dtype=torch.float64)[:, None]
    q, codes = fsq_quantize(z, [level])
    assert len(q.unique()) == level
    assert sorted(codes.unique().tolist()) == list(range(level))


@pytest.mark.parametrize("levels", [DEFAULT_LEVELS, LULC_LEVELS])
def test_achievable_codewords_equal_level_product(levels):
    z = torch.linspace(-20, 20, 20_001, dtype=torch.float64)
    per_dim = []
    for l in levels:
        _, codes = fsq_quantize(z[:, None], [l])
        per_dim.append(sorted(set(codes.reshape(-1).tolist())))
    combos = torch.tensor(list(itertools.product(*per_dim)))
    ids = codes_to_index(combos, levels)
    assert len(ids.unique()) == codebook_size(levels)


@pytest.mark.parametrize("levels", [DEFAULT_LEVELS, LULC_LEVELS])
def test_exhaustive_index_round_trip(levels):
    n = codebook_size(levels)
    ids = torch.arange(n)
    codes = index_to_codes(ids, levels)
    assert torch.equal(codes_to_index(codes, levels), ids)
    assert len({tuple(c) for c in codes.tolist()}) == n


def test_index_extremes():
    assert codes_to_index(torch.zeros(5, dtype=torch.int64)).item() == 0
    top = torch.tensor([l - 1 for l in DEFAULT_LEVELS])
    assert codes_to_index(top).item() == 15359
    # first dimension is least significant
    assert codes_to_index(torch.tensor([1, 0, 0, 0, 0])).item() == 1
    assert codes_to_index(torch.tensor([0, 1, 0, 0, 0])).item() == 8


def test_index_range_errors():
    with pytest.raises(InvalidArgumentError):
        index_to_codes(torch.tensor([15360]))
    with pytest.raises(InvalidArgumentError):
        codes_to_index(torch.tensor([8, 0, 0, 0, 0]))
    with pytest.raises(InvalidArgumentError):
        fsq_bound(torch.zeros(3))
    with pytest.raises(InvalidArgumentError):
        fsq_bound(torch.zeros(1), [1])


def test_quantize_is_idempotent_on_codebook():
    codes = index_to_codes(torch.arange(PRODUCT_16K))
    q = codes_to_quantized(codes)
    z = fsq_preimage(q)
    _, back = fsq_quantize(z)
    assert torch.equal(back, codes)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-6, 6, allow_nan=False), min_size=5, max_size=5))
def test_quantized_matches_codes(zs):
    z = torch.tensor(zs, dtype=torch.float64)
    q, codes = fsq_quantize(z)
    assert torch.equal(codes_to_quantized(codes).double(), q.detach())
    assert torch.all((codes >= 0) & (codes < torch.tensor(DEFAULT_LEVELS)))


def test_straight_through_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(100, 5, generator=gen, dtype=torch.float64) * 1.5
    z.requires_grad_(True)
    q, _ = fsq_quantize(z)
    (grad,) = torch.autograd.grad(q.sum(), z)
    h = 1e-6
    with torch.no_grad():
        fd = (fsq_bound(z + h) - fsq_bound(z - h)) / (2 * h)
    rel = (grad - fd).abs() / fd.abs().clamp_min(1e-12)
    assert rel.max().item() < 1e-4


def test_usage_ema():
    qz = FSQuantizer(LULC_LEVELS, ema_decay=0.99)
    qz.train()
    for _ in range(5):
        qz(torch.randn(64, 4))
    total = qz.usage.sum().item()
    assert 0 <= total <= 1 + 1e-9
    # five EMA steps from zero: 1 - 0.99**5 of the mass
    assert total == pytest.approx(1 - 0.99**5, rel=1e-9)
    assert 1.0 <= qz.perplexity() <= PRODUCT_4K


def test_quantizer_embed_matches_forward():
    qz = FSQuantizer()
    qz.eval()
    z = torch.randn(10, 5)
    out, ids, loss = qz(z)
    assert loss.item() == 0.0
    assert torch.allclose(qz.embed_ids(ids), out)


def test_vector_quantizer_interface():
    vq = VectorQuantizer(32, 5)
    z = torch.randn(7, 5, requires_grad=True)
    out, ids, loss = vq(z)
    assert out.shape == z.shape and ids.shape == (7,)
    loss.backward()
    assert z.grad is not None
    assert torch.allclose(vq.embed_ids(ids), out.detach(), atol=1e-6)


def test_bad_ema_decay():
    with pytest.raises(InvalidArgumentError):
        FSQuantizer(ema_decay=0.0)


def test_ids_cover_numpy_ints():
    ids = index_to_codes(np.array([0, 1, 15359]))
    assert ids.shape == (3, 5)
