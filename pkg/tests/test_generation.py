import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geomask.errors import InvalidArgumentError
from geomask.evaluation import geoloc_histogram, geoloc_montecarlo
from geomask.generation import (
    GenerationRequest,
    chain_generate,
    detokenize_outputs,
    generate,
    generate_image_modality,
    generate_large_tile,
    generate_sequence_modality,
    sample_geolocations,
    unmask_schedule,
    zero_shot_segment,
)
from geomask.pipeline import sample_inputs


@pytest.fixture(scope="module")
def inputs(tiny):
    return sample_inputs(tiny.val[0], ["optical", "radar"], tiny.model, tiny.tokenizers, tiny.vocab)


@given(st.integers(1, 300), st.integers(1, 40))
def test_schedule_accounting(n, steps):
    sched = unmask_schedule(n, steps)
    assert sum(sched) == n
    assert all(c >= 1 for c in sched)
    assert len(sched) == min(n, steps)


def test_schedule_one_per_round_at_grid_size():
    assert unmask_schedule(16, 16) == [1] * 16
    assert unmask_schedule(16, 1) == [16]
    with pytest.raises(InvalidArgumentError):
        unmask_schedule(0, 3)


def test_request_validation():
    with pytest.raises(InvalidArgumentError):
        GenerationRequest({"optical": 0}, ["optical"])
    with pytest.raises(InvalidArgumentError):
        GenerationRequest({}, [])
    with pytest.raises(InvalidArgumentError):
        GenerationRequest({}, ["lulc"], temperature=-1)
    with pytest.raises(InvalidArgumentError):
        GenerationRequest({}, ["lulc", "lulc"])
    with pytest.raises(InvalidArgumentError):
        GenerationRequest({}, ["lulc"], decode_steps=0)


def test_image_generation_deterministic_at_zero_temperature(tiny, inputs):
    req = GenerationRequest(inputs, ["lulc"])
    a = generate_image_modality(tiny.model, inputs, "lulc", req)
    b = generate_image_modality(tiny.model, inputs, "lulc", req)
    assert np.array_equal(a.ids, b.ids)
    assert a.shape == (2, 2)
    assert a.ids.min() >= 0 and a.ids.max() < 4096


def test_sampling_is_seeded(tiny, inputs):
    req = GenerationRequest(inputs, ["ndvi"], temperature=1.0, seed=3)
    a = generate_image_modality(tiny.model, inputs, "ndvi", req)
    b = generate_image_modality(tiny.model, inputs, "ndvi", req)
    assert np.array_equal(a.ids, b.ids)


def test_one_step_decoding(tiny, inputs):
    req = GenerationRequest(inputs, ["dem"], decode_steps=1)
    grid = generate_image_modality(tiny.model, inputs, "dem", req)
    assert grid.shape == (2, 2)


def test_target_among_inputs_rejected(tiny, inputs):
    req = GenerationRequest({}, ["lulc"])
    with pytest.raises(InvalidArgumentError):
        generate_image_modality(tiny.model, inputs, "optical", req)
    with pytest.raises(InvalidArgumentError):
        generate_image_modality(tiny.model, inputs, "caption", req)


def test_geolocation_is_lat_then_lon(tiny, inputs):
    for temp in (0.0, 1.0, 5.0):
        req = GenerationRequest(inputs, ["geolocation"], temperature=temp, seed=1)
        ids = generate_sequence_modality(tiny.model, inputs, "geolocation", req, tiny.vocab)
        assert len(ids) == 2
        assert ids[0] in tiny.vocab.lat_ids and ids[1] in tiny.vocab.lon_ids


def test_caption_generation(tiny, inputs):
    req = GenerationRequest(inputs, ["caption"], temperature=1.0, seed=2)
    a = generate_sequence_modality(tiny.model, inputs, "caption", req, tiny.vocab)
    b = generate_sequence_modality(tiny.model, inputs, "caption", req, tiny.vocab)
    assert a == b and 1 <= len(a) <= 24
    specials = set(tiny.vocab.special_ids())
    assert not specials & set(a)


def test_single_target_chain_equals_direct(tiny, inputs):
    req = GenerationRequest(inputs, ["lulc"])
    direct = generate_image_modality(tiny.model, inputs, "lulc", req)
    chained = chain_generate(tiny.model, inputs, ["lulc"], req, tiny.vocab)
    assert np.array_equal(direct.ids, chained.outputs["lulc"].ids)


def test_chain_provenance(tiny, inputs):
    req = GenerationRequest(inputs, ["lulc", "ndvi"])
    chained = generate(tiny.model, req, tiny.vocab, chain=True)
    independent = generate(tiny.model, req, tiny.vocab, chain=False)
    assert chained.provenance["ndvi"] == ["optical", "radar", "lulc"]
    assert independent.provenance["ndvi"] == ["optical", "radar"]
    assert np.array_equal(chained.outputs["lulc"].ids, independent.outputs["lulc"].ids)


def test_cyclic_chain_rejected(tiny, inputs):
    req = GenerationRequest(inputs, ["lulc"])
    with pytest.raises(InvalidArgumentError):
        chain_generate(tiny.model, inputs, ["lulc", "lulc"], req)
    with pytest.raises(InvalidArgumentError):
        chain_generate(tiny.model, inputs, ["optical"], req)


def test_full_chain_and_detokenize(tiny, inputs):
    req = GenerationRequest(inputs, ["lulc", "ndvi", "dem", "geolocation", "caption"], diffusion_steps=2)
    res = generate(tiny.model, req, tiny.vocab, chain=True)
    out = detokenize_outputs(tiny.tokenizers, res.outputs, req, tiny.vocab)
    assert out["lulc"].shape == (1, 32, 32) and out["dem"].shape == (1, 32, 32)
    lat, lon = out["geolocation"]
    assert -90 <= lat <= 90 and -180 <= lon < 180
    assert isinstance(out["caption"], str)
    again = detokenize_outputs(tiny.tokenizers, res.outputs, req, tiny.vocab)
    assert np.array_equal(out["ndvi"], again["ndvi"])
    with pytest.raises(InvalidArgumentError):
        detokenize_outputs({}, {"lulc": res.outputs["lulc"]}, req)


def test_monte_carlo_draws(tiny, inputs):
    draws = sample_geolocations(tiny.model, inputs, tiny.vocab, 50, temperature=1.0, seed=4)
    assert draws.shape == (50, 2)
    assert np.isin(draws[:, 0], list(tiny.vocab.lat_ids)).all()
    assert np.isin(draws[:, 1], list(tiny.vocab.lon_ids)).all()
    assert np.array_equal(draws, sample_geolocations(tiny.model, inputs, tiny.vocab, 50, 1.0, seed=4))
    cold = sample_geolocations(tiny.model, inputs, tiny.vocab, 20, temperature=0.0)
    assert len({tuple(r) for r in cold}) == 1
    with pytest.raises(InvalidArgumentError):
        sample_geolocations(tiny.model, inputs, tiny.vocab, 0)


def test_monte_carlo_grid(tiny, inputs):
    grid = geoloc_montecarlo(tiny.model, inputs, tiny.vocab, n_draws=30, temperature=1.0, seed=0)
    assert grid.shape == (721, 1440)
    assert abs(grid.sum() - 1.0) < 1e-9
    one = geoloc_montecarlo(tiny.model, inputs, tiny.vocab, n_draws=1, temperature=1.0, seed=0)
    assert np.count_nonzero(one) == 1 and one.max() == 1.0
    cold = geoloc_montecarlo(tiny.model, inputs, tiny.vocab, n_draws=25, temperature=0.0)
    assert np.count_nonzero(cold) == 1
    hist = geoloc_histogram(np.array([[tiny.vocab.lat_ids[0], tiny.vocab.lon_ids[0]]] * 2), tiny.vocab)
    assert hist[0, 0] == 1.0


def test_zero_shot_segment(tiny, inputs):
    mask = zero_shot_segment(tiny.model, tiny.tokenizers, inputs, 1)
    assert mask.shape == (32, 32) and mask.dtype == bool
    with pytest.raises(InvalidArgumentError):
        zero_shot_segment(tiny.model, tiny.tokenizers, inputs, 99)


def test_large_tile(tiny):
    big = {"optical": tiny.val[0].rasters["optical"], "radar": tiny.val[0].rasters["radar"]}
    big = {m: np.concatenate([v, v[..., :16]], axis=-1) for m, v in big.items()}  # 32 x 48
    req = GenerationRequest(big, ["lulc"], diffusion_steps=1)
    out = generate_large_tile(tiny.model, tiny.tokenizers, big, "lulc", req, tile=32, stride=16)
    assert out.shape == (1, 32, 48)
    assert np.all(out == np.round(out))
    with pytest.raises(InvalidArgumentError):
        generate_large_tile(tiny.model, tiny.tokenizers, big, "lulc", req, tile=64, stride=16)
    with pytest.raises(InvalidArgumentError):
        generate_large_tile(tiny.model, tiny.tokenizers, big, "lulc", req, tile=32, stride=10)
