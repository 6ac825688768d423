import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomask.errors import InvalidArgumentError
from geomask.synth import generate_samples
from geomask.text import (
    MODALITY_MARKERS,
    N_LAT,
    N_LON,
    SPECIALS,
    TextVocab,
    build_vocab,
    decode_geolocation,
    decode_text,
    encode_geolocation,
    encode_text,
    geo_cell,
    lat_tokens,
    lon_tokens,
    quarter_round,
)


@pytest.fixture(scope="module")
def captions():
    return [s.caption for s in generate_samples(60, seed=1, size=(16, 16))]


@pytest.fixture(scope="module")
def vocab(captions):
    return build_vocab(captions)


def test_coordinate_token_counts():
    assert N_LAT == 721 and N_LON == 1440
    assert len(lat_tokens()) == len(set(lat_tokens())) == 721
    assert len(lon_tokens()) == len(set(lon_tokens())) == 1440
    assert lat_tokens()[0] == "lat=-90.00" and lat_tokens()[-1] == "lat=90.00"
    assert lon_tokens()[0] == "lon=-180.00" and lon_tokens()[-1] == "lon=179.75"


def test_three_word_vocab():
    v = build_vocab(["water near field"])
    assert len(v) == len(SPECIALS) + len(MODALITY_MARKERS) + 2161 + 3
    for w in ("water", "near", "field"):
        assert w in v.index
    assert len(set(v.index.values())) == len(v)


def test_duplicate_lines_do_not_change_vocab():
    lines = ["water near field", "dense forest", "water near field"]
    assert build_vocab(lines).tokens == build_vocab(["water near field", "dense forest"]).tokens


def test_budget_falls_back_to_pieces():
    corpus = ["alpha beta gamma delta", "alpha beta"]
    v = build_vocab(corpus, max_subwords=12)
    ids = encode_text(v, "alpha beta gamma delta")
    assert decode_text(v, ids) == "alpha beta gamma delta"
    words = [t for t in v.tokens[v.lon_offset + N_LON :]]
    assert len(words) <= 12
    # a word made of unseen characters cannot be segmented
    assert encode_text(v, "xyz", frame=False) == [v.unk_id]


def test_empty_and_repeated_text(vocab):
    assert encode_text(vocab, "") == [vocab.bos_id, vocab.eos_id]
    ids = encode_text(vocab, "water water")
    assert len(ids) == 4 and ids[1] == ids[2] == vocab.index["water"]


def test_caption_round_trip(vocab, captions):
    for c in captions:
        assert decode_text(vocab, encode_text(vocab, c)) == c


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5, 5000), max_size=30))
def test_decode_never_fails(ids):
    v = build_vocab(["water near field"])
    out = decode_text(v, ids)
    assert isinstance(out, str)


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcdefghij ", max_size=40))
def test_encode_ids_in_range(s):
    v = build_vocab(["abc def", "ghij"], max_subwords=6)
    assert all(0 <= i < len(v) for i in encode_text(v, s))


def test_geolocation_examples(vocab):
    def tokens(lat, lon):
        return [vocab.tokens[i] for i in encode_geolocation(vocab, lat, lon)]

    assert tokens(0.0, 0.0) == ["lat=0.00", "lon=0.00"]
    assert tokens(52.52, 13.405) == ["lat=52.50", "lon=13.50"]
    assert tokens(13.375, 0.0)[0] == "lat=13.50"  # ties toward +infinity
    assert tokens(-13.375, 0.0)[0] == "lat=-13.25"
    assert tokens(10.0, 180.0)[1] == "lon=-180.00"  # antimeridian wraps
    assert tokens(10.0, 179.9)[1] == "lon=-180.00"
    assert tokens(90.0, -180.0) == ["lat=90.00", "lon=-180.00"]


def test_quarter_round_ties():
    assert quarter_round(0.125) == 0.25
    assert quarter_round(-0.125) == 0.0
    assert quarter_round(0.1249) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(-90, 90), st.floats(-180, 180))
def test_geolocation_round_trip_error(lat, lon):
    v = build_vocab(["x"])
    ids = encode_geolocation(v, lat, lon)
    assert ids[0] in v.lat_ids and ids[1] in v.lon_ids
    dlat, dlon = decode_geolocation(v, ids)
    assert abs(dlat - lat) <= 0.125 + 1e-9
    wrapped = abs((dlon - lon + 180.0) % 360.0 - 180.0)
    assert wrapped <= 0.125 + 1e-9
    assert -180.0 <= dlon < 180.0


def test_geolocation_errors(vocab):
    with pytest.raises(InvalidArgumentError):
        encode_geolocation(vocab, 91.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        encode_geolocation(vocab, 0.0, float("nan"))
    with pytest.raises(InvalidArgumentError):
        decode_geolocation(vocab, [vocab.lon_offset, vocab.lat_offset])
    with pytest.raises(InvalidArgumentError):
        decode_geolocation(vocab, [vocab.lat_offset])


def test_geo_cell():
    assert geo_cell(-90.0, -180.0) == (0, 0)
    assert geo_cell(90.0, 179.75) == (720, 1439)


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "[PAD]\t0"
    assert [int(l.split("\t")[1]) for l in lines] == list(range(len(vocab)))
    assert TextVocab.load(path).tokens == vocab.tokens


def test_vocab_file_rejects_gaps(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    del lines[5]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(InvalidArgumentError):
        TextVocab.load(path)


def test_special_ids(vocab):
    assert vocab.pad_id == 0
    assert set(vocab.special_ids()).isdisjoint(set(vocab.lat_ids) | set(vocab.lon_ids))
    assert np.all(np.diff(list(vocab.lat_ids)) == 1)
