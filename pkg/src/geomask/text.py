"""Shared vocabulary for captions and geolocations.

Layout of the id space (dense, fixed order):

* special tokens ``[PAD] [BOS] [EOS] [UNK]`` and one ``[<modality>]`` marker
  per modality,
* 721 latitude tokens ``lat=-90.00 .. lat=90.00`` and 1440 longitude tokens
  ``lon=-180.00 .. lon=179.75`` in quarter-degree steps,
* corpus words, most frequent first, and, when ``max_subwords`` is smaller
  than the number of distinct words, single-character pieces (``c`` and the
  continuation form ``##c``) used to spell the words that did not fit.

Text is split on whitespace; each word is looked up whole and otherwise
segmented greedily (longest match first) into pieces, falling back to
``[UNK]`` when no segmentation exists.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import InvalidArgumentError

PAD, BOS, EOS, UNK = "[PAD]", "[BOS]", "[EOS]", "[UNK]"
SPECIALS = (PAD, BOS, EOS, UNK)
MODALITY_MARKERS = ("[optical]", "[radar]", "[lulc]", "[ndvi]", "[dem]", "[caption]", "[geolocation]")
STEP = 0.25
N_LAT = int(180 / STEP) + 1
N_LON = int(360 / STEP)
CONTINUATION = "##"


def quarter_round(x: float) -> float:
    """Nearest multiple of 0.25 with ties rounded toward +infinity."""
    return math.floor(x / STEP + 0.5) * STEP


def _fmt(prefix: str, v: float) -> str:
    return f"{prefix}={v + 0.0:.2f}"  # + 0.0 turns -0.0 into 0.0


def lat_tokens() -> List[str]:
    return [_fmt("lat", -90.0 + i * STEP) for i in range(N_LAT)]


def lon_tokens() -> List[str]:
    return [_fmt("lon", -180.0 + i * STEP) for i in range(N_LON)]


@dataclass
class TextVocab:
    tokens: List[str]
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InvalidArgumentError("duplicate tokens in vocabulary")
        for t in SPECIALS:
            if t not in self.index:
                raise InvalidArgumentError(f"vocabulary lacks special token {t}")
        self.lat_offset = self.index[_fmt("lat", -90.0)]
        self.lon_offset = self.index[_fmt("lon", -180.0)]
        if self.tokens[self.lat_offset : self.lat_offset + N_LAT] != lat_tokens():
            raise InvalidArgumentError("latitude tokens missing or out of order")
        if self.tokens[self.lon_offset : self.lon_offset + N_LON] != lon_tokens():
            raise InvalidArgumentError("longitude tokens missing or out of order")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def lat_ids(self) -> range:
        return range(self.lat_offset, self.lat_offset + N_LAT)

    @property
    def lon_ids(self) -> range:
        return range(self.lon_offset, self.lon_offset + N_LON)

    def special_ids(self) -> List[int]:
        return [self.index[t] for t in SPECIALS + MODALITY_MARKERS if t in self.index]

    def save(self, path) -> None:
        """Write ``token<TAB>id`` lines sorted by id."""
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens)))

    @classmethod
    def load(cls, path) -> "TextVocab":
        tokens = []
        for n, line in enumerate(Path(path).read_text().splitlines()):
            if not line:
                continue
            tok, _, idx = line.rpartition("\t")
            if not tok or int(idx) != len(tokens):
                raise InvalidArgumentError(f"{path}:{n + 1}: ids must be dense and sorted")
            tokens.append(tok)
        return cls(tokens)


def build_vocab(corpus: Iterable[str], max_subwords: Optional[int] = None) -> TextVocab:
    """Vocabulary from a caption corpus; deterministic given corpus order.

    Args:
        corpus: caption strings.
        max_subwords: cap on word + piece entries; ``None`` keeps every word.
    """
    lines = list(corpus)
    if not lines:
        raise InvalidArgumentError("empty corpus")
    counts = Counter()
    first_seen: Dict[str, int] = {}
    for line in lines:
        for w in line.split():
            counts[w] += 1
            first_seen.setdefault(w, len(first_seen))
    reserved = set(SPECIALS + MODALITY_MARKERS) | set(lat_tokens()) | set(lon_tokens())
    words = sorted((w for w in counts if w not in reserved), key=lambda w: (-counts[w], first_seen[w]))
    if max_subwords is not None and max_subwords < 0:
        raise InvalidArgumentError("max_subwords must be >= 0")
    if max_subwords is None or len(words) <= max_subwords:
        entries = words
    else:
        heads = sorted({w[0] for w in words})
        tails = sorted({CONTINUATION + c for w in words for c in w[1:]})
        pieces = heads + [t for t in tails if t not in heads]
        pieces = pieces[:max_subwords]
        kept = [w for w in words if w not in pieces][: max_subwords - len(pieces)]
        entries = pieces + kept
    tokens = list(SPECIALS) + list(MODALITY_MARKERS) + lat_tokens() + lon_tokens()
    tokens += [e for e in entries if e not in tokens]
    return TextVocab(tokens)


def _segment(vocab: TextVocab, word: str) -> List[int]:
    ids, start = [], 0
    while start < len(word):
        for end in range(len(word), start, -1):
            piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
            if piece in vocab.index:
                ids.append(vocab.index[piece])
                start = end
                break
        else:
            return [vocab.unk_id]
    return ids


def encode_text(vocab: TextVocab, s: str, frame: bool = True) -> List[int]:
    ids = [vocab.bos_id] if frame else []
    for word in s.split():
        if word in vocab.index:
            ids.append(vocab.index[word])
        else:
            ids.extend(_segment(vocab, word))
    if frame:
        ids.append(vocab.eos_id)
    return ids


def decode_text(vocab: TextVocab, ids: Sequence[int]) -> str:
    """Inverse of :func:`encode_text`; framing and padding tokens are dropped.

    Ids outside the vocabulary render as ``[UNK]``.
    """
    skip = {vocab.pad_id, vocab.bos_id, vocab.eos_id}
    words: List[str] = []
    for i in ids:
        i = int(i)
        if i in skip:
            continue
        tok = vocab.tokens[i] if 0 <= i < len(vocab) else UNK
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION) :]
        else:
            words.append(tok)
    return " ".join(words)


def _normalize_geo(lat: float, lon: float) -> Tuple[float, float]:
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InvalidArgumentError("coordinates must be finite")
    if not -90.0 <= lat <= 90.0:
        raise InvalidArgumentError(f"latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise InvalidArgumentError(f"longitude {lon} outside [-180, 180)")
    qlat = min(quarter_round(lat), 90.0)
    qlon = quarter_round(lon)
    if qlon >= 180.0:
        qlon -= 360.0
    return qlat, qlon


def encode_geolocation(vocab: TextVocab, lat: float, lon: float) -> List[int]:
    """``[lat_token_id, lon_token_id]`` for the nearest quarter-degree cell."""
    qlat, qlon = _normalize_geo(lat, lon)
    return [
        vocab.lat_offset + int(round((qlat + 90.0) / STEP)),
        vocab.lon_offset + int(round((qlon + 180.0) / STEP)),
    ]


def decode_geolocation(vocab: TextVocab, ids: Sequence[int]) -> Tuple[float, float]:
    if len(ids) != 2:
        raise InvalidArgumentError("geolocation needs exactly two ids")
    lat_id, lon_id = int(ids[0]), int(ids[1])
    if lat_id not in vocab.lat_ids or lon_id not in vocab.lon_ids:
        raise InvalidArgumentError("expected one latitude id followed by one longitude id")
    return -90.0 + (lat_id - vocab.lat_offset) * STEP, -180.0 + (lon_id - vocab.lon_offset) * STEP


def geo_cell(lat: float, lon: float) -> Tuple[int, int]:
    """(row, col) of the quarter-degree cell in the 721 x 1440 grid."""
    qlat, qlon = _normalize_geo(lat, lon)
    return int(round((qlat + 90.0) / STEP)), int(round((qlon + 180.0) / STEP))
