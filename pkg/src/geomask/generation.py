"""Any-to-any generation with a pretrained backbone.

Image targets are filled by confidence-ordered iterative unmasking: each
round predicts every still-masked position, commits the most confident
ones, and feeds committed tokens back as encoder inputs. The number of
masked positions after round ``r`` of ``S`` is ``floor(G * cos(pi/2 * r/S))``
(at least one commit per round). Sequence targets are decoded left to right;
geolocation is constrained to one latitude id followed by one longitude id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .backbone import BackboneModel, pack_inputs, pack_queries
from .errors import InvalidArgumentError
from .pretrain import input_units
from .seeding import derive_seed
from .synth import LULC_CLASSES, PATCH
from .text import TextVocab, decode_geolocation, decode_text
from .tokenizer import TokenGrid, TokenizerModel, decode_batch

DEFAULT_CHAIN = ("optical", "radar", "lulc", "ndvi", "dem", "geolocation", "caption")


@dataclass
class GenerationRequest:
    inputs: Dict[str, object]
    targets: List[str]
    temperature: float = 0.0
    decode_steps: Optional[int] = None  # None: one round per token grid row
    diffusion_steps: int = 10
    seed: int = 0
    max_caption_len: int = 24

    def __post_init__(self):
        self.targets = list(self.targets)
        if not self.targets:
            raise InvalidArgumentError("need at least one target")
        if self.temperature < 0:
            raise InvalidArgumentError("temperature must be >= 0")
        clash = [t for t in self.targets if t in self.inputs]
        if clash:
            raise InvalidArgumentError(f"targets {clash} are also inputs")
        if len(set(self.targets)) != len(self.targets):
            raise InvalidArgumentError("duplicate targets")
        if self.decode_steps is not None and self.decode_steps < 1:
            raise InvalidArgumentError("decode_steps must be >= 1")


def unmask_schedule(n_positions: int, steps: int) -> List[int]:
    """Tokens committed in each round; sums to ``n_positions``, every entry >= 1."""
    if n_positions < 1:
        raise InvalidArgumentError("nothing to generate")
    steps = max(1, min(int(steps), n_positions))
    remaining = n_positions
    out = []
    for r in range(1, steps + 1):
        left = int(math.floor(n_positions * math.cos(math.pi / 2 * r / steps))) if r < steps else 0
        # commit at least one now, and keep at least one for every later round
        left = max(min(left, remaining - 1), steps - r)
        out.append(remaining - left)
        remaining = left
    return out


def _pick(logits: torch.Tensor, temperature: float, gen: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """(ids, confidence) per row; argmax at temperature 0, sampling otherwise."""
    logits = logits.double()
    if temperature == 0:
        probs = torch.softmax(logits, -1)
        conf, ids = probs.max(-1)
        return ids, conf
    probs = torch.softmax(logits / temperature, -1)
    ids = torch.multinomial(probs, 1, generator=gen)[:, 0]
    return ids, probs.gather(1, ids[:, None])[:, 0]


def _grid_shape(model: BackboneModel, inputs: Mapping[str, object]) -> Tuple[int, int]:
    for m, v in inputs.items():
        if m in model.config.sequence_modalities:
            continue
        arr = v.ids if isinstance(v, TokenGrid) else np.asarray(v)
        if arr.ndim == 3:
            return arr.shape[1] // PATCH, arr.shape[2] // PATCH
        if arr.ndim == 2:
            return tuple(arr.shape)
    g = model.config.grid_size
    return g, g


def _check_target(model: BackboneModel, inputs: Mapping[str, object], target: str):
    if target in inputs:
        raise InvalidArgumentError(f"target {target!r} is already an input")
    if target not in model.config.token_vocab:
        raise InvalidArgumentError(f"model has no output head for {target!r}")


@torch.no_grad()
def generate_image_modality(
    model: BackboneModel,
    inputs: Mapping[str, object],
    target: str,
    request: GenerationRequest,
    generator: Optional[torch.Generator] = None,
) -> TokenGrid:
    _check_target(model, inputs, target)
    if target in model.config.sequence_modalities:
        raise InvalidArgumentError(f"{target!r} is a sequence modality")
    model.eval()
    gh, gw = _grid_shape(model, inputs)
    n = gh * gw
    gen = generator or torch.Generator().manual_seed(derive_seed(request.seed, "generate", target))
    base = input_units(model, inputs)
    steps = request.decode_steps if request.decode_steps is not None else gh
    ids = np.full(n, -1, dtype=np.int64)
    for count in unmask_schedule(n, steps):
        open_pos = np.flatnonzero(ids < 0)
        units = base + [(target, "token", int(p), int(ids[p])) for p in np.flatnonzero(ids >= 0)]
        ib = pack_inputs(model.config, [units])
        qb = pack_queries(model.config, [[(target, int(p), None, -1) for p in open_pos]])
        logits = model(ib, qb)[target]
        choice, conf = _pick(logits, request.temperature, gen)
        order = np.argsort(-conf.numpy(), kind="stable")[:count]
        ids[open_pos[order]] = choice.numpy()[order]
    return TokenGrid(target, ids.reshape(gh, gw), model.config.token_vocab[target])


def _allowed_ids(vocab: TextVocab, target: str, slot: int, size: int) -> torch.Tensor:
    mask = torch.zeros(size, dtype=torch.bool)
    if target == "geolocation":
        rng_ = vocab.lat_ids if slot == 0 else vocab.lon_ids
        mask[rng_.start : rng_.stop] = True
        return mask
    mask[:] = True
    for i in vocab.special_ids():
        mask[i] = False
    mask[vocab.lat_ids.start : vocab.lat_ids.stop] = False
    mask[vocab.lon_ids.start : vocab.lon_ids.stop] = False
    mask[vocab.eos_id] = slot > 0
    return mask


@torch.no_grad()
def generate_sequence_modality(
    model: BackboneModel,
    inputs: Mapping[str, object],
    target: str,
    request: GenerationRequest,
    vocab: TextVocab,
    generator: Optional[torch.Generator] = None,
) -> List[int]:
    """Autoregressive ids (caption: without the final EOS; geolocation: [lat, lon])."""
    _check_target(model, inputs, target)
    if target not in model.config.sequence_modalities:
        raise InvalidArgumentError(f"{target!r} is not a sequence modality")
    model.eval()
    gen = generator or torch.Generator().manual_seed(derive_seed(request.seed, "generate", target))
    size = model.config.token_vocab[target]
    max_len = 2 if target == "geolocation" else min(request.max_caption_len, model.config.max_seq_len)
    ib = pack_inputs(model.config, [input_units(model, inputs)])
    enc, pad = model.encode(ib)
    seq: List[int] = []
    for slot in range(max_len):
        qs = [(target, p, None if p == 0 else seq[p - 1], -1) for p in range(slot + 1)]
        qb = pack_queries(model.config, [qs])
        logits = model.logits(model.decode(enc, pad, qb), qb)[target][-1:]
        allowed = _allowed_ids(vocab, target, slot, size)
        if target == "caption" and slot == max_len - 1:
            allowed = torch.zeros_like(allowed)
            allowed[vocab.eos_id] = True
        logits = logits.masked_fill(~allowed, float("-inf"))
        tok, _ = _pick(logits, request.temperature, gen)
        tok = int(tok[0])
        if target == "caption" and tok == vocab.eos_id:
            break
        seq.append(tok)
    return seq


@torch.no_grad()
def sample_geolocations(
    model: BackboneModel,
    inputs: Mapping[str, object],
    vocab: TextVocab,
    n_draws: int,
    temperature: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """``n_draws`` independent (lat_id, lon_id) draws, shape (n_draws, 2).

    Equivalent to calling :func:`generate_sequence_modality` ``n_draws``
    times, but the latitude distribution is computed once and the longitude
    distribution once per distinct latitude.
    """
    if n_draws < 1:
        raise InvalidArgumentError("n_draws must be >= 1")
    target = "geolocation"
    _check_target(model, inputs, target)
    model.eval()
    gen = torch.Generator().manual_seed(derive_seed(seed, "geoloc"))
    size = model.config.token_vocab[target]
    ib = pack_inputs(model.config, [input_units(model, inputs)])
    enc, pad = model.encode(ib)

    def dist(prefix):
        qs = [(target, p, None if p == 0 else prefix[p - 1], -1) for p in range(len(prefix) + 1)]
        qb = pack_queries(model.config, [qs])
        lg = model.logits(model.decode(enc, pad, qb), qb)[target][-1].double()
        lg = lg.masked_fill(~_allowed_ids(vocab, target, len(prefix), size), float("-inf"))
        return lg

    def draw(lg, k):
        if temperature == 0:
            return torch.full((k,), int(lg.argmax()), dtype=torch.int64)
        probs = torch.softmax(lg / temperature, -1)
        return torch.multinomial(probs, k, replacement=True, generator=gen)

    lats = draw(dist([]), n_draws)
    out = np.zeros((n_draws, 2), dtype=np.int64)
    out[:, 0] = lats.numpy()
    for lat in np.unique(out[:, 0]):
        sel = np.flatnonzero(out[:, 0] == lat)
        out[sel, 1] = draw(dist([int(lat)]), len(sel)).numpy()
    return out


def generate_one(model, inputs, target, request, vocab=None):
    if target in model.config.sequence_modalities:
        if vocab is None:
            raise InvalidArgumentError(f"generating {target!r} needs a text vocabulary")
        return generate_sequence_modality(model, inputs, target, request, vocab)
    return generate_image_modality(model, inputs, target, request)


@dataclass
class ChainResult:
    outputs: Dict[str, object]
    provenance: Dict[str, List[str]]  # target -> modalities it was conditioned on
    synthetic: List[str] = field(default_factory=list)


def _as_input(value):
    return value if isinstance(value, TokenGrid) else np.asarray(value, dtype=np.int64)


def chain_generate(
    model: BackboneModel,
    inputs: Mapping[str, object],
    ordering: Sequence[str],
    request: GenerationRequest,
    vocab: Optional[TextVocab] = None,
) -> ChainResult:
    """Generate ``ordering`` one modality at a time, each conditioned on the
    inputs plus every earlier generated modality (as tokens)."""
    ordering = list(ordering)
    seen = set(inputs)
    for m in ordering:
        if m in seen:
            raise InvalidArgumentError(f"ordering is cyclic: {m!r} is generated from itself")
        seen.add(m)
    current = dict(inputs)
    outputs, provenance = {}, {}
    for m in ordering:
        provenance[m] = list(current)
        out = generate_one(model, current, m, request, vocab)
        outputs[m] = out
        current[m] = _as_input(out)
    return ChainResult(outputs, provenance, list(ordering))


def generate(
    model: BackboneModel, request: GenerationRequest, vocab: Optional[TextVocab] = None, chain: bool = False
) -> ChainResult:
    """Chained or independent generation of ``request.targets``."""
    if chain:
        return chain_generate(model, request.inputs, request.targets, request, vocab)
    outputs, provenance = {}, {}
    for m in request.targets:
        provenance[m] = list(request.inputs)
        outputs[m] = generate_one(model, request.inputs, m, request, vocab)
    return ChainResult(outputs, provenance, list(request.targets))


def detokenize_outputs(
    tokenizers: Mapping[str, TokenizerModel],
    outputs: Mapping[str, object],
    request: GenerationRequest,
    vocab: Optional[TextVocab] = None,
) -> Dict[str, object]:
    """Rasters for image modalities, a string for caption, (lat, lon) for geolocation."""
    out = {}
    for m, value in outputs.items():
        if m == "caption":
            if vocab is None:
                raise InvalidArgumentError("caption needs a text vocabulary")
            out[m] = decode_text(vocab, value)
        elif m == "geolocation":
            if vocab is None:
                raise InvalidArgumentError("geolocation needs a text vocabulary")
            out[m] = decode_geolocation(vocab, value)
        else:
            if m not in tokenizers:
                raise InvalidArgumentError(f"no tokenizer for {m!r}")
            ids = value.ids if isinstance(value, TokenGrid) else np.asarray(value)
            seed = derive_seed(request.seed, "detokenize", m) % (2**31)
            out[m] = decode_batch(tokenizers[m], ids[None], request.diffusion_steps, seed)[0]
    return out


def zero_shot_segment(
    model: BackboneModel,
    tokenizers: Mapping[str, TokenizerModel],
    inputs: Mapping[str, object],
    class_id: int,
    request: Optional[GenerationRequest] = None,
    target: str = "lulc",
) -> np.ndarray:
    """Binary (H, W) mask of ``class_id`` in the generated land-cover map."""
    if not 0 <= int(class_id) < len(LULC_CLASSES):
        raise InvalidArgumentError(f"unknown class id {class_id}")
    request = request or GenerationRequest(dict(inputs), [target])
    grid = generate_image_modality(model, inputs, target, request)
    raster = detokenize_outputs(tokenizers, {target: grid}, request)[target]
    return raster[0] == int(class_id)


def generate_large_tile(
    model: BackboneModel,
    tokenizers: Mapping[str, TokenizerModel],
    inputs: Mapping[str, np.ndarray],
    target: str,
    request: GenerationRequest,
    tile: int = 64,
    stride: int = 32,
) -> np.ndarray:
    """Generate ``target`` over rasters larger than one tile.

    Overlapping ``tile`` x ``tile`` windows are generated independently and
    detokenized; the result is the per-pixel mean of all windows covering a
    pixel (categorical targets take the per-pixel majority instead).
    """
    if tile % PATCH or stride % PATCH or stride < 1 or stride > tile:
        raise InvalidArgumentError("tile and stride must be multiples of 16 with stride <= tile")
    shapes = {np.asarray(v).shape[-2:] for v in inputs.values()}
    if len(shapes) != 1:
        raise InvalidArgumentError("inputs must share one spatial shape")
    h, w = shapes.pop()
    if h < tile or w < tile:
        raise InvalidArgumentError("inputs smaller than one tile")

    def starts(size):
        s = list(range(0, size - tile + 1, stride))
        if s[-1] != size - tile:
            s.append(size - tile)
        return s

    tok = tokenizers[target]
    categorical = tok.spec.is_categorical
    n_classes = tok.n_classes
    acc = np.zeros(((n_classes if categorical else tok.spec.channels), h, w), dtype=np.float64)
    cover = np.zeros((h, w), dtype=np.float64)
    for y in starts(h):
        for x in starts(w):
            window = {m: np.asarray(v)[..., y : y + tile, x : x + tile] for m, v in inputs.items()}
            sub = GenerationRequest(window, [target], request.temperature, request.decode_steps,
                                    request.diffusion_steps, derive_seed(request.seed, "tile", y, x) % (2**31))
            grid = generate_image_modality(model, window, target, sub)
            raster = detokenize_outputs(tokenizers, {target: grid}, sub)[target]
            if categorical:
                cls = raster[0].astype(np.int64)
                acc[:, y : y + tile, x : x + tile] += np.eye(n_classes)[cls].transpose(2, 0, 1)
            else:
                acc[:, y : y + tile, x : x + tile] += raster
            cover[y : y + tile, x : x + tile] += 1
    if categorical:
        return acc.argmax(0)[None].astype(np.float32)
    return (acc / cover).astype(np.float32)
