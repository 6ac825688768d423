"""Symmetric encoder-decoder transformer over dual-scale multimodal units.

Encoder inputs are *units*: a token id of some modality, or a raw 16x16
patch of a pixel modality, each placed at a grid position (image
modalities) or a sequence position (caption, geolocation). Every unit gets
its value embedding plus a learned positional and arm embedding, so the
encoder is permutation-equivariant over units. A learned register token is
always prepended, which keeps attention well defined for empty inputs.

Decoder queries are a mask embedding (image targets) or the embedding of the
previous token (sequence targets, teacher forcing) plus position and
modality embeddings. Queries attend to each other only within their own
modality, causally for sequence modalities, and cross-attend to the encoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError
from .synth import PATCH, default_modalities

NUM_SPECIALS = 2  # START (= vocab) and MASK (= vocab + 1) rows in every token table


@dataclass
class BackboneConfig:
    token_vocab: Dict[str, int] = field(default_factory=dict)
    pixel_channels: Dict[str, int] = field(default_factory=dict)
    sequence_modalities: List[str] = field(default_factory=lambda: ["caption", "geolocation"])
    dim: int = 256
    depth_encoder: int = 4
    depth_decoder: int = 4
    heads: int = 8
    mlp_ratio: float = 4.0
    grid_size: int = 4
    max_seq_len: int = 24
    pixel_log_scale: List[str] = field(default_factory=list)  # pixel arms read in dB

    def __post_init__(self):
        self.token_vocab = {k: int(v) for k, v in self.token_vocab.items()}
        self.pixel_channels = {k: int(v) for k, v in self.pixel_channels.items()}
        self.sequence_modalities = [m for m in self.sequence_modalities if m in self.token_vocab]
        if not self.token_vocab:
            raise InvalidArgumentError("need at least one token modality")
        if any(v < 2 for v in self.token_vocab.values()):
            raise InvalidArgumentError("every vocabulary needs >= 2 ids")
        if any(c < 1 for c in self.pixel_channels.values()):
            raise InvalidArgumentError("pixel modalities need >= 1 channel")
        if self.dim % self.heads:
            raise InvalidArgumentError("dim must be divisible by heads")
        if self.depth_encoder < 0 or self.depth_decoder < 0:
            raise InvalidArgumentError("depths must be >= 0")

    @property
    def token_modalities(self) -> List[str]:
        return list(self.token_vocab)

    @property
    def arms(self) -> List[Tuple[str, str]]:
        return [(m, "token") for m in self.token_vocab] + [(m, "pixel") for m in self.pixel_channels]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def random_loss_bound(vocab_size: int) -> float:
    """Cross-entropy of a uniform predictor: ln(vocab_size)."""
    if vocab_size < 2:
        raise InvalidArgumentError("vocab_size must be >= 2")
    return math.log(vocab_size)


def ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over queries of -log softmax(logits)[target]."""
    targets = torch.as_tensor(targets, dtype=torch.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise InvalidArgumentError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    if targets.numel() and bool(((targets < 0) | (targets >= logits.shape[1])).any()):
        raise InvalidArgumentError(f"target id outside vocabulary of size {logits.shape[1]}")
    return F.cross_entropy(logits, targets)


def multi_ce_loss(logits: Mapping[str, torch.Tensor], targets: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Mean CE over all queries of all modalities (each query weighted equally)."""
    total, count = None, 0
    for m, lg in logits.items():
        n = lg.shape[0]
        if n == 0:
            continue
        part = ce_loss(lg, targets[m]) * n
        total = part if total is None else total + part
        count += n
    if total is None:
        raise InvalidArgumentError("no queries")
    return total / count


# -- batch containers ----------------------------------------------------


@dataclass
class InputBatch:
    """Padded encoder units. ``arm`` is -1 at padding."""

    arm: torch.Tensor  # (B, L) long
    pos: torch.Tensor  # (B, L) long
    token: torch.Tensor  # (B, L) long, 0 for pixel units
    patch_index: torch.Tensor  # (B, L) long row into patches[modality], -1 otherwise
    patches: Dict[str, torch.Tensor]  # modality -> (P, C*256)

    @property
    def pad(self) -> torch.Tensor:
        return self.arm < 0


@dataclass
class QueryBatch:
    """Padded decoder queries. ``mod`` is -1 at padding, ``target`` -1 at padding."""

    mod: torch.Tensor  # (B, Q) index into config.token_modalities
    pos: torch.Tensor
    prev: torch.Tensor  # previous token for sequence queries (START at position 0)
    target: torch.Tensor

    @property
    def pad(self) -> torch.Tensor:
        return self.mod < 0


def pack_inputs(config: BackboneConfig, examples: Sequence[Sequence[tuple]], dtype=torch.float32) -> InputBatch:
    """Pack per-example unit lists into padded tensors.

    Each unit is ``(modality, scale, position, value)`` where ``value`` is a
    token id for ``scale == "token"`` and a flat normalized patch for
    ``scale == "pixel"``. Units are put in canonical order (arm, position).
    """
    arm_index = {a: i for i, a in enumerate(config.arms)}
    b = len(examples)
    length = max([len(e) for e in examples] + [0])
    arm = torch.full((b, length), -1, dtype=torch.int64)
    pos = torch.zeros((b, length), dtype=torch.int64)
    token = torch.zeros((b, length), dtype=torch.int64)
    pidx = torch.full((b, length), -1, dtype=torch.int64)
    patch_lists: Dict[str, list] = {m: [] for m in config.pixel_channels}
    for i, units in enumerate(examples):
        keyed = []
        for mod, scale, p, value in units:
            if (mod, scale) not in arm_index:
                raise InvalidArgumentError(f"model has no {scale} input for modality {mod!r}")
            keyed.append((arm_index[(mod, scale)], int(p), mod, scale, value))
        keyed.sort(key=lambda u: (u[0], u[1]))
        for j, (a, p, mod, scale, value) in enumerate(keyed):
            arm[i, j] = a
            pos[i, j] = p
            if scale == "token":
                token[i, j] = int(value)
            else:
                pidx[i, j] = len(patch_lists[mod])
                patch_lists[mod].append(np.asarray(value, dtype=np.float32).reshape(-1))
    patches = {
        m: torch.as_tensor(np.stack(v), dtype=dtype) if v else torch.zeros((0, c * PATCH * PATCH), dtype=dtype)
        for (m, v), c in zip(patch_lists.items(), config.pixel_channels.values())
    }
    return InputBatch(arm, pos, token, pidx, patches)


def pack_queries(config: BackboneConfig, examples: Sequence[Sequence[tuple]]) -> QueryBatch:
    """Pack per-example query lists ``(modality, position, prev_token, target)``.

    ``prev_token`` is ignored for image modalities; ``None`` means START.
    ``target`` may be -1 when unknown (generation).
    """
    mod_index = {m: i for i, m in enumerate(config.token_modalities)}
    b = len(examples)
    length = max([len(e) for e in examples] + [0])
    mod = torch.full((b, length), -1, dtype=torch.int64)
    pos = torch.zeros((b, length), dtype=torch.int64)
    prev = torch.zeros((b, length), dtype=torch.int64)
    target = torch.full((b, length), -1, dtype=torch.int64)
    for i, queries in enumerate(examples):
        for j, (m, p, pv, t) in enumerate(queries):
            if m not in mod_index:
                raise InvalidArgumentError(f"model has no output head for {m!r}")
            mod[i, j] = mod_index[m]
            pos[i, j] = int(p)
            prev[i, j] = config.token_vocab[m] if pv is None else int(pv)
            target[i, j] = int(t)
    return QueryBatch(mod, pos, prev, target)


# -- layers --------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context, allowed):
        b, n, d = x.shape
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).view(b, context.shape[1], 2, h, d // h).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed[:, None])
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, cross: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.cross = cross
        if cross:
            self.norm_q = nn.LayerNorm(dim)
            self.norm_ctx = nn.LayerNorm(dim)
            self.cross_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, self_allowed, context=None, cross_allowed=None):
        y = self.norm1(x)
        x = x + self.attn(y, y, self_allowed)
        if self.cross:
            x = x + self.cross_attn(self.norm_q(x), self.norm_ctx(context), cross_allowed)
        return x + self.mlp(self.norm2(x))


class BackboneModel(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config
        d = c.dim
        self.mod_index = {m: i for i, m in enumerate(c.token_modalities)}
        self.arm_index = {a: i for i, a in enumerate(c.arms)}

        self.enc_tok = nn.ModuleDict({m: nn.Embedding(v + NUM_SPECIALS, d) for m, v in c.token_vocab.items()})
        self.enc_pix = nn.ModuleDict({m: nn.Linear(ch * PATCH * PATCH, d) for m, ch in c.pixel_channels.items()})
        self.enc_row = nn.Parameter(torch.zeros(c.grid_size, d))
        self.enc_col = nn.Parameter(torch.zeros(c.grid_size, d))
        self.enc_seq = nn.Parameter(torch.zeros(c.max_seq_len, d))
        self.enc_arm = nn.Parameter(torch.zeros(len(c.arms), d))
        self.register = nn.Parameter(torch.zeros(1, d))
        self.encoder = nn.ModuleList(Block(d, c.heads, c.mlp_ratio, cross=False) for _ in range(c.depth_encoder))
        self.enc_norm = nn.LayerNorm(d)

        self.dec_tok = nn.ModuleDict(
            {m: nn.Embedding(c.token_vocab[m] + NUM_SPECIALS, d) for m in c.sequence_modalities}
        )
        self.dec_mask = nn.Parameter(torch.zeros(d))
        self.dec_row = nn.Parameter(torch.zeros(c.grid_size, d))
        self.dec_col = nn.Parameter(torch.zeros(c.grid_size, d))
        self.dec_seq = nn.Parameter(torch.zeros(c.max_seq_len, d))
        self.dec_mod = nn.Parameter(torch.zeros(len(c.token_vocab), d))
        self.decoder = nn.ModuleList(Block(d, c.heads, c.mlp_ratio, cross=True) for _ in range(c.depth_decoder))
        self.dec_norm = nn.LayerNorm(d)
        self.heads = nn.ModuleDict({m: nn.Linear(d, v) for m, v in c.token_vocab.items()})

        for m, ch in c.pixel_channels.items():
            self.register_buffer(f"pix_mean_{m}", torch.zeros(ch))
            self.register_buffer(f"pix_std_{m}", torch.ones(ch))
        self._init_weights()

    def _init_weights(self):
        for p in [self.enc_row, self.enc_col, self.enc_seq, self.enc_arm, self.register,
                  self.dec_mask, self.dec_row, self.dec_col, self.dec_seq, self.dec_mod]:
            nn.init.normal_(p, std=0.02)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.trunc_normal_(mod.weight, std=0.02)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.Embedding):
                nn.init.normal_(mod.weight, std=0.02)

    # -- pixel normalization -------------------------------------------
    def set_pixel_stats(self, modality: str, mean, std) -> None:
        getattr(self, f"pix_mean_{modality}").copy_(torch.as_tensor(mean, dtype=torch.float32))
        getattr(self, f"pix_std_{modality}").copy_(torch.as_tensor(std, dtype=torch.float32).clamp_min(1e-6))

    def pixel_stats(self, modality: str) -> Tuple[np.ndarray, np.ndarray]:
        return (
            getattr(self, f"pix_mean_{modality}").numpy().astype(np.float64),
            getattr(self, f"pix_std_{modality}").numpy().astype(np.float64),
        )

    def normalize_patches(self, modality: str, raster: np.ndarray) -> np.ndarray:
        """(C, H, W) raster -> (gh*gw, C*256) normalized patches in row-major grid order."""
        mean, std = self.pixel_stats(modality)
        x = np.asarray(raster, np.float64)
        if modality in self.config.pixel_log_scale:
            x = default_modalities()[modality].to_model_units(x)
        return patchify((x - mean[:, None, None]) / std[:, None, None]).astype(np.float32)

    # -- positional helpers -----------------------------------------------
    def _positions(self, mods_are_seq: torch.Tensor, pos: torch.Tensor, row, col, seq) -> torch.Tensor:
        g = self.config.grid_size
        r = (pos // g).clamp(0, g - 1)
        cc = (pos % g).clamp(0, g - 1)
        image = row[r] + col[cc]
        sequence = seq[pos.clamp(0, self.config.max_seq_len - 1)]
        return torch.where(mods_are_seq[..., None], sequence, image)

    def _is_seq_mod(self, mod_idx: torch.Tensor) -> torch.Tensor:
        seq_ids = [self.mod_index[m] for m in self.config.sequence_modalities]
        out = torch.zeros_like(mod_idx, dtype=torch.bool)
        for s in seq_ids:
            out |= mod_idx == s
        return out

    # -- encoder ------------------------------------------------------------
    def embed_inputs(self, batch: InputBatch) -> torch.Tensor:
        """Unit embeddings (B, L, dim): value + position + arm; zeros at padding."""
        b, length = batch.arm.shape
        dtype = self.register.dtype
        emb = torch.zeros((b, length, self.config.dim), dtype=dtype)
        if length == 0:
            return emb
        arms = self.config.arms
        for a, (m, scale) in enumerate(arms):
            sel = batch.arm == a
            if not bool(sel.any()):
                continue
            if scale == "token":
                vals = self.enc_tok[m](batch.token[sel])
            else:
                vals = self.enc_pix[m](batch.patches[m][batch.patch_index[sel]].to(dtype))
            emb = emb.masked_scatter(sel[..., None], vals)
        seq_arm = torch.tensor(
            [s == "token" and m in self.config.sequence_modalities for m, s in arms] + [False]
        )
        arm = batch.arm.clamp_min(0)
        is_seq = seq_arm[torch.where(batch.pad, torch.full_like(arm, len(arms)), arm)]
        pos = self._positions(is_seq, batch.pos, self.enc_row, self.enc_col, self.enc_seq)
        emb = emb + pos + self.enc_arm[arm]
        return emb.masked_fill(batch.pad[..., None], 0.0)

    def encode(self, batch: InputBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """Encoder states (B, 1+L, dim) with the register first, and the padding mask."""
        x = self.embed_inputs(batch)
        b = x.shape[0]
        x = torch.cat([self.register.expand(b, 1, -1), x], dim=1)
        pad = torch.cat([torch.zeros((b, 1), dtype=torch.bool), batch.pad], dim=1)
        allowed = (~pad)[:, None, :].expand(b, x.shape[1], x.shape[1])
        for block in self.encoder:
            x = block(x, allowed)
        return self.enc_norm(x), pad

    # -- decoder ------------------------------------------------------------
    def embed_queries(self, q: QueryBatch) -> torch.Tensor:
        b, n = q.mod.shape
        dtype = self.register.dtype
        mod = q.mod.clamp_min(0)
        is_seq = self._is_seq_mod(q.mod)
        emb = self.dec_mask.expand(b, n, -1).to(dtype)
        for m in self.config.sequence_modalities:
            sel = q.mod == self.mod_index[m]
            if bool(sel.any()):
                emb = emb.masked_scatter(sel[..., None], self.dec_tok[m](q.prev[sel]))
        emb = emb + self._positions(is_seq, q.pos, self.dec_row, self.dec_col, self.dec_seq) + self.dec_mod[mod]
        return emb.masked_fill(q.pad[..., None], 0.0)

    def query_mask(self, q: QueryBatch) -> torch.Tensor:
        """(B, Q, Q) allowed-attention mask: same modality only, causal for sequences."""
        b, n = q.mod.shape
        same = q.mod[:, :, None] == q.mod[:, None, :]
        is_seq = self._is_seq_mod(q.mod)
        causal = q.pos[:, None, :] <= q.pos[:, :, None]
        allowed = same & (~is_seq[:, :, None] | causal)
        eye = torch.eye(n, dtype=torch.bool)[None]
        allowed = allowed & ~q.pad[:, None, :]
        return allowed | eye

    def decode(self, enc: torch.Tensor, enc_pad: torch.Tensor, q: QueryBatch) -> torch.Tensor:
        x = self.embed_queries(q)
        b, n, _ = x.shape
        self_allowed = self.query_mask(q)
        cross_allowed = (~enc_pad)[:, None, :].expand(b, n, enc.shape[1])
        for block in self.decoder:
            x = block(x, self_allowed, enc, cross_allowed)
        return self.dec_norm(x)

    def logits(self, hidden: torch.Tensor, q: QueryBatch) -> Dict[str, torch.Tensor]:
        """modality -> (n_queries_of_modality, vocab) in row-major (batch, slot) order."""
        out = {}
        for m, i in self.mod_index.items():
            sel = q.mod == i
            if bool(sel.any()):
                out[m] = self.heads[m](hidden[sel])
        return out

    def targets(self, q: QueryBatch) -> Dict[str, torch.Tensor]:
        return {m: q.target[q.mod == i] for m, i in self.mod_index.items() if bool((q.mod == i).any())}

    def forward(self, inputs: InputBatch, queries: QueryBatch) -> Dict[str, torch.Tensor]:
        if queries.mod.numel() == 0 or bool(queries.pad.all()):
            raise InvalidArgumentError("forward needs at least one query")
        enc, pad = self.encode(inputs)
        return self.logits(self.decode(enc, pad, queries), queries)

    def loss(self, inputs: InputBatch, queries: QueryBatch) -> torch.Tensor:
        return multi_ce_loss(self(inputs, queries), self.targets(queries))


def patchify(raster: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (gh*gw, C*16*16), grid positions in row-major order."""
    c, h, w = raster.shape
    if h % PATCH or w % PATCH:
        raise InvalidArgumentError(f"spatial dims {(h, w)} not divisible by {PATCH}")
    gh, gw = h // PATCH, w // PATCH
    x = raster.reshape(c, gh, PATCH, gw, PATCH).transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, c * PATCH * PATCH)
