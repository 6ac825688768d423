"""Finite-scalar quantization and a vector-quantization alternative.

Each latent dimension ``i`` is squashed with a shifted tanh into an interval
that rounds to exactly ``L_i`` integers ``{-floor((L_i-1)/2), ..., ceil((L_i-1)/2)}``.
Odd levels use the plain symmetric form ``((L-1)/2) * tanh(z)``; even levels
need a half-unit offset, otherwise only ``L-1`` integers are reachable.
Code ``i`` of a quantized vector is ``q_i + floor((L_i-1)/2)`` and the
token id is the mixed-radix number with the first dimension least
significant.
"""

from __future__ import annotations

import math
from typing import Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError

DEFAULT_LEVELS = (8, 8, 8, 6, 5)
LULC_LEVELS = (8, 8, 8, 8)
_EPS = 1e-3


def _levels_tensor(levels, like: torch.Tensor = None) -> torch.Tensor:
    levels = torch.as_tensor(list(levels), dtype=torch.float64 if like is None else like.dtype)
    if like is not None:
        levels = levels.to(like.device)
    if levels.ndim != 1 or len(levels) == 0 or bool((levels < 2).any()):
        raise InvalidArgumentError(f"levels must be a non-empty list of ints >= 2, got {levels.tolist()}")
    return levels


def _check_dim(z: torch.Tensor, levels: Sequence[int]):
    if z.shape[-1] != len(levels):
        raise InvalidArgumentError(f"latent dimension {z.shape[-1]} != number of levels {len(levels)}")


def _offsets(levels) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    half = (levels - 1) / 2 * (1 - _EPS)
    offset = torch.where(levels % 2 == 0, torch.full_like(levels, 0.5), torch.zeros_like(levels))
    # L = 2 has half < offset; cap the ratio so z = 0 still lands in code 0
    shift = torch.atanh((offset / half).clamp(max=1 - 1e-6))
    return half, offset, shift


def fsq_bound(z, levels: Sequence[int] = DEFAULT_LEVELS) -> torch.Tensor:
    """Smoothly bound ``z`` (..., d) so that rounding yields exactly L_i values per dim."""
    z = torch.as_tensor(z)
    if not z.is_floating_point():
        z = z.to(torch.float32)
    _check_dim(z, levels)
    half, offset, shift = _offsets(_levels_tensor(levels, z))
    return half * torch.tanh(z - shift) + offset


def round_ste(x: torch.Tensor) -> torch.Tensor:
    """Round with a straight-through (identity) gradient."""
    return x + (torch.round(x) - x).detach()


def fsq_quantize(z, levels: Sequence[int] = DEFAULT_LEVELS) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(quantized, codes)`` where ``quantized`` holds integers (as floats).

    The gradient of ``quantized`` w.r.t. ``z`` is the gradient of :func:`fsq_bound`.
    """
    bounded = fsq_bound(z, levels)
    quantized = round_ste(bounded)
    lv = _levels_tensor(levels, bounded)
    codes = (quantized.detach() + torch.floor((lv - 1) / 2)).to(torch.int64)
    return quantized, codes


def codebook_size(levels: Sequence[int]) -> int:
    return int(math.prod(int(l) for l in levels))


def _basis(levels: Sequence[int]) -> torch.Tensor:
    basis = [1]
    for l in levels[:-1]:
        basis.append(basis[-1] * int(l))
    return torch.tensor(basis, dtype=torch.int64)


def codes_to_index(codes, levels: Sequence[int] = DEFAULT_LEVELS) -> torch.Tensor:
    """Mixed-radix id ``sum_i codes_i * prod_{j<i} L_j`` for codes of shape (..., d)."""
    codes = torch.as_tensor(codes).to(torch.int64)
    _check_dim(codes, levels)
    lv = torch.tensor([int(l) for l in levels], dtype=torch.int64)
    if bool(((codes < 0) | (codes >= lv)).any()):
        raise InvalidArgumentError("code component out of range for its level")
    return (codes * _basis(levels)).sum(-1)


def index_to_codes(index, levels: Sequence[int] = DEFAULT_LEVELS) -> torch.Tensor:
    index = torch.as_tensor(index).to(torch.int64)
    n = codebook_size(levels)
    if bool(((index < 0) | (index >= n)).any()):
        raise InvalidArgumentError(f"token id out of range [0, {n})")
    lv = torch.tensor([int(l) for l in levels], dtype=torch.int64)
    return torch.div(index[..., None], _basis(levels), rounding_mode="floor") % lv


def codes_to_quantized(codes, levels: Sequence[int] = DEFAULT_LEVELS) -> torch.Tensor:
    lv = torch.tensor([int(l) for l in levels], dtype=torch.float32)
    return torch.as_tensor(codes).to(torch.float32) - torch.floor((lv - 1) / 2)


def fsq_preimage(quantized, levels: Sequence[int] = DEFAULT_LEVELS) -> torch.Tensor:
    """A latent whose bounded value sits on (or within 0.25 of) each codeword.

    The outermost codeword of an even level is only approached asymptotically,
    so targets are pulled 0.25 inside the reachable interval.
    """
    q = torch.as_tensor(quantized, dtype=torch.float64)
    half, offset, shift = _offsets(_levels_tensor(levels))
    target = torch.clamp(q, offset - half + 0.25, offset + half - 0.25)
    return torch.atanh((target - offset) / half) + shift


class FSQuantizer(nn.Module):
    """FSQ bottleneck with an EMA estimate of code usage.

    ``forward`` returns the quantized vector rescaled to roughly [-1, 1]
    (straight-through), the token ids and a zero auxiliary loss so it is
    interchangeable with :class:`VectorQuantizer`.
    """

    def __init__(self, levels: Sequence[int] = DEFAULT_LEVELS, ema_decay: float = 0.99):
        super().__init__()
        if not 0.0 < ema_decay <= 1.0:
            raise InvalidArgumentError("ema_decay must lie in (0, 1]")
        self.levels = tuple(int(l) for l in levels)
        _levels_tensor(self.levels)
        self.dim = len(self.levels)
        self.codebook_size = codebook_size(self.levels)
        self.ema_decay = ema_decay
        self.register_buffer("usage", torch.zeros(self.codebook_size, dtype=torch.float64))
        self.register_buffer("scale", torch.tensor([max(1.0, (l - 1) / 2) for l in self.levels]))

    def forward(self, z: torch.Tensor):
        quantized, codes = fsq_quantize(z, self.levels)
        ids = codes_to_index(codes, self.levels)
        if self.training:
            self.update_usage(ids)
        return quantized / self.scale.to(quantized.dtype), ids, z.new_zeros(())

    @torch.no_grad()
    def update_usage(self, ids: torch.Tensor):
        hist = torch.bincount(ids.reshape(-1), minlength=self.codebook_size).to(torch.float64)
        hist /= hist.sum().clamp_min(1.0)
        self.usage.mul_(self.ema_decay).add_(hist, alpha=1.0 - self.ema_decay)

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        codes = index_to_codes(ids, self.levels)
        return codes_to_quantized(codes, self.levels).to(self.scale.device) / self.scale

    def perplexity(self) -> float:
        p = self.usage / self.usage.sum().clamp_min(1e-12)
        p = p[p > 0]
        return float(torch.exp(-(p * p.log()).sum()))


class VectorQuantizer(nn.Module):
    """Learned-codebook quantizer with commitment loss (van den Oord et al. style)."""

    def __init__(self, codebook_size: int, dim: int, beta: float = 0.25, ema_decay: float = 0.99):
        super().__init__()
        self.codebook_size = codebook_size
        self.dim = dim
        self.beta = beta
        self.ema_decay = ema_decay
        self.codebook = nn.Embedding(codebook_size, dim)
        nn.init.uniform_(self.codebook.weight, -1.0 / codebook_size, 1.0 / codebook_size)
        self.register_buffer("usage", torch.zeros(codebook_size, dtype=torch.float64))

    def forward(self, z: torch.Tensor):
        flat = z.reshape(-1, self.dim)
        dist = torch.cdist(flat, self.codebook.weight)
        ids = dist.argmin(-1)
        q = self.codebook(ids).view_as(z)
        loss = F.mse_loss(q, z.detach()) + self.beta * F.mse_loss(z, q.detach())
        if self.training:
            with torch.no_grad():
                hist = torch.bincount(ids, minlength=self.codebook_size).to(torch.float64)
                hist /= hist.sum().clamp_min(1.0)
                self.usage.mul_(self.ema_decay).add_(hist, alpha=1.0 - self.ema_decay)
        return z + (q - z).detach(), ids.view(z.shape[:-1]), loss

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.codebook(ids)
