"""Image tokenizers: patch transformer encoder, FSQ bottleneck, diffusion decoder.

The encoder maps every 16x16 patch to a ``latent_dim`` vector (tanh MLP head),
the quantizer turns it into one token id, and a small patched denoiser
reconstructs the image from noise conditioned additively on the quantized
codes. Rasters enter and leave in physical units; internally they are
scaled to [-1, 1] (categorical rasters become +-1 one-hot planes).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .diffusion import DiffusionSchedule, sample_x0, timestep_embedding
from .errors import InvalidArgumentError, TrainingDivergedError
from .fsq import DEFAULT_LEVELS, LULC_LEVELS, FSQuantizer, VectorQuantizer, codebook_size
from .synth import PATCH, AlignedSample, ModalitySpec

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TokenGrid:
    """Token ids of one image modality, one id per 16x16 patch."""

    modality: str
    ids: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.vocab_size):
            raise InvalidArgumentError(f"{self.modality}: token id outside [0, {self.vocab_size})")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.ids.shape


@dataclass
class TokenizerConfig:
    levels: Tuple[int, ...] = DEFAULT_LEVELS
    quantizer: str = "fsq"  # "fsq" or "vq"
    unit_sphere_normalize: bool = False
    ema_decay: float = 0.99
    enc_dim: int = 64
    enc_depth: int = 1
    enc_heads: int = 4
    dec_dim: int = 64
    dec_blocks: int = 2
    decoder_patch: int = 4
    max_grid: int = 32
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 4
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    hflip: bool = True
    val_fraction: float = 0.1
    val_steps: int = 4
    max_val_samples: int = 64
    seed: int = 0

    def __post_init__(self):
        self.levels = tuple(int(l) for l in self.levels)
        if self.quantizer not in ("fsq", "vq"):
            raise InvalidArgumentError(f"unknown quantizer {self.quantizer!r}")
        if any(l < 2 for l in self.levels):
            raise InvalidArgumentError("every FSQ level must be >= 2")
        if PATCH % self.decoder_patch:
            raise InvalidArgumentError("decoder_patch must divide 16")

    @property
    def latent_dim(self) -> int:
        return len(self.levels)

    @classmethod
    def for_modality(cls, spec: ModalitySpec, **overrides) -> "TokenizerConfig":
        levels = LULC_LEVELS if spec.is_categorical else DEFAULT_LEVELS
        overrides.setdefault("levels", levels)
        return cls(**overrides)


class PatchEncoder(nn.Module):
    def __init__(self, in_channels: int, dim: int, depth: int, heads: int, latent_dim: int, max_grid: int):
        super().__init__()
        self.embed = nn.Conv2d(in_channels, dim, kernel_size=PATCH, stride=PATCH)
        self.row = nn.Parameter(torch.randn(max_grid, dim) * 0.02)
        self.col = nn.Parameter(torch.randn(max_grid, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            dim, heads, dim * 2, dropout=0.0, activation="gelu", batch_first=True, norm_first=True
        )
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False) if depth else None
        self.norm = nn.LayerNorm(dim)
        # tanh MLP in front of the quantizer
        self.head = nn.Sequential(nn.Linear(dim, dim), nn.Tanh(), nn.Linear(dim, latent_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.embed(x)  # B, D, gh, gw
        b, d, gh, gw = h.shape
        h = h + (self.row[:gh, None, :] + self.col[None, :gw, :]).permute(2, 0, 1)
        h = h.flatten(2).transpose(1, 2)
        if self.blocks is not None:
            h = self.blocks(h)
        return self.head(self.norm(h)).view(b, gh, gw, -1)


class ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.GroupNorm(8, dim), nn.SiLU(), nn.Conv2d(dim, dim, 3, padding=1),
            nn.GroupNorm(8, dim), nn.SiLU(), nn.Conv2d(dim, dim, 3, padding=1),
        )

    def forward(self, x):
        return x + self.net(x)


class PatchDenoiser(nn.Module):
    """Predicts the clean image from (x_t, t) plus additive token conditioning."""

    def __init__(self, channels: int, cond_dim: int, dim: int, blocks: int, patch: int):
        super().__init__()
        self.dim = dim
        self.patch = patch
        self.inp = nn.Conv2d(channels, dim, kernel_size=patch, stride=patch)
        self.cond = nn.Linear(cond_dim, dim)
        self.time = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.blocks = nn.ModuleList(ResBlock(dim) for _ in range(blocks))
        self.out = nn.Sequential(nn.GroupNorm(8, dim), nn.SiLU(), nn.ConvTranspose2d(dim, channels, patch, stride=patch))

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # cond: B, gh, gw, cond_dim (one vector per 16x16 token)
        h = self.inp(x_t)
        c = self.cond(cond).permute(0, 3, 1, 2)
        c = F.interpolate(c, scale_factor=PATCH // self.patch, mode="nearest")
        h = h + c + self.time(timestep_embedding(t, self.dim))[:, :, None, None]
        for block in self.blocks:
            h = block(h)
        return self.out(h)


class TokenizerModel(nn.Module):
    def __init__(self, spec: ModalitySpec, config: TokenizerConfig):
        super().__init__()
        if spec.kind != "image":
            raise InvalidArgumentError(f"{spec.name} is not an image modality")
        self.spec = spec
        self.config = config
        self.n_classes = int(spec.value_range[1]) + 1 if spec.is_categorical else 0
        self.in_channels = self.n_classes if spec.is_categorical else spec.channels
        self.encoder = PatchEncoder(
            self.in_channels, config.enc_dim, config.enc_depth, config.enc_heads, config.latent_dim, config.max_grid
        )
        if config.quantizer == "fsq":
            self.quantizer = FSQuantizer(config.levels, config.ema_decay)
        else:
            self.quantizer = VectorQuantizer(codebook_size(config.levels), config.latent_dim, ema_decay=config.ema_decay)
        self.decoder = PatchDenoiser(
            self.in_channels, config.latent_dim, config.dec_dim, config.dec_blocks, config.decoder_patch
        )
        self.schedule = DiffusionSchedule(config.timesteps, config.beta_start, config.beta_end)
        self.history: Dict[str, list] = {"train_loss": [], "val_mse": []}

    @property
    def vocab_size(self) -> int:
        return self.quantizer.codebook_size

    # -- unit conversion -------------------------------------------------
    def normalize(self, raster) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(raster), dtype=torch.float32)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise InvalidArgumentError("raster must be (C, H, W) or (N, C, H, W)")
        if x.shape[1] != self.spec.channels:
            raise InvalidArgumentError(f"{self.spec.name}: expected {self.spec.channels} channels, got {x.shape[1]}")
        if x.shape[-1] % PATCH or x.shape[-2] % PATCH:
            raise InvalidArgumentError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {PATCH}")
        if self.spec.is_categorical:
            cls = x[:, 0].round().long().clamp(0, self.n_classes - 1)
            return F.one_hot(cls, self.n_classes).permute(0, 3, 1, 2).float() * 2 - 1
        if self.spec.log_scale:
            lo, hi = self.spec.value_range
            x = 10 * torch.log10(x.clamp(lo, hi))
        lo, hi = self.spec.model_range()
        return (x - lo) / (hi - lo) * 2 - 1

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        if self.spec.is_categorical:
            return x.argmax(1, keepdim=True).float()
        lo, hi = self.spec.model_range()
        y = ((x.clamp(-1, 1) + 1) / 2 * (hi - lo) + lo).clamp(lo, hi)
        if self.spec.log_scale:
            y = torch.pow(10.0, y / 10)
        return y

    # -- pieces ----------------------------------------------------------
    def conditioning(self, q: torch.Tensor) -> torch.Tensor:
        if self.config.unit_sphere_normalize:
            q = F.normalize(q, dim=-1)
        return q

    def quantize(self, x_norm: torch.Tensor):
        z = self.encoder(x_norm)
        return self.quantizer(z)

    def loss(self, x_norm: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        q, _, aux = self.quantize(x_norm)
        b = x_norm.shape[0]
        t = torch.randint(0, self.schedule.timesteps, (b,), generator=generator)
        noise = torch.randn(x_norm.shape, generator=generator)
        x_t = self.schedule.q_sample(x_norm, t, noise)
        x0_hat = self.decoder(x_t, t, self.conditioning(q))
        return F.mse_loss(x0_hat, x_norm) + aux

    @torch.no_grad()
    def encode_ids(self, x_norm: torch.Tensor) -> torch.Tensor:
        was = self.training
        self.eval()
        _, ids, _ = self.quantize(x_norm)
        self.train(was)
        return ids

    @torch.no_grad()
    def decode_ids(self, ids: torch.Tensor, num_steps: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Normalized reconstruction (N, C', H, W) from ids (N, gh, gw)."""
        ids = torch.as_tensor(ids, dtype=torch.int64)
        if ids.ndim == 2:
            ids = ids[None]
        if bool(((ids < 0) | (ids >= self.vocab_size)).any()):
            raise InvalidArgumentError(f"token id outside [0, {self.vocab_size})")
        was = self.training
        self.eval()
        cond = self.conditioning(self.quantizer.embed_ids(ids).float())
        n, gh, gw = ids.shape
        shape = (n, self.in_channels, gh * PATCH, gw * PATCH)
        out = sample_x0(lambda x, t: self.decoder(x, t, cond), self.schedule, shape, num_steps, generator)
        self.train(was)
        return out


def _as_array(dataset, modality: str) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset.astype(np.float32)
    samples = list(dataset)
    if not samples:
        raise InvalidArgumentError("empty dataset")
    if modality not in samples[0].rasters:
        raise InvalidArgumentError(f"dataset has no modality {modality!r}")
    return np.stack([s.rasters[modality] for s in samples]).astype(np.float32)


def train_tokenizer(dataset, spec: ModalitySpec, config: Optional[TokenizerConfig] = None) -> TokenizerModel:
    """Fit a tokenizer on one modality of ``dataset``.

    ``dataset`` is a sequence of :class:`AlignedSample` or an array
    (N, C, H, W) in physical units. The last ``val_fraction`` of samples is
    held out; reconstruction MSE (normalized units) on it is logged after
    every epoch in ``model.history["val_mse"]``.
    """
    config = config or TokenizerConfig.for_modality(spec)
    data = _as_array(dataset, spec.name)
    n_val = int(round(len(data) * config.val_fraction)) if len(data) > 1 else 0
    train, val = data[: len(data) - n_val], data[len(data) - n_val :][: config.max_val_samples]
    if len(train) == 0:
        raise InvalidArgumentError("no training samples")

    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = TokenizerModel(spec, config)
    gen = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    x_all = model.normalize(train)
    x_val = model.normalize(val) if len(val) else None
    step = 0
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x = x_all[idx]
            if config.hflip:
                flip = torch.as_tensor(rng.uniform(size=len(idx)) < 0.5)
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            loss = model.loss(x, gen)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            model.history["train_loss"].append(value)
            step += 1
        if x_val is not None:
            mse = validation_mse(model, x_val, config.val_steps, seed=config.seed)
            if not math.isfinite(mse):
                raise TrainingDivergedError(step, mse)
            model.history["val_mse"].append(mse)
            logger.info("%s tokenizer epoch %d: val mse %.5f", spec.name, epoch, mse)
    model.eval()
    return model


@torch.no_grad()
def validation_mse(model: TokenizerModel, x_norm: torch.Tensor, num_steps: int, seed: int = 0, batch: int = 64) -> float:
    total, count = 0.0, 0
    gen = torch.Generator().manual_seed(seed)
    for start in range(0, len(x_norm), batch):
        x = x_norm[start : start + batch]
        ids = model.encode_ids(x)
        rec = model.decode_ids(ids, num_steps, gen)
        total += float(((rec - x) ** 2).sum())
        count += x.numel()
    return total / max(count, 1)


def encode_image(model: TokenizerModel, raster) -> TokenGrid:
    """Token grid (H/16, W/16) for one raster (C, H, W) in physical units."""
    x = model.normalize(raster)
    if x.shape[0] != 1:
        raise InvalidArgumentError("encode_image takes a single raster; use encode_batch")
    return TokenGrid(model.spec.name, model.encode_ids(x)[0].numpy(), model.vocab_size)


def encode_batch(model: TokenizerModel, rasters, batch: int = 128) -> np.ndarray:
    """Token ids (N, H/16, W/16) for rasters (N, C, H, W)."""
    rasters = np.asarray(rasters)
    out = []
    for start in range(0, len(rasters), batch):
        out.append(model.encode_ids(model.normalize(rasters[start : start + batch])).numpy())
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def decode_tokens(model: TokenizerModel, grid, num_steps: int = 10, seed: int = 0) -> np.ndarray:
    """Raster (C, H, W) in physical units; categorical modalities yield class ids."""
    ids = grid.ids if isinstance(grid, TokenGrid) else np.asarray(grid)
    return decode_batch(model, ids[None], num_steps, seed)[0]


def decode_batch(model: TokenizerModel, ids, num_steps: int = 10, seed: int = 0) -> np.ndarray:
    gen = torch.Generator().manual_seed(seed)
    x = model.decode_ids(torch.as_tensor(np.asarray(ids)), num_steps, gen)
    return model.denormalize(x).numpy().astype(np.float32)


def reconstruction_report(
    model: TokenizerModel, dataset, num_steps: int = 10, seed: int = 0, batch: int = 64
) -> Dict[str, float]:
    """MAE, RMSE, SSIM and PSNR of encode->decode round trips in physical units."""
    data = _as_array(dataset, model.spec.name)
    if len(data) == 0:
        raise InvalidArgumentError("empty dataset")
    recs = []
    for start in range(0, len(data), batch):
        chunk = data[start : start + batch]
        ids = encode_batch(model, chunk)
        recs.append(decode_batch(model, ids, num_steps, seed + start))
    rec = np.concatenate(recs)
    return modality_metrics(model.spec, rec, data)


def modality_metrics(spec: ModalitySpec, pred, ref) -> Dict[str, float]:
    """Metric report in physical units; log-scale modalities are compared in dB."""
    return metrics.metric_report(spec.to_model_units(np.asarray(pred)), spec.to_model_units(np.asarray(ref)), spec.span)


def save_tokenizer(model: TokenizerModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "tokenizer",
            "modality": model.spec.to_dict(),
            "config": asdict(model.config),
            "schedule": {
                **model.schedule.to_dict(),
                "betas": torch.from_numpy(model.schedule.betas),
                "alphas_cumprod": torch.from_numpy(model.schedule.alphas_cumprod),
            },
            "history": model.history,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_tokenizer(path) -> TokenizerModel:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    if ckpt.get("kind") != "tokenizer" or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"{path} is not a version-{CHECKPOINT_VERSION} tokenizer checkpoint")
    spec = ModalitySpec.from_dict(ckpt["modality"])
    config = TokenizerConfig(**ckpt["config"])
    model = TokenizerModel(spec, config)
    model.load_state_dict(ckpt["state_dict"])
    model.history = ckpt.get("history", model.history)
    model.eval()
    return model
