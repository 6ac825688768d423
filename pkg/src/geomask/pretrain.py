"""Masked cross-modal token pretraining.

Training data is a :class:`TokenizedCorpus`: token grids of every image
modality, padded caption/geolocation id sequences and the raw rasters of the
pixel-level modalities. Each step draws its batch and masking plans from
``numpy.random.default_rng([seed, step])`` so a run resumed from a checkpoint
follows the unbroken trajectory exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .backbone import (
    BackboneConfig,
    BackboneModel,
    multi_ce_loss,
    pack_inputs,
    pack_queries,
    patchify,
    random_loss_bound,
)
from .errors import InvalidArgumentError, TrainingDivergedError
from .masking import MaskingConfig, sample_budgets, select_units
from .synth import PATCH, AlignedSample, default_modalities
from .text import TextVocab, encode_geolocation, encode_text
from .tokenizer import TokenizerModel, encode_batch

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CORPUS_VERSION = 1


@dataclass
class TokenizedCorpus:
    """Arrays for N samples on a G x G token grid.

    Attributes:
        tokens: image modality -> (N, G*G) token ids.
        sequences: sequence modality -> (N, S) ids, right-padded.
        lengths: sequence modality -> (N,) number of valid ids.
        pixels: pixel modality -> (N, C, H, W) rasters in physical units.
    """

    tokens: Dict[str, np.ndarray]
    sequences: Dict[str, np.ndarray]
    lengths: Dict[str, np.ndarray]
    pixels: Dict[str, np.ndarray]
    grid: Tuple[int, int]
    sample_ids: List[str]
    geolocation: np.ndarray  # (N, 2)
    pad_id: int = 0

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def modalities(self) -> List[str]:
        return list(self.tokens) + list(self.sequences)

    def capacities(self, i: int) -> Dict[str, int]:
        caps = {m: int(v.shape[1]) for m, v in self.tokens.items()}
        caps.update({m: int(self.lengths[m][i]) for m in self.sequences})
        for m in self.pixels:
            caps.setdefault(m, self.grid[0] * self.grid[1])
        return caps

    def subset(self, idx) -> "TokenizedCorpus":
        idx = np.asarray(idx)
        return TokenizedCorpus(
            {m: v[idx] for m, v in self.tokens.items()},
            {m: v[idx] for m, v in self.sequences.items()},
            {m: v[idx] for m, v in self.lengths.items()},
            {m: v[idx] for m, v in self.pixels.items()},
            self.grid,
            [self.sample_ids[i] for i in idx],
            self.geolocation[idx],
            self.pad_id,
        )

    def save(self, path) -> None:
        arrays = {"_version": np.array(CORPUS_VERSION), "_grid": np.array(self.grid), "_pad": np.array(self.pad_id)}
        arrays["_ids"] = np.array(self.sample_ids)
        arrays["_geo"] = self.geolocation
        for prefix, d in (("tok", self.tokens), ("seq", self.sequences), ("len", self.lengths), ("pix", self.pixels)):
            for m, v in d.items():
                arrays[f"{prefix}:{m}"] = v
        np.savez(Path(path), **arrays)

    @classmethod
    def load(cls, path) -> "TokenizedCorpus":
        with np.load(Path(path)) as z:
            if int(z["_version"]) != CORPUS_VERSION:
                raise InvalidArgumentError(f"{path}: unsupported corpus version")
            parts: Dict[str, dict] = {"tok": {}, "seq": {}, "len": {}, "pix": {}}
            for key in z.files:
                if ":" in key:
                    prefix, m = key.split(":", 1)
                    parts[prefix][m] = z[key]
            return cls(
                parts["tok"], parts["seq"], parts["len"], parts["pix"],
                tuple(int(g) for g in z["_grid"]), [str(s) for s in z["_ids"]], z["_geo"], int(z["_pad"]),
            )


def build_corpus(
    samples: Sequence[AlignedSample],
    tokenizers: Mapping[str, TokenizerModel],
    vocab: Optional[TextVocab] = None,
    pixel_modalities: Sequence[str] = ("optical", "radar", "dem"),
    caption_max_len: int = 24,
) -> TokenizedCorpus:
    """Tokenize every image modality with its tokenizer and every text field with ``vocab``."""
    samples = list(samples)
    if not samples:
        raise InvalidArgumentError("empty dataset")
    h, w = samples[0].shape
    grid = (h // PATCH, w // PATCH)
    tokens = {}
    for m, tok in tokenizers.items():
        rasters = np.stack([s.rasters[m] for s in samples])
        tokens[m] = encode_batch(tok, rasters).reshape(len(samples), -1)
    pixels = {m: np.stack([s.rasters[m] for s in samples]).astype(np.float32) for m in pixel_modalities}
    sequences, lengths = {}, {}
    pad = 0
    if vocab is not None:
        pad = vocab.pad_id
        caps = np.full((len(samples), caption_max_len), pad, dtype=np.int64)
        cap_len = np.zeros(len(samples), dtype=np.int64)
        for i, s in enumerate(samples):
            ids = encode_text(vocab, s.caption)[1:]  # drop BOS; the decoder starts from START
            ids = ids[: caption_max_len - 1] + [vocab.eos_id] if len(ids) > caption_max_len else ids
            caps[i, : len(ids)] = ids
            cap_len[i] = len(ids)
        sequences["caption"], lengths["caption"] = caps, cap_len
        geo = np.array([encode_geolocation(vocab, *s.geolocation) for s in samples], dtype=np.int64)
        sequences["geolocation"], lengths["geolocation"] = geo, np.full(len(samples), 2, dtype=np.int64)
    return TokenizedCorpus(
        tokens, sequences, lengths, pixels, grid,
        [s.sample_id for s in samples],
        np.array([s.geolocation for s in samples], dtype=np.float64),
        pad,
    )


def pixel_statistics(corpus: TokenizedCorpus, log_scale: Sequence[str] = ()) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Per-channel mean and std of every pixel modality (in dB for ``log_scale`` ones)."""
    specs = default_modalities()
    out = {}
    for m, x in corpus.pixels.items():
        x = x.astype(np.float64)
        if m in log_scale:
            x = specs[m].to_model_units(x)
        out[m] = (x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)))
    return out


def default_backbone_config(corpus: TokenizedCorpus, vocab_sizes: Mapping[str, int], **overrides) -> BackboneConfig:
    token_vocab = {m: int(vocab_sizes[m]) for m in corpus.modalities}
    pixel_channels = {m: int(x.shape[1]) for m, x in corpus.pixels.items()}
    overrides.setdefault("grid_size", max(corpus.grid))
    specs = default_modalities()
    overrides.setdefault("pixel_log_scale", [m for m in pixel_channels if m in specs and specs[m].log_scale])
    if corpus.sequences:
        overrides.setdefault("max_seq_len", max(int(v.shape[1]) for v in corpus.sequences.values()))
    return BackboneConfig(token_vocab=token_vocab, pixel_channels=pixel_channels, **overrides)


def init_backbone(config: BackboneConfig, corpus: TokenizedCorpus, seed: int = 0) -> BackboneModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = BackboneModel(config)
    for m, (mean, std) in pixel_statistics(corpus, config.pixel_log_scale).items():
        if m in config.pixel_channels:
            model.set_pixel_stats(m, mean, std)
    return model


# -- examples -------------------------------------------------------------


def _value(corpus: TokenizedCorpus, m: str, i: int, p: int) -> int:
    if m in corpus.tokens:
        return int(corpus.tokens[m][i, p])
    return int(corpus.sequences[m][i, p])


def example_units(
    model: BackboneModel, corpus: TokenizedCorpus, i: int, inputs: Mapping[Tuple[str, str], np.ndarray],
    patch_cache: Optional[dict] = None,
) -> List[tuple]:
    units = []
    for (m, scale), positions in inputs.items():
        if scale == "pixel":
            key = (m, i)
            if patch_cache is not None and key in patch_cache:
                patches = patch_cache[key]
            else:
                patches = model.normalize_patches(m, corpus.pixels[m][i])
                if patch_cache is not None:
                    patch_cache[key] = patches
            units.extend((m, "pixel", int(p), patches[p]) for p in positions)
        else:
            units.extend((m, "token", int(p), _value(corpus, m, i, p)) for p in positions)
    return units


def example_queries(corpus: TokenizedCorpus, i: int, targets: Mapping[str, np.ndarray]) -> List[tuple]:
    queries = []
    for m, positions in targets.items():
        seq = m in corpus.sequences
        for p in positions:
            p = int(p)
            prev = None if (not seq or p == 0) else _value(corpus, m, i, p - 1)
            queries.append((m, p, prev, _value(corpus, m, i, p)))
    return queries


def collate(model: BackboneModel, corpus: TokenizedCorpus, indices, plans, patch_cache=None):
    units = [example_units(model, corpus, int(i), plan.inputs, patch_cache) for i, plan in zip(indices, plans)]
    queries = [example_queries(corpus, int(i), plan.targets) for i, plan in zip(indices, plans)]
    return pack_inputs(model.config, units), pack_queries(model.config, queries)


def masking_for(config: MaskingConfig, model_config: BackboneConfig, corpus: TokenizedCorpus) -> MaskingConfig:
    """Restrict a masking config to arms/modalities present in both model and corpus."""
    arms = set(model_config.arms)
    have = set(corpus.modalities) | set(corpus.pixels)
    return MaskingConfig(
        input_budget=config.input_budget,
        target_budget=config.target_budget,
        alpha_input=config.alpha_input,
        alpha_target=config.alpha_target,
        input_arms=[a for a in config.input_arms if tuple(a) in arms and a[0] in have],
        target_modalities=[m for m in config.target_modalities if m in model_config.token_vocab and m in have],
        sequence_modalities=config.sequence_modalities,
    )


def sample_batch(corpus: TokenizedCorpus, masking: MaskingConfig, batch_size: int, rng: np.random.Generator):
    n = len(corpus)
    indices = rng.choice(n, size=min(batch_size, n), replace=False)
    plans = []
    for i in indices:
        caps = corpus.capacities(int(i))
        budgets = sample_budgets(masking, rng, caps)
        plans.append(select_units(caps, budgets, rng, masking.sequence_modalities))
    return indices, plans


# -- training -------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 5e-4
    min_lr_ratio: float = 0.1
    warmup_steps: int = 50
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    val_every: int = 100
    val_samples: int = 64
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidArgumentError("steps must be >= 0 and batch_size >= 1")


def lr_at(step: int, cfg: PretrainConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))


@torch.no_grad()
def validation_ce(
    model: BackboneModel,
    corpus: TokenizedCorpus,
    masking: MaskingConfig,
    seed: int = 0,
    max_samples: int = 64,
    batch_size: int = 32,
) -> Dict[str, float]:
    """Per-modality CE: every position of the target modality is predicted.

    Inputs are a Dirichlet-budgeted draw over the *other* modalities' arms, so
    the number measures cross-modal prediction. Plans depend only on ``seed``.
    """
    was = model.training
    model.eval()
    n = min(len(corpus), max_samples)
    out = {}
    for t_idx, m in enumerate(masking.target_modalities):
        arms = [a for a in masking.input_arms if a[0] != m]
        if not arms:
            continue
        cfg = MaskingConfig(
            input_budget=masking.input_budget, target_budget=1,
            alpha_input=masking.alpha_input if not isinstance(masking.alpha_input, Mapping) else 1.0,
            alpha_target=1.0, input_arms=arms, target_modalities=[m],
            sequence_modalities=masking.sequence_modalities,
        )
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            indices = list(range(start, min(n, start + batch_size)))
            plans = []
            for i in indices:
                rng = np.random.default_rng([seed, t_idx, i])
                caps = corpus.capacities(i)
                inputs, _ = sample_budgets(cfg, rng, caps)
                plan = select_units(caps, (inputs, {}), rng, cfg.sequence_modalities)
                plan.targets = {m: np.arange(caps[m])}
                plans.append(plan)
            ib, qb = collate(model, corpus, indices, plans)
            logits = model(ib, qb)[m]
            targets = model.targets(qb)[m]
            total += float(nn.functional.cross_entropy(logits, targets, reduction="sum"))
            count += int(targets.numel())
        out[m] = total / max(count, 1)
    model.train(was)
    return out


@dataclass
class PretrainState:
    model: BackboneModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: Dict[str, list] = field(default_factory=lambda: {"step": [], "train_loss": [], "lr": [], "val": []})


def make_optimizer(model: BackboneModel, cfg: PretrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.ndim >= 2 and "enc_" not in name and "dec_" not in name else no_decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr, betas=(0.9, 0.95), foreach=True,
    )


def pretrain(
    train: TokenizedCorpus,
    val: Optional[TokenizedCorpus],
    masking: MaskingConfig,
    backbone: BackboneConfig,
    cfg: PretrainConfig,
    resume: Optional[PretrainState] = None,
    checkpoint_dir=None,
    stop_at: Optional[int] = None,
) -> PretrainState:
    """Train (or continue training) a backbone.

    Args:
        train, val: tokenized corpora; ``val`` may be None.
        masking: budgets and Dirichlet parameters.
        backbone: model shape; ignored when resuming.
        cfg: optimisation schedule.
        resume: state returned by an earlier call or :func:`load_checkpoint`.
        checkpoint_dir: if given, ``step_<n>.pt`` is written every
            ``cfg.checkpoint_every`` steps and ``last.pt`` at the end.
        stop_at: stop after this many steps (the LR schedule still follows
            ``cfg.steps``); used to simulate interruptions.

    Raises:
        TrainingDivergedError: when the training loss becomes non-finite.
    """
    if resume is None:
        model = init_backbone(backbone, train, cfg.seed)
        state = PretrainState(model, make_optimizer(model, cfg))
    else:
        state = resume
    model = state.model
    masking = masking_for(masking, model.config, train)
    end = cfg.steps if stop_at is None else min(cfg.steps, stop_at)
    patch_cache: dict = {}
    model.train()
    while state.step < end:
        step = state.step
        rng = np.random.default_rng([cfg.seed, step])
        indices, plans = sample_batch(train, masking, cfg.batch_size, rng)
        ib, qb = collate(model, train, indices, plans, patch_cache)
        lr = lr_at(step, cfg)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        loss = model.loss(ib, qb)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        state.optimizer.step()
        state.step += 1
        state.history["step"].append(step)
        state.history["train_loss"].append(value)
        state.history["lr"].append(lr)
        if val is not None and cfg.val_every and state.step % cfg.val_every == 0:
            ce = validation_ce(model, val, masking, cfg.seed, cfg.val_samples)
            state.history["val"].append({"step": state.step, "ce": ce})
            logger.info("step %d loss %.4f val %s", state.step, value, {k: round(v, 3) for k, v in ce.items()})
        if checkpoint_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step_{state.step}.pt", state, masking, cfg)
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "last.pt", state, masking, cfg)
    model.eval()
    return state


def save_checkpoint(path, state: PretrainState, masking: Optional[MaskingConfig] = None, cfg: Optional[PretrainConfig] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "backbone",
        "config": state.model.config.to_dict(),
        "state_dict": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "history": state.history,
    }
    if masking is not None:
        payload["masking"] = {k: (list(map(list, v)) if k == "input_arms" else v) for k, v in asdict(masking).items()}
    if cfg is not None:
        payload["pretrain"] = asdict(cfg)
    torch.save(payload, path)


def load_checkpoint(path, cfg: Optional[PretrainConfig] = None) -> PretrainState:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    if ckpt.get("kind") != "backbone" or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"{path} is not a version-{CHECKPOINT_VERSION} backbone checkpoint")
    model = BackboneModel(BackboneConfig.from_dict(ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    cfg = cfg or PretrainConfig(**ckpt.get("pretrain", {}))
    opt = make_optimizer(model, cfg)
    opt.load_state_dict(ckpt["optimizer"])
    model.eval()
    return PretrainState(model, opt, int(ckpt["step"]), ckpt["history"])


def load_backbone(path) -> BackboneModel:
    return load_checkpoint(path).model


# -- features ---------------------------------------------------------------


def input_units(model: BackboneModel, inputs: Mapping[str, object]) -> List[tuple]:
    """Every position of every given modality.

    ``inputs`` maps modality -> raster (C, H, W) for pixel arms, token grid /
    flat ids for token arms, or a 1-D id sequence for sequence modalities.
    """
    cfg = model.config
    units = []
    for m, value in inputs.items():
        arr = value.ids if hasattr(value, "ids") else np.asarray(value)
        if m in cfg.sequence_modalities:
            units.extend((m, "token", p, int(t)) for p, t in enumerate(arr.reshape(-1)))
        elif arr.ndim == 3 and m in cfg.pixel_channels:
            patches = model.normalize_patches(m, arr)
            units.extend((m, "pixel", p, patches[p]) for p in range(len(patches)))
        elif arr.ndim == 3:
            raise InvalidArgumentError(f"model has no pixel input for {m!r}; pass its token grid instead")
        elif m in cfg.token_vocab:
            flat = arr.reshape(-1)
            units.extend((m, "token", p, int(t)) for p, t in enumerate(flat))
        else:
            raise InvalidArgumentError(f"model cannot take {m!r} as input")
    return units


@torch.no_grad()
def extract_embeddings(model: BackboneModel, inputs: Mapping[str, object], modalities: Optional[Sequence[str]] = None) -> np.ndarray:
    """Encoder features on the token grid, shape (gh, gw, dim).

    All given inputs are encoded jointly; the returned map averages, per grid
    position, the encoder outputs of the units of ``modalities`` (default:
    every image-like input) at that position.
    """
    cfg = model.config
    modalities = list(inputs) if modalities is None else list(modalities)
    for m in modalities:
        if m not in inputs:
            raise InvalidArgumentError(f"modality {m!r} not among the inputs")
        if m in cfg.sequence_modalities:
            raise InvalidArgumentError(f"{m!r} has no spatial layout")
    was = model.training
    model.eval()
    units = input_units(model, inputs)
    ib = pack_inputs(cfg, [units])
    enc, _ = model.encode(ib)
    feats = enc[0, 1:]
    arms = cfg.arms
    keep = torch.tensor([arms[a][0] in modalities for a in ib.arm[0].tolist()], dtype=torch.bool)
    pos = ib.pos[0][keep]
    f = feats[keep]
    grid_side = _grid_side(inputs, modalities)
    total = torch.zeros((grid_side[0] * grid_side[1], cfg.dim), dtype=f.dtype)
    count = torch.zeros(grid_side[0] * grid_side[1], dtype=f.dtype)
    total.index_add_(0, pos, f)
    count.index_add_(0, pos, torch.ones_like(pos, dtype=f.dtype))
    model.train(was)
    return (total / count.clamp_min(1)[:, None]).reshape(grid_side[0], grid_side[1], cfg.dim).numpy()


def _grid_side(inputs, modalities) -> Tuple[int, int]:
    for m in modalities:
        v = inputs[m]
        arr = v.ids if hasattr(v, "ids") else np.asarray(v)
        if arr.ndim == 3:
            return arr.shape[1] // PATCH, arr.shape[2] // PATCH
        if arr.ndim == 2:
            return arr.shape
        side = int(round(math.sqrt(arr.size)))
        return side, side
    raise InvalidArgumentError("no spatial modality requested")


@torch.no_grad()
def batch_embeddings(model: BackboneModel, corpus: TokenizedCorpus, inputs: Sequence[Tuple[str, str]], indices=None, batch_size: int = 64) -> np.ndarray:
    """Encoder features (N, G*G, dim) averaged over the given arms at each position."""
    was = model.training
    model.eval()
    indices = range(len(corpus)) if indices is None else indices
    indices = list(indices)
    cells = corpus.grid[0] * corpus.grid[1]
    out = []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        units = [
            example_units(model, corpus, i, {tuple(a): np.arange(cells) for a in inputs})
            for i in chunk
        ]
        ib = pack_inputs(model.config, units)
        enc, pad = model.encode(ib)
        feats = enc[:, 1:]
        total = torch.zeros((len(chunk), cells, model.config.dim), dtype=feats.dtype)
        count = torch.zeros((len(chunk), cells), dtype=feats.dtype)
        valid = ~ib.pad
        b_idx = torch.arange(len(chunk))[:, None].expand_as(ib.pos)
        total.index_put_((b_idx[valid], ib.pos[valid]), feats[valid], accumulate=True)
        count.index_put_((b_idx[valid], ib.pos[valid]), torch.ones_like(ib.pos[valid], dtype=feats.dtype), accumulate=True)
        out.append((total / count.clamp_min(1)[..., None]).numpy())
    model.train(was)
    return np.concatenate(out) if out else np.zeros((0, cells, model.config.dim), dtype=np.float32)
