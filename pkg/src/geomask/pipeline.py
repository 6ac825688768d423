"""Glue between modules: everything the CLI, demos and tests share."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .backbone import BackboneConfig, BackboneModel
from .config import RunConfig
from .errors import InvalidArgumentError, MissingInputError
from .pretrain import TokenizedCorpus, build_corpus, default_backbone_config
from .synth import IMAGE_MODALITIES, LULC_CLASSES, WATER, AlignedSample, ModalitySpec, default_modalities
from .text import TextVocab, build_vocab
from .tokenizer import TokenizerConfig, TokenizerModel, load_tokenizer, save_tokenizer, train_tokenizer

logger = logging.getLogger(__name__)

TASKS = ("water", "lulc")


def split_samples(samples: Sequence[AlignedSample], val_fraction: float) -> Tuple[list, list]:
    """Deterministic head/tail split; the last ``val_fraction`` goes to validation."""
    samples = list(samples)
    n_val = int(round(len(samples) * val_fraction))
    if len(samples) > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), len(samples) - 1)
    return samples[: len(samples) - n_val], samples[len(samples) - n_val :]


def tokenizer_config(cfg: RunConfig, spec: ModalitySpec) -> TokenizerConfig:
    t = cfg.tokenizers
    levels = t.categorical_levels if spec.is_categorical else t.levels
    return TokenizerConfig(
        levels=tuple(levels), quantizer=t.quantizer, unit_sphere_normalize=t.unit_sphere_normalize,
        ema_decay=t.ema_decay, enc_dim=t.enc_dim, enc_depth=t.enc_depth, dec_dim=t.dec_dim,
        dec_blocks=t.dec_blocks, epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, grad_clip=t.grad_clip,
        hflip=t.hflip, val_steps=t.val_steps, seed=cfg.module_seed("tokenizer", spec.name),
    )


def train_tokenizers(
    samples: Sequence[AlignedSample], cfg: RunConfig, modalities: Sequence[str] = IMAGE_MODALITIES
) -> Dict[str, TokenizerModel]:
    specs = default_modalities()
    out = {}
    for m in modalities:
        if m not in specs or specs[m].kind != "image":
            raise InvalidArgumentError(f"no image modality named {m!r}")
        out[m] = train_tokenizer(samples, specs[m], tokenizer_config(cfg, specs[m]))
    return out


def save_tokenizers(tokenizers: Mapping[str, TokenizerModel], directory) -> None:
    for m, tok in tokenizers.items():
        save_tokenizer(tok, Path(directory) / f"tokenizer_{m}.pt")


def load_tokenizers(path) -> Dict[str, TokenizerModel]:
    """Load one ``tokenizer_<modality>.pt`` file or every such file in a directory."""
    path = Path(path)
    if path.is_file():
        tok = load_tokenizer(path)
        return {tok.spec.name: tok}
    files = sorted(path.glob("tokenizer_*.pt")) if path.is_dir() else []
    if not files:
        raise MissingInputError(f"no tokenizer checkpoints at {path}")
    out = {}
    for f in files:
        tok = load_tokenizer(f)
        out[tok.spec.name] = tok
    return out


def vocab_sizes(tokenizers: Mapping[str, TokenizerModel], vocab: Optional[TextVocab]) -> Dict[str, int]:
    sizes = {m: tok.vocab_size for m, tok in tokenizers.items()}
    if vocab is not None:
        sizes["caption"] = len(vocab)
        sizes["geolocation"] = len(vocab)
    return sizes


def backbone_config(cfg: RunConfig, corpus: TokenizedCorpus, sizes: Mapping[str, int]) -> BackboneConfig:
    b = cfg.backbone
    return default_backbone_config(
        corpus, sizes, dim=b.dim, depth_encoder=b.depth_encoder, depth_decoder=b.depth_decoder,
        heads=b.heads, mlp_ratio=b.mlp_ratio,
    )


def segmentation_label(sample: AlignedSample, task: str) -> np.ndarray:
    lulc = sample.rasters["lulc"][0].astype(np.int64)
    if task == "water":
        return (lulc == WATER).astype(np.int64)
    if task == "lulc":
        return lulc
    raise InvalidArgumentError(f"unknown segmentation task {task!r}; choose from {TASKS}")


def task_classes(task: str) -> int:
    return 2 if task == "water" else len(LULC_CLASSES)


def segmentation_dataset(
    samples: Sequence[AlignedSample],
    inputs: Sequence[str],
    task: str,
    tokenizers: Optional[Mapping[str, TokenizerModel]] = None,
    model: Optional[BackboneModel] = None,
) -> List[Tuple[Dict[str, object], np.ndarray]]:
    """(inputs, label) pairs. Modalities with a pixel arm enter as rasters,
    others as token grids (requires their tokenizer)."""
    from .tokenizer import encode_batch

    pixel = set(model.config.pixel_channels) if model is not None else set()
    token_grids = {}
    for m in inputs:
        if m not in pixel:
            if not tokenizers or m not in tokenizers:
                raise InvalidArgumentError(f"{m!r} needs a tokenizer to be used as input")
            token_grids[m] = encode_batch(tokenizers[m], np.stack([s.rasters[m] for s in samples]))
    out = []
    for i, s in enumerate(samples):
        inp = {m: (s.rasters[m] if m in pixel else token_grids[m][i]) for m in inputs}
        out.append((inp, segmentation_label(s, task)))
    return out


def sample_inputs(
    sample: AlignedSample,
    modalities: Sequence[str],
    model: BackboneModel,
    tokenizers: Optional[Mapping[str, TokenizerModel]] = None,
    vocab: Optional[TextVocab] = None,
) -> Dict[str, object]:
    """Generation inputs for one sample: rasters for pixel arms, tokens otherwise."""
    from .text import encode_geolocation, encode_text
    from .tokenizer import encode_image

    out: Dict[str, object] = {}
    for m in modalities:
        if m in model.config.pixel_channels:
            out[m] = sample.rasters[m]
        elif m == "geolocation":
            out[m] = np.array(encode_geolocation(vocab, *sample.geolocation))
        elif m == "caption":
            out[m] = np.array(encode_text(vocab, sample.caption)[1:])
        else:
            if not tokenizers or m not in tokenizers:
                raise InvalidArgumentError(f"{m!r} needs a tokenizer to be used as input")
            out[m] = encode_image(tokenizers[m], sample.rasters[m])
    return out
