"""Fine-tuning with self-generated intermediate modalities.

``tim_augment`` grows the observed input set one generated modality at a
time (each conditioned on everything gathered so far). ``tim_finetune``
trains a convolutional segmentation head on encoder features of the
augmented inputs. With no intermediate modalities the pipeline is plain
fine-tuning.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneModel, pack_inputs
from .errors import InvalidArgumentError, TrainingDivergedError
from .generation import GenerationRequest, generate_image_modality
from .metrics import iou_per_class
from .pretrain import input_units
from .seeding import derive_seed
from .synth import PATCH

logger = logging.getLogger(__name__)


@dataclass
class TimConfig:
    tim_modalities: List[str] = field(default_factory=lambda: ["lulc"])
    k: Optional[int] = None  # recursion depth; None uses every tim modality
    n_classes: int = 2
    head_channels: Tuple[int, ...] = (64, 32, 16, 16)
    freeze_backbone: bool = True
    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-3
    backbone_lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    decode_steps: Optional[int] = None
    temperature: float = 0.0
    merge: str = "mean"  # how per-modality encoder features are fused for the head

    def __post_init__(self):
        self.tim_modalities = list(self.tim_modalities)
        self.head_channels = tuple(int(c) for c in self.head_channels)
        if self.k is None:
            self.k = len(self.tim_modalities)
        if not 0 <= self.k <= len(self.tim_modalities):
            raise InvalidArgumentError(f"k must lie in [0, {len(self.tim_modalities)}]")
        if len(set(self.tim_modalities)) != len(self.tim_modalities):
            raise InvalidArgumentError("duplicate tim modalities")
        if self.n_classes < 2:
            raise InvalidArgumentError("need at least two classes")
        if not self.head_channels:
            raise InvalidArgumentError("head needs at least one block")
        if self.merge not in MERGES:
            raise InvalidArgumentError(f"merge must be one of {MERGES}")

    @property
    def active(self) -> List[str]:
        return self.tim_modalities[: self.k]


@dataclass
class AugmentedInputs:
    inputs: Dict[str, object]
    synthetic: List[str]


def tim_augment(
    model: BackboneModel, observed: Mapping[str, object], config: TimConfig, seed: int = 0
) -> AugmentedInputs:
    """x^(0) = observed; x^(k+1) = x^(k) plus the k-th generated modality."""
    current = dict(observed)
    synthetic = []
    for m in config.active:
        if m in current:
            raise InvalidArgumentError(f"tim modality {m!r} is already present")
        request = GenerationRequest(dict(current), [m], config.temperature, config.decode_steps, seed=seed)
        current[m] = generate_image_modality(model, current, m, request).ids
        synthetic.append(m)
    return AugmentedInputs(current, synthetic)


class SegHead(nn.Module):
    """Upsampling conv decoder: each block doubles resolution (4 blocks: 16x)."""

    def __init__(self, dim: int, channels: Sequence[int], n_classes: int):
        super().__init__()
        blocks = []
        c_in = dim
        for c in channels:
            blocks.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                    nn.Conv2d(c_in, c, 3, padding=1),
                    nn.GroupNorm(1, c),
                    nn.GELU(),
                    nn.Conv2d(c, c, 3, padding=1),
                    nn.GELU(),
                )
            )
            c_in = c
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv2d(c_in, n_classes, 1)

    def forward(self, feats: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
        x = self.out(self.blocks(feats))
        if tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return x


MERGES = ("mean", "concat")


def spatial_modalities(model: BackboneModel, inputs: Mapping[str, object]) -> List[str]:
    """Spatial input modalities of ``inputs`` in backbone arm order."""
    seq_mods = set(model.config.sequence_modalities)
    order = []
    for m, _ in model.config.arms:
        if m in inputs and m not in seq_mods and m not in order:
            order.append(m)
    return order


def encode_features(
    model: BackboneModel,
    inputs_list: Sequence[Mapping[str, object]],
    grid: Tuple[int, int],
    merge: str = "mean",
) -> torch.Tensor:
    """Encoder outputs per grid position for a batch of inputs.

    Args:
        merge: "mean" averages every spatial unit at a position, giving
            (B, dim, gh, gw). "concat" averages within each modality and
            stacks modalities along channels, giving (B, n_mod * dim, gh, gw).
            All examples must share the same spatial modalities.
    """
    if merge not in MERGES:
        raise InvalidArgumentError(f"merge must be one of {MERGES}")
    units = [input_units(model, inp) for inp in inputs_list]
    arms = model.config.arms
    ib = pack_inputs(model.config, units)
    enc, _ = model.encode(ib)
    feats = enc[:, 1:]
    b = len(inputs_list)
    cells = grid[0] * grid[1]
    b_idx = torch.arange(b)[:, None].expand_as(ib.pos)
    arm = torch.where(ib.pad, torch.full_like(ib.arm, len(arms)), ib.arm)
    if merge == "mean":
        groups = [[m for m, _ in arms if m not in model.config.sequence_modalities]]
    else:
        mods = spatial_modalities(model, inputs_list[0])
        if any(spatial_modalities(model, inp) != mods for inp in inputs_list[1:]):
            raise InvalidArgumentError("concat merge needs the same spatial modalities in every example")
        groups = [[m] for m in mods]
    out = []
    for group in groups:
        member = torch.tensor([a[0] in group for a in arms] + [False])
        valid = member[arm]
        total = torch.zeros((b, cells, feats.shape[-1]), dtype=feats.dtype)
        count = torch.zeros((b, cells), dtype=feats.dtype)
        total = total.index_put((b_idx[valid], ib.pos[valid]), feats[valid], accumulate=True)
        count = count.index_put((b_idx[valid], ib.pos[valid]), torch.ones_like(feats[valid][:, 0]), accumulate=True)
        out.append(total / count.clamp_min(1)[..., None])
    out = torch.cat(out, dim=-1)
    return out.transpose(1, 2).reshape(b, -1, grid[0], grid[1])


@dataclass
class TimResult:
    head: SegHead
    config: TimConfig
    history: Dict[str, list]
    backbone: Optional[BackboneModel] = None


def _grid_of(example_inputs: Mapping[str, object]) -> Tuple[int, int]:
    for v in example_inputs.values():
        arr = np.asarray(v)
        if arr.ndim == 3:
            return arr.shape[1] // PATCH, arr.shape[2] // PATCH
        if arr.ndim == 2:
            return arr.shape
    raise InvalidArgumentError("no spatial input")


def _augment_all(model, dataset, config: TimConfig):
    return [tim_augment(model, inputs, config, seed=derive_seed(config.seed, "tim", i) % (2**31)).inputs
            for i, (inputs, _) in enumerate(dataset)]


def _features(model, inputs_list, grid, merge="mean", batch=64) -> torch.Tensor:
    parts = [encode_features(model, inputs_list[s : s + batch], grid, merge) for s in range(0, len(inputs_list), batch)]
    return torch.cat(parts) if parts else torch.zeros(0)


def tim_finetune(
    model: BackboneModel,
    train: Sequence[Tuple[Mapping[str, object], np.ndarray]],
    config: TimConfig,
    val: Optional[Sequence[Tuple[Mapping[str, object], np.ndarray]]] = None,
) -> TimResult:
    """Train a segmentation head on (optionally augmented) inputs.

    Args:
        model: pretrained backbone. It is copied when ``freeze_backbone`` is
            False so the caller's model is left untouched.
        train, val: ``(inputs, label)`` pairs; labels are (H, W) class maps.
        config: see :class:`TimConfig`.

    Returns:
        head, per-epoch history (train loss, train/val mIoU) and, for full
        fine-tuning, the tuned backbone.
    """
    if not train:
        raise InvalidArgumentError("empty training set")
    for inputs, _ in train:
        clash = [m for m in config.active if m in inputs]
        if clash:
            raise InvalidArgumentError(f"tim modalities {clash} are observed inputs")
    grid = _grid_of(train[0][0])
    size = tuple(np.asarray(train[0][1]).shape)
    if config.freeze_backbone:
        backbone = model
    else:
        backbone = BackboneModel(model.config)
        backbone.load_state_dict(model.state_dict())
    backbone.eval()
    labels = torch.as_tensor(np.stack([np.asarray(y) for _, y in train]), dtype=torch.int64)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(config.seed, "tim_head") % (2**31))
        n_mod = 1 if config.merge == "mean" else len(spatial_modalities(backbone, {**train[0][0], **dict.fromkeys(config.active)}))
        head = SegHead(backbone.config.dim * n_mod, config.head_channels, config.n_classes)
    params = [{"params": head.parameters(), "lr": config.lr}]
    if not config.freeze_backbone:
        params.append({"params": backbone.parameters(), "lr": config.backbone_lr})
    opt = torch.optim.AdamW(params, weight_decay=config.weight_decay)
    rng = np.random.default_rng(derive_seed(config.seed, "tim_order"))
    history: Dict[str, list] = {"train_loss": [], "train_miou": [], "val_miou": []}

    cached = val_cached = None
    if config.freeze_backbone:
        # temperature-0 augmentation of a frozen model is identical every epoch
        with torch.no_grad():
            cached = _features(backbone, _augment_all(backbone, train, config), grid, config.merge)
            if val:
                val_cached = _features(backbone, _augment_all(backbone, val, config), grid, config.merge)
    step = 0
    for epoch in range(config.epochs):
        if cached is None:
            with torch.no_grad():
                augmented = _augment_all(backbone, train, config)
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if cached is not None:
                feats = cached[idx]
            else:
                backbone.train()
                feats = encode_features(backbone, [augmented[i] for i in idx], grid, config.merge)
            logits = head(feats, size)
            loss = F.cross_entropy(logits, labels[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1
        backbone.eval()
        history["train_loss"].append(float(np.mean(losses)))
        result = TimResult(head, config, history, None if config.freeze_backbone else backbone)
        history["train_miou"].append(_dataset_miou(result, backbone, train, cached))
        if val:
            history["val_miou"].append(_dataset_miou(result, backbone, val, val_cached))
        logger.info("tim epoch %d loss %.4f", epoch, history["train_loss"][-1])
    head.eval()
    return TimResult(head, config, history, None if config.freeze_backbone else backbone)


@torch.no_grad()
def _predict(result: TimResult, backbone: BackboneModel, dataset, cached=None) -> np.ndarray:
    result.head.eval()
    grid = _grid_of(dataset[0][0])
    size = tuple(np.asarray(dataset[0][1]).shape)
    feats = cached if cached is not None else _features(backbone, _augment_all(backbone, dataset, result.config), grid, result.config.merge)
    preds = []
    for s in range(0, len(feats), 64):
        preds.append(result.head(feats[s : s + 64], size).argmax(1).numpy())
    result.head.train()
    return np.concatenate(preds)


def _dataset_miou(result, backbone, dataset, cached=None) -> float:
    pred = _predict(result, backbone, dataset, cached)
    ref = np.stack([np.asarray(y) for _, y in dataset])
    return seg_metrics(pred, ref)["miou"]


def evaluate_segmentation(result: TimResult, model: BackboneModel, dataset) -> Dict[str, object]:
    """Dataset-level IoU per class (pixels pooled over all samples) and mIoU."""
    backbone = result.backbone or model
    pred = _predict(result, backbone, dataset)
    result.head.eval()
    ref = np.stack([np.asarray(y) for _, y in dataset])
    return seg_metrics(pred, ref)


@torch.no_grad()
def segment(model: BackboneModel, result: TimResult, inputs: Mapping[str, object]) -> np.ndarray:
    """(H, W) class map for one example."""
    backbone = result.backbone or model
    aug = tim_augment(backbone, inputs, result.config, seed=derive_seed(result.config.seed, "tim", 0) % (2**31))
    grid = _grid_of(inputs)
    size = (grid[0] * PATCH, grid[1] * PATCH)
    result.head.eval()
    return result.head(encode_features(backbone, [aug.inputs], grid, result.config.merge), size).argmax(1)[0].numpy()


def seg_metrics(pred, ref, classes: Optional[Sequence[int]] = None) -> Dict[str, object]:
    """Per-class IoU and mIoU (unweighted mean over classes present in ``ref``)."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise InvalidArgumentError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    present = np.unique(ref) if classes is None else np.asarray(classes)
    ious = iou_per_class(pred, ref, [int(c) for c in present])
    vals = [v for v in ious.values() if not math.isnan(v)]
    return {"iou": ious, "miou": float(np.mean(vals)) if vals else float("nan")}
