"""Dirichlet budget allocation and random input/target unit selection.

An *arm* is a ``(modality, scale)`` pair with ``scale`` either ``"token"``
(discrete ids) or ``"pixel"`` (raw 16x16 patches). Targets are always
token-level. For one training example we

1. draw Dirichlet proportions over target modalities and over input arms,
2. turn them into integer counts by largest-remainder rounding so the totals
   equal the budgets exactly,
3. clamp counts to what each arm can hold and hand the excess to arms with
   room left,
4. pick positions uniformly without replacement.

A position may be a pixel input and a token target at the same time, but
never a token input and a token target. Sequence modalities are targeted as
a prefix (they are decoded left to right) and their inputs are drawn from
the remaining positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .errors import BudgetOverflowError, InvalidArgumentError

Arm = Tuple[str, str]
SCALES = ("token", "pixel")
Alpha = Union[float, Mapping]


@dataclass
class MaskingConfig:
    input_budget: int = 24
    target_budget: int = 24
    alpha_input: Alpha = 0.25
    alpha_target: Alpha = 0.25
    input_arms: Sequence[Arm] = (
        ("optical", "pixel"),
        ("radar", "pixel"),
        ("dem", "pixel"),
        ("optical", "token"),
        ("radar", "token"),
        ("lulc", "token"),
        ("ndvi", "token"),
        ("dem", "token"),
        ("caption", "token"),
        ("geolocation", "token"),
    )
    target_modalities: Sequence[str] = ("optical", "radar", "lulc", "ndvi", "dem", "caption", "geolocation")
    sequence_modalities: Sequence[str] = ("caption", "geolocation")

    def __post_init__(self):
        self.input_arms = [tuple(a) for a in self.input_arms]
        self.target_modalities = list(self.target_modalities)
        self.sequence_modalities = list(self.sequence_modalities)
        if self.input_budget < 1 or self.target_budget < 1:
            raise InvalidArgumentError("budgets must be >= 1")
        if not self.input_arms or not self.target_modalities:
            raise InvalidArgumentError("need at least one input arm and one target modality")
        for mod, scale in self.input_arms:
            if scale not in SCALES:
                raise InvalidArgumentError(f"unknown scale {scale!r} for {mod}")
            if scale == "pixel" and mod in self.sequence_modalities:
                raise InvalidArgumentError(f"sequence modality {mod} has no pixel scale")
        if len(set(self.input_arms)) != len(self.input_arms):
            raise InvalidArgumentError("duplicate input arms")
        if len(set(self.target_modalities)) != len(self.target_modalities):
            raise InvalidArgumentError("duplicate target modalities")
        self._alphas(self.alpha_input, self.input_arms, "alpha_input")
        self._alphas(self.alpha_target, self.target_modalities, "alpha_target")

    @staticmethod
    def _alphas(alpha: Alpha, keys, name: str) -> np.ndarray:
        if isinstance(alpha, Mapping):
            lookup = {(tuple(k) if isinstance(k, (list, tuple)) else k): v for k, v in alpha.items()}
            missing = [k for k in keys if k not in lookup and (not isinstance(k, tuple) or k[0] not in lookup)]
            if missing:
                raise InvalidArgumentError(f"{name} lacks entries for {missing}")
            vals = [lookup[k] if k in lookup else lookup[k[0]] for k in keys]
        else:
            vals = [alpha] * len(keys)
        arr = np.asarray(vals, dtype=np.float64)
        if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
            raise InvalidArgumentError(f"{name} entries must be positive and finite")
        return arr

    def input_alphas(self) -> np.ndarray:
        return self._alphas(self.alpha_input, self.input_arms, "alpha_input")

    def target_alphas(self) -> np.ndarray:
        return self._alphas(self.alpha_target, self.target_modalities, "alpha_target")


@dataclass
class MaskingPlan:
    """Selected positions per arm (inputs) and per modality (targets)."""

    inputs: Dict[Arm, np.ndarray]
    targets: Dict[str, np.ndarray]
    rng_seed: Optional[int] = None

    @property
    def input_units(self) -> Set[Tuple[str, int, str]]:
        return {(m, int(p), s) for (m, s), pos in self.inputs.items() for p in pos}

    @property
    def target_units(self) -> Set[Tuple[str, int]]:
        return {(m, int(p)) for m, pos in self.targets.items() for p in pos}

    def n_inputs(self) -> int:
        return int(sum(len(p) for p in self.inputs.values()))

    def n_targets(self) -> int:
        return int(sum(len(p) for p in self.targets.values()))


def dirichlet(alphas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draw that stays finite for very small or very large concentrations."""
    if len(alphas) == 1:
        return np.ones(1)
    p = rng.dirichlet(alphas)
    if not np.all(np.isfinite(p)) or p.sum() <= 0:
        # extremely small alphas: all mass lands on one component
        p = np.zeros(len(alphas))
        p[rng.choice(len(alphas), p=alphas / alphas.sum())] = 1.0
    return p


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that best follow ``proportions``.

    Ties in the fractional parts go to the lower index.
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def clamp_counts(counts: np.ndarray, capacity: np.ndarray, proportions: np.ndarray) -> np.ndarray:
    """Clamp ``counts`` to ``capacity`` and redistribute the overflow.

    Excess goes to arms with spare room, in proportion to their Dirichlet
    weights (uniformly when those are all zero). Raises
    :class:`BudgetOverflowError` when total capacity is below the total count.
    """
    counts = np.asarray(counts, dtype=np.int64).copy()
    capacity = np.asarray(capacity, dtype=np.int64)
    total = int(counts.sum())
    if int(capacity.sum()) < total:
        raise BudgetOverflowError(f"budget {total} exceeds total capacity {int(capacity.sum())}")
    counts = np.minimum(counts, capacity)
    while int(counts.sum()) < total:
        excess = total - int(counts.sum())
        room = capacity - counts
        open_ = room > 0
        w = np.where(open_, proportions, 0.0)
        if w.sum() <= 0:
            w = open_.astype(np.float64)
        extra = np.minimum(largest_remainder(w, excess), room)
        if extra.sum() == 0:
            # rounding put everything on full arms; fill the first open one
            extra[np.flatnonzero(open_)[0]] = 1
        counts += extra
    return counts


def sample_budgets(
    config: MaskingConfig,
    rng: np.random.Generator,
    capacities: Optional[Mapping[str, int]] = None,
) -> Tuple[Dict[Arm, int], Dict[str, int]]:
    """Per-arm input counts and per-modality target counts.

    Args:
        config: masking configuration.
        rng: numpy generator; all randomness comes from it.
        capacities: positions available per modality. Arms missing from this
            mapping (or with capacity 0) receive nothing. ``None`` means
            unlimited.
    """
    big = config.input_budget + config.target_budget
    cap = (lambda m: big) if capacities is None else (lambda m: int(capacities.get(m, 0)))

    t_prop = dirichlet(config.target_alphas(), rng)
    t_cap = np.array([cap(m) for m in config.target_modalities])
    t_counts = clamp_counts(largest_remainder(t_prop, config.target_budget), t_cap, t_prop)
    targets = dict(zip(config.target_modalities, (int(c) for c in t_counts)))

    i_prop = dirichlet(config.input_alphas(), rng)
    i_cap = np.array(
        [cap(m) - (targets.get(m, 0) if s == "token" else 0) for m, s in config.input_arms]
    )
    i_counts = clamp_counts(largest_remainder(i_prop, config.input_budget), i_cap, i_prop)
    inputs = dict(zip(config.input_arms, (int(c) for c in i_counts)))
    return inputs, targets


def _sizes(grids: Mapping[str, object]) -> Dict[str, int]:
    out = {}
    for m, g in grids.items():
        out[m] = int(g) if isinstance(g, (int, np.integer)) else int(np.size(g))
    return out


def select_units(
    grids: Mapping[str, object],
    budgets: Tuple[Mapping[Arm, int], Mapping[str, int]],
    rng: np.random.Generator,
    sequence_modalities: Sequence[str] = ("caption", "geolocation"),
    rng_seed: Optional[int] = None,
) -> MaskingPlan:
    """Choose concrete positions for sampled budgets.

    ``grids`` maps modality to its token grid / sequence (or directly to the
    number of positions).
    """
    sizes = _sizes(grids)
    in_counts, tgt_counts = budgets
    targets: Dict[str, np.ndarray] = {}
    for m, n in tgt_counts.items():
        if n == 0:
            continue
        if m not in sizes:
            raise InvalidArgumentError(f"target modality {m!r} missing from sample")
        if n > sizes[m]:
            raise BudgetOverflowError(f"{n} targets requested for {m} with {sizes[m]} positions")
        if m in sequence_modalities:
            targets[m] = np.arange(n)
        else:
            targets[m] = np.sort(rng.choice(sizes[m], size=n, replace=False))
    inputs: Dict[Arm, np.ndarray] = {}
    for (m, s), n in in_counts.items():
        if n == 0:
            continue
        if m not in sizes:
            raise InvalidArgumentError(f"input modality {m!r} missing from sample")
        pool = np.arange(sizes[m])
        if s == "token" and m in targets:
            pool = np.setdiff1d(pool, targets[m])
        if n > len(pool):
            raise BudgetOverflowError(f"{n} inputs requested for {m}/{s} with {len(pool)} free positions")
        inputs[(m, s)] = np.sort(rng.choice(pool, size=n, replace=False))
    return MaskingPlan(inputs, targets, rng_seed)


def sample_plan(
    config: MaskingConfig, grids: Mapping[str, object], rng: np.random.Generator, rng_seed: Optional[int] = None
) -> MaskingPlan:
    """Budgets then positions for one example."""
    sizes = _sizes(grids)
    budgets = sample_budgets(config, rng, sizes)
    return select_units(sizes, budgets, rng, config.sequence_modalities, rng_seed)
