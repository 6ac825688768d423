"""Evaluation protocols: few-shot prototypes, geolocation Monte Carlo,
cross-modal consistency, paired comparisons."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgumentError
from .generation import sample_geolocations
from .synth import VEGETATION_CLASSES
from .text import N_LAT, N_LON, TextVocab


@dataclass
class FewShotEpisode:
    classes: np.ndarray  # (n_way,)
    support: np.ndarray  # (n_way * k_shot,) row indices, grouped by class
    query: np.ndarray  # row indices of every remaining sample of the classes
    rng_seed: Optional[int] = None


def sample_episode(labels, n_way: int, k_shot: int, rng: np.random.Generator, rng_seed: Optional[int] = None) -> FewShotEpisode:
    """Pick ``n_way`` classes and ``k_shot`` support items each; all others are queries."""
    labels = np.asarray(labels)
    if n_way < 1 or k_shot < 1:
        raise InvalidArgumentError("n_way and k_shot must be >= 1")
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= k_shot + 1]
    if len(eligible) < n_way:
        raise InvalidArgumentError(
            f"need {n_way} classes with >= {k_shot + 1} samples, found {len(eligible)}"
        )
    chosen = np.sort(rng.choice(eligible, size=n_way, replace=False))
    support, query = [], []
    for c in chosen:
        rows = np.flatnonzero(labels == c)
        picked = rng.choice(rows, size=k_shot, replace=False)
        support.append(np.sort(picked))
        query.append(np.setdiff1d(rows, picked))
    return FewShotEpisode(chosen, np.concatenate(support), np.concatenate(query), rng_seed)


def prototype_predict(embeddings, labels, episode: FewShotEpisode) -> np.ndarray:
    """Predicted class per query: nearest support-class mean (Euclidean).

    Ties go to the class listed first in ``episode.classes``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    protos = np.stack([x[episode.support][y[episode.support] == c].mean(0) for c in episode.classes])
    d = ((x[episode.query][:, None, :] - protos[None]) ** 2).sum(-1)
    return episode.classes[np.argmin(d, axis=1)]


def nearest_neighbor_predict(embeddings, labels, episode: FewShotEpisode) -> np.ndarray:
    """Label of the closest support item per query (Euclidean); ties to the first row."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    sx = x[episode.support]
    d = ((x[episode.query][:, None, :] - sx[None]) ** 2).sum(-1)
    return y[episode.support][np.argmin(d, axis=1)]


def few_shot_episode(embeddings, labels, n_way: int, k_shot: int, rng: np.random.Generator) -> float:
    """Accuracy of prototypical classification on one sampled episode."""
    episode = sample_episode(labels, n_way, k_shot, rng)
    pred = prototype_predict(embeddings, labels, episode)
    return float(np.mean(pred == np.asarray(labels)[episode.query]))


def few_shot_eval(embeddings, labels, n_way: int, k_shot: int, episodes: int, seed: int = 0) -> np.ndarray:
    """Per-episode accuracies; episode ``e`` uses ``default_rng([seed, e])``."""
    return np.array(
        [few_shot_episode(embeddings, labels, n_way, k_shot, np.random.default_rng([seed, e])) for e in range(episodes)]
    )


def pool_embeddings(features) -> np.ndarray:
    """Spatial mean of per-patch features: (N, ..., D) -> (N, D)."""
    f = np.asarray(features)
    return f.reshape(f.shape[0], -1, f.shape[-1]).mean(1)


def paired_bootstrap(a, b, n_boot: int = 2000, seed: int = 0) -> Dict[str, float]:
    """Mean difference a - b over paired observations with a percentile 95% interval."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise InvalidArgumentError("need two equally long 1-D samples")
    diff = a - b
    rng = np.random.default_rng(seed)
    boots = diff[rng.integers(0, len(diff), size=(n_boot, len(diff)))].mean(1)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return {"mean_diff": float(diff.mean()), "ci_low": float(lo), "ci_high": float(hi)}


def geoloc_montecarlo(
    model,
    inputs: Mapping[str, object],
    vocab: TextVocab,
    temperature: float = 1.0,
    n_draws: int = 500,
    seed: int = 0,
) -> np.ndarray:
    """Empirical distribution (721, 1440) of sampled quarter-degree cells."""
    draws = sample_geolocations(model, inputs, vocab, n_draws, temperature, seed)
    return geoloc_histogram(draws, vocab)


def geoloc_histogram(draws, vocab: TextVocab) -> np.ndarray:
    draws = np.asarray(draws)
    grid = np.zeros((N_LAT, N_LON), dtype=np.float64)
    np.add.at(grid, (draws[:, 0] - vocab.lat_offset, draws[:, 1] - vocab.lon_offset), 1.0)
    return grid / len(draws)


def grid_mode(grid: np.ndarray, smooth_deg: float = 0.0) -> Tuple[float, float]:
    """(lat, lon) of the most probable cell, optionally after box smoothing."""
    g = np.asarray(grid, dtype=np.float64)
    if smooth_deg > 0:
        from scipy.ndimage import uniform_filter

        k = int(round(smooth_deg / 0.25)) * 2 + 1
        g = uniform_filter(g, size=k, mode="constant")
    r, c = np.unravel_index(np.argmax(g), g.shape)
    return -90.0 + r * 0.25, -180.0 + c * 0.25


def consistency_score(lulc, ndvi) -> float:
    """Fraction of pixels where (NDVI > 0) agrees with a vegetation land-cover class."""
    lulc = np.asarray(lulc).reshape(-1)
    ndvi = np.asarray(ndvi).reshape(-1)
    if lulc.shape != ndvi.shape:
        raise InvalidArgumentError("lulc and ndvi must have the same number of pixels")
    veg = np.isin(np.rint(lulc).astype(np.int64), VEGETATION_CLASSES)
    return float(np.mean((ndvi > 0) == veg))


def summarize(values) -> Dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "n": int(len(v))}
