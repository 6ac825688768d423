"""Procedural multi-modality samples.

Every sample is derived from one latent elevation field. Optical reflectance,
radar backscatter, land cover, vegetation index and a caption are all
functions of that terrain plus a climate region, so the modalities carry
mutual information that a cross-modal model can learn. Randomness enters only
through the terrain seed, the region/geolocation draw, radar speckle and
optional cloud occlusion of the optical bands.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

PATCH = 16

LULC_CLASSES = ("water", "trees", "grass", "crops", "built", "bare", "snow")
WATER, TREES, GRASS, CROPS, BUILT, BARE, SNOW = range(len(LULC_CLASSES))
VEGETATION_CLASSES = (TREES, GRASS, CROPS)

OPTICAL_BANDS = ("blue", "green", "red", "nir")
RADAR_BANDS = ("vv", "vh")

# surface reflectance per class, bands ordered as OPTICAL_BANDS
_SIGNATURES = np.array(
    [
        [0.060, 0.050, 0.035, 0.020],  # water
        [0.030, 0.060, 0.030, 0.350],  # trees
        [0.050, 0.090, 0.060, 0.300],  # grass
        [0.050, 0.100, 0.070, 0.400],  # crops
        [0.150, 0.150, 0.170, 0.160],  # built
        [0.200, 0.250, 0.320, 0.300],  # bare
        [0.850, 0.850, 0.830, 0.700],  # snow
    ]
)
# linear VV backscatter and VH/VV ratio per class
_BACKSCATTER_VV = np.array([0.008, 0.12, 0.06, 0.08, 0.45, 0.04, 0.10])
_VH_RATIO = np.array([0.30, 0.50, 0.25, 0.25, 0.20, 0.15, 0.20])
_CLOUD_REFLECTANCE = np.array([0.80, 0.80, 0.80, 0.78])


@dataclass(frozen=True)
class ModalitySpec:
    """Static description of one modality.

    ``vocab_size`` counts the valid token ids (the quantizer codebook for
    image modalities). Backbone embedding tables add reserved special ids
    above this range.
    """

    name: str
    kind: str  # "image" or "sequence"
    channels: int = 1
    value_range: Tuple[float, float] = (0.0, 1.0)
    vocab_size: int = 15360
    is_categorical: bool = False
    log_scale: bool = False  # models see 10*log10(x) (decibels)

    def __post_init__(self):
        if self.kind not in ("image", "sequence"):
            raise InvalidArgumentError(f"unknown modality kind {self.kind!r}")
        if self.vocab_size < 2:
            raise InvalidArgumentError("vocab_size must be >= 2")
        if self.kind == "image" and self.channels < 1:
            raise InvalidArgumentError("image modalities need >= 1 channel")
        lo, hi = self.value_range
        if self.kind == "image" and not lo < hi:
            raise InvalidArgumentError("value_range min must be < max")
        if self.log_scale and lo <= 0:
            raise InvalidArgumentError("log-scale modalities need a positive value_range")

    def model_range(self) -> Tuple[float, float]:
        """Value range in the units models work in (dB when ``log_scale``)."""
        lo, hi = self.value_range
        if self.log_scale:
            return 10 * math.log10(lo), 10 * math.log10(hi)
        return float(lo), float(hi)

    def to_model_units(self, x):
        if not self.log_scale:
            return x
        lo, hi = self.value_range
        return 10 * np.log10(np.clip(x, lo, hi))

    def from_model_units(self, y):
        if not self.log_scale:
            return y
        return np.power(10.0, np.asarray(y) / 10)

    @property
    def span(self) -> float:
        """Data range for metrics, in model units (dB span for log-scale modalities)."""
        lo, hi = self.model_range()
        return float(hi - lo)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "channels": self.channels,
            "value_range": list(self.value_range),
            "vocab_size": self.vocab_size,
            "is_categorical": self.is_categorical,
            "log_scale": self.log_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalitySpec":
        d = dict(d)
        d["value_range"] = tuple(d["value_range"])
        return cls(**d)


def default_modalities(text_vocab_size: int = 2400) -> Dict[str, ModalitySpec]:
    """House modality registry: 5 image modalities plus caption and geolocation."""
    return {
        "optical": ModalitySpec("optical", "image", 4, (0.0, 1.0), 15360),
        # linear backscatter power; tokenized in dB over [-35, 5]
        "radar": ModalitySpec("radar", "image", 2, (10**-3.5, 10**0.5), 15360, log_scale=True),
        "lulc": ModalitySpec("lulc", "image", 1, (0.0, float(len(LULC_CLASSES) - 1)), 4096, True),
        "ndvi": ModalitySpec("ndvi", "image", 1, (-1.0, 1.0), 15360),
        "dem": ModalitySpec("dem", "image", 1, (0.0, 3000.0), 15360),
        "caption": ModalitySpec("caption", "sequence", vocab_size=text_vocab_size),
        "geolocation": ModalitySpec("geolocation", "sequence", vocab_size=text_vocab_size),
    }


IMAGE_MODALITIES = ("optical", "radar", "lulc", "ndvi", "dem")


@dataclass(frozen=True)
class Region:
    name: str
    lat: Tuple[float, float]
    lon: Tuple[float, float]
    aridity: float  # 0 wet .. 1 arid
    temperature: float  # sea-level mean temperature, deg C
    urban: float  # propensity for built-up land on flat ground


DEFAULT_REGIONS = (
    Region("desert", (18.0, 30.0), (-5.0, 25.0), aridity=0.9, temperature=28.0, urban=0.2),
    Region("temperate", (45.0, 55.0), (0.0, 20.0), aridity=0.3, temperature=10.0, urban=1.0),
    Region("tropical", (-10.0, 2.0), (-70.0, -50.0), aridity=0.05, temperature=26.0, urban=0.3),
    Region("boreal", (60.0, 68.0), (10.0, 30.0), aridity=0.4, temperature=1.0, urban=0.2),
)


@dataclass(frozen=True)
class TerrainParams:
    octaves: int = 5
    base_cells: int = 2
    persistence: float = 0.5
    elevation_range: Tuple[float, float] = (0.0, 3000.0)


@dataclass(frozen=True)
class DeriveParams:
    region: Region = DEFAULT_REGIONS[1]
    pixel_size_m: float = 30.0
    water_level_m: float = 60.0
    lapse_rate: float = 6.5  # deg C per km
    speckle_looks: float = 4.0
    cloud_probability: float = 0.3


@dataclass
class AlignedSample:
    """Co-registered rasters (channels x H x W, physical units) for one tile."""

    rasters: Dict[str, np.ndarray]
    geolocation: Tuple[float, float]
    caption: str
    sample_id: str
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        shapes = {r.shape[-2:] for r in self.rasters.values()}
        if len(shapes) > 1:
            raise InvalidArgumentError(f"rasters have mismatched spatial shapes: {shapes}")
        for h, w in shapes:
            if h % PATCH or w % PATCH:
                raise InvalidArgumentError(f"spatial shape {(h, w)} not divisible by {PATCH}")
        lat, lon = self.geolocation
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon < 180.0):
            raise InvalidArgumentError(f"geolocation out of range: {self.geolocation}")

    @property
    def shape(self) -> Tuple[int, int]:
        return next(iter(self.rasters.values())).shape[-2:]


def _check_size(size: Tuple[int, int]) -> Tuple[int, int]:
    h, w = (int(s) for s in size)
    if h <= 0 or w <= 0 or h % PATCH or w % PATCH:
        raise InvalidArgumentError(f"size {size} must be positive and divisible by {PATCH}")
    return h, w


def fractal_noise(
    rng: np.random.Generator,
    size: Tuple[int, int],
    octaves: int,
    base_cells: int = 2,
    persistence: float = 0.5,
) -> np.ndarray:
    """Multi-octave value noise, cubic-spline interpolated, roughly in [-1, 1]."""
    h, w = size
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for octave in range(octaves):
        cells = base_cells * 2**octave
        lattice = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
        coords = np.meshgrid(np.linspace(0, cells, h), np.linspace(0, cells, w), indexing="ij")
        out += amp * ndimage.map_coordinates(lattice, coords, order=3, mode="nearest")
        total += amp
        amp *= persistence
    return out / total if total else out


def generate_terrain(seed: int, size: Tuple[int, int] = (64, 64), params: TerrainParams = TerrainParams()) -> np.ndarray:
    """Elevation raster in metres, deterministic in ``seed``."""
    h, w = _check_size(size)
    rng = np.random.default_rng(seed)
    lo, hi = params.elevation_range
    span = hi - lo
    base = lo + 0.6 * span * rng.uniform() ** 2
    relief = rng.uniform(0.01, 0.05) * span
    noise = fractal_noise(rng, (h, w), params.octaves, params.base_cells, params.persistence)
    return np.clip(base + 2.0 * relief * noise, lo, hi)


def ndvi(optical: np.ndarray) -> np.ndarray:
    """(NIR - red) / (NIR + red) pixelwise; 0 where both bands are 0."""
    red = optical[OPTICAL_BANDS.index("red")].astype(np.float64)
    nir = optical[OPTICAL_BANDS.index("nir")].astype(np.float64)
    denom = nir + red
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, (nir - red) / np.where(denom > 0, denom, 1.0), 0.0)
    return out


def terrain_fields(terrain: np.ndarray, params: DeriveParams) -> Dict[str, np.ndarray]:
    """Slope, hillshade, moisture and temperature fields (all deterministic)."""
    dy, dx = np.gradient(terrain, params.pixel_size_m)
    slope = np.hypot(dx, dy)
    # sun from the north-west at 45 deg elevation
    normal = np.stack([-dx, -dy, np.ones_like(dx)]) / np.sqrt(1.0 + dx**2 + dy**2)
    sun = np.array([-0.5, -0.5, np.sqrt(0.5)])
    hillshade = np.clip(np.tensordot(sun, normal, axes=1), 0.2, 1.0)
    relative = terrain - ndimage.gaussian_filter(terrain, sigma=8, mode="nearest")
    moisture = (
        0.5
        + 0.5 * (1.0 - 2.0 * params.region.aridity)
        + 0.25 * np.tanh(-relative / 30.0)
        - 0.3 * np.tanh(slope / 0.6)
    )
    moisture = np.clip(moisture, 0.0, 1.0)
    temperature = params.region.temperature - params.lapse_rate * terrain / 1000.0
    return {
        "slope": slope,
        "hillshade": hillshade,
        "relative": relative,
        "moisture": moisture,
        "temperature": temperature,
    }


def lulc_scores(terrain: np.ndarray, fields: Dict[str, np.ndarray], params: DeriveParams) -> np.ndarray:
    """Per-class score maps (classes x H x W); land cover is their argmax."""
    slope, moist, temp = fields["slope"], fields["moisture"], fields["temperature"]
    rel = fields["relative"]
    region = params.region
    scores = np.empty((len(LULC_CLASSES),) + terrain.shape)
    scores[WATER] = (params.water_level_m - terrain) / 10.0 + 6.0 * (moist - 0.95) - rel / 20.0
    scores[TREES] = 4.0 * (moist - 0.5) - 0.5 * slope
    scores[GRASS] = 0.6 + 1.5 * slope - 3.0 * np.abs(moist - 0.4)
    scores[CROPS] = 1.2 - 3.0 * slope - 4.0 * np.abs(moist - 0.55) - terrain / 1500.0
    scores[BUILT] = region.urban * (1.4 - 8.0 * slope - terrain / 800.0) - 1.5 * np.abs(moist - 0.5)
    scores[BARE] = 8.0 * (region.aridity - 0.7) - 2.0 * moist + 1.0
    scores[SNOW] = -temp / 1.5 - 0.5
    return scores


def derive_lulc(terrain: np.ndarray, params: DeriveParams) -> np.ndarray:
    fields = terrain_fields(terrain, params)
    return np.argmax(lulc_scores(terrain, fields, params), axis=0)


def surface_reflectance(lulc: np.ndarray, fields: Dict[str, np.ndarray]) -> np.ndarray:
    """Cloud-free optical reflectance (4 x H x W)."""
    refl = _SIGNATURES[lulc].transpose(2, 0, 1).copy()
    veg = np.isin(lulc, VEGETATION_CLASSES)
    vigour = 0.6 + 0.4 * fields["moisture"]
    refl[3] = np.where(veg, refl[3] * vigour, refl[3])
    return np.clip(refl * fields["hillshade"][None], 0.0, 1.0)


def backscatter(lulc: np.ndarray, fields: Dict[str, np.ndarray]) -> np.ndarray:
    """Deterministic (speckle-free) radar backscatter, linear power, 2 x H x W."""
    geometry = 0.6 + 0.8 * fields["hillshade"]
    vv = _BACKSCATTER_VV[lulc] * geometry
    vh = vv * _VH_RATIO[lulc]
    return np.stack([vv, vh])


def speckle(rng: np.random.Generator, shape: Tuple[int, ...], looks: float) -> np.ndarray:
    """Unit-mean multiplicative gamma speckle."""
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def cloud_alpha(rng: np.random.Generator, size: Tuple[int, int]) -> np.ndarray:
    """Soft cloud opacity in [0, 1]; roughly 20-60 % of the tile is covered."""
    field_ = fractal_noise(rng, size, octaves=4, base_cells=2)
    threshold = rng.uniform(-0.15, 0.2)
    return np.clip((field_ - threshold) / 0.15, 0.0, 1.0)


_ARTICLES = {"a": "an"}
CLASS_PHRASES = {
    WATER: ("water", "open water", "a lake", "a river"),
    TREES: ("forest", "dense trees", "woodland", "tree cover"),
    GRASS: ("grassland", "meadows", "pasture", "open grass"),
    CROPS: ("cropland", "farmland", "agricultural fields", "cultivated fields"),
    BUILT: ("built area", "settlements", "buildings", "an urban area"),
    BARE: ("bare land", "desert", "bare soil", "sand"),
    SNOW: ("snow", "ice", "snow cover", "glaciers"),
}
RELIEF_WORDS = {
    "flat": ("flat", "level", "low lying"),
    "hilly": ("hilly", "rolling", "undulating"),
    "steep": ("mountainous", "rugged", "steep"),
}
TEMPLATES_ONE = (
    "a {relief} landscape dominated by {c1}",
    "an aerial view of {relief} terrain covered by {c1}",
    "satellite image of {c1} in a {relief} region",
    "this {relief} scene shows mostly {c1}",
)
TEMPLATES_TWO = (
    "a {relief} landscape of {c1} with some {c2}",
    "an aerial view of {relief} terrain covered by {c1} and {c2}",
    "satellite image showing {c1} next to {c2}",
    "{c1} surrounded by {c2} in a {relief} area",
    "this {relief} scene contains mostly {c1} with patches of {c2}",
)
CLOUD_SUFFIXES = ("partly covered by clouds", "with some clouds", "under scattered clouds")


def caption_words() -> List[str]:
    """Closed word list that every generated caption is drawn from."""
    words = set()
    texts = [t for ts in (TEMPLATES_ONE, TEMPLATES_TWO) for t in ts] + list(CLOUD_SUFFIXES)
    for t in texts:
        words.update(w for w in t.split() if not w.startswith("{"))
    for phrases in list(CLASS_PHRASES.values()) + list(RELIEF_WORDS.values()):
        for p in phrases:
            words.update(p.split())
    return sorted(words)


def make_caption(lulc: np.ndarray, slope: np.ndarray, cloudy: bool, rng: np.random.Generator) -> str:
    counts = np.bincount(lulc.ravel(), minlength=len(LULC_CLASSES))
    order = np.argsort(-counts, kind="stable")
    mean_slope = float(np.mean(slope))
    relief = "flat" if mean_slope < 0.15 else ("hilly" if mean_slope < 0.5 else "steep")
    relief_word = RELIEF_WORDS[relief][rng.integers(len(RELIEF_WORDS[relief]))]
    c1 = CLASS_PHRASES[int(order[0])][rng.integers(4)]
    second = int(order[1])
    if counts[second] >= 0.1 * lulc.size:
        c2 = CLASS_PHRASES[second][rng.integers(4)]
        text = TEMPLATES_TWO[rng.integers(len(TEMPLATES_TWO))].format(relief=relief_word, c1=c1, c2=c2)
    else:
        text = TEMPLATES_ONE[rng.integers(len(TEMPLATES_ONE))].format(relief=relief_word, c1=c1)
    if cloudy:
        text += " " + CLOUD_SUFFIXES[rng.integers(len(CLOUD_SUFFIXES))]
    # "a" before a vowel-initial relief word
    words = text.split()
    for i in range(len(words) - 1):
        if words[i] == "a" and words[i + 1][0] in "aeiou":
            words[i] = "an"
    return " ".join(words)


def derive_modalities(
    terrain: np.ndarray,
    params: DeriveParams,
    rng: np.random.Generator,
    sample_id: str = "sample",
) -> AlignedSample:
    """Build every modality of one sample from an elevation raster.

    Land cover is a deterministic function of ``terrain`` and ``params``.
    ``rng`` drives radar speckle, cloud occlusion, caption wording and the
    geolocation inside ``params.region``.
    """
    terrain = np.asarray(terrain, dtype=np.float64)
    if terrain.ndim != 2:
        raise InvalidArgumentError("terrain must be a 2-D elevation raster")
    _check_size(terrain.shape)
    fields = terrain_fields(terrain, params)
    lulc = np.argmax(lulc_scores(terrain, fields, params), axis=0)
    surface = surface_reflectance(lulc, fields)
    veg_index = ndvi(surface)

    radar_clean = backscatter(lulc, fields)
    radar = radar_clean * speckle(rng, radar_clean.shape, params.speckle_looks)

    cloudy = bool(rng.uniform() < params.cloud_probability)
    optical = surface
    cloud_cover = 0.0
    if cloudy:
        alpha = cloud_alpha(rng, terrain.shape)
        optical = (1.0 - alpha[None]) * surface + alpha[None] * _CLOUD_REFLECTANCE[:, None, None]
        cloud_cover = float(np.mean(alpha > 0.5))

    caption = make_caption(lulc, fields["slope"], cloudy, rng)
    region = params.region
    lat = float(rng.uniform(*region.lat))
    lon = float(rng.uniform(*region.lon))

    rasters = {
        "optical": optical.astype(np.float32),
        "radar": radar.astype(np.float32),
        "lulc": lulc[None].astype(np.float32),
        "ndvi": veg_index[None].astype(np.float32),
        "dem": terrain[None].astype(np.float32),
    }
    meta = {"region": region.name, "cloudy": cloudy, "cloud_cover": cloud_cover}
    return AlignedSample(rasters, (lat, lon), caption, sample_id, meta)


def sample_seed(seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def generate_sample(
    seed: int,
    size: Tuple[int, int] = (64, 64),
    sample_id: str = "sample",
    regions: Sequence[Region] = DEFAULT_REGIONS,
    terrain_params: TerrainParams = TerrainParams(),
    cloud_probability: float = 0.3,
) -> AlignedSample:
    rng = np.random.default_rng(seed)
    terrain = generate_terrain(int(rng.integers(2**62)), size, terrain_params)
    region = regions[int(rng.integers(len(regions)))]
    params = DeriveParams(region=region, cloud_probability=cloud_probability)
    return derive_modalities(terrain, params, rng, sample_id)


def generate_samples(
    n: int,
    seed: int = 0,
    size: Tuple[int, int] = (64, 64),
    start: int = 0,
    prefix: str = "s",
    cloud_probability: float = 0.3,
    regions: Sequence[Region] = DEFAULT_REGIONS,
) -> List[AlignedSample]:
    """``n`` samples; sample ``i`` depends only on ``(seed, start + i)``."""
    return [
        generate_sample(
            sample_seed(seed, start + i),
            size,
            f"{prefix}{start + i:06d}",
            regions=regions,
            cloud_probability=cloud_probability,
        )
        for i in range(n)
    ]


def stack_rasters(samples: Sequence[AlignedSample], modality: str) -> np.ndarray:
    return np.stack([s.rasters[modality] for s in samples])


def class_fractions(samples: Sequence[AlignedSample]) -> np.ndarray:
    lulc = stack_rasters(samples, "lulc").astype(np.int64)
    return np.bincount(lulc.ravel(), minlength=len(LULC_CLASSES)) / lulc.size


def dominant_class(sample: AlignedSample) -> int:
    counts = np.bincount(sample.rasters["lulc"].astype(np.int64).ravel(), minlength=len(LULC_CLASSES))
    return int(np.argmax(counts))


def region_of(lat: float, lon: float, regions: Sequence[Region] = DEFAULT_REGIONS) -> Optional[Region]:
    for r in regions:
        if r.lat[0] <= lat <= r.lat[1] and r.lon[0] <= lon <= r.lon[1]:
            return r
    return None
