"""On-disk dataset format.

A dataset directory holds ``manifest.json`` and one sub-directory per sample
with one ``<modality>.raw`` blob per raster: little-endian float32, C order.
The manifest records shape, dtype, byte length and sha256 of every blob.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    CorruptDatasetError,
    DatasetVersionError,
    IncompleteDatasetError,
    InvalidArgumentError,
)
from .synth import AlignedSample, ModalitySpec, default_modalities

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_DTYPE = "<f4"


@dataclass
class DatasetManifest:
    version: int
    modalities: List[ModalitySpec]
    samples: List[dict]
    split: str = "train"
    rng_seed: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise InvalidArgumentError(f"unknown split {self.split!r}")
        ids = [s["sample_id"] for s in self.samples]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("duplicate sample ids in manifest")

    @property
    def sample_ids(self) -> List[str]:
        return [s["sample_id"] for s in self.samples]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "split": self.split,
            "rng_seed": self.rng_seed,
            "modalities": [m.to_dict() for m in self.modalities],
            "samples": self.samples,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("version")
        if version != FORMAT_VERSION:
            raise DatasetVersionError(f"unsupported dataset version {version!r} (expected {FORMAT_VERSION})")
        return cls(
            version=version,
            modalities=[ModalitySpec.from_dict(m) for m in d["modalities"]],
            samples=list(d["samples"]),
            split=d.get("split", "train"),
            rng_seed=int(d.get("rng_seed", 0)),
            extra=dict(d.get("extra", {})),
        )


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(
    samples: Sequence[AlignedSample],
    directory,
    split: str = "train",
    rng_seed: int = 0,
    modalities: Optional[Sequence[ModalitySpec]] = None,
    extra: Optional[dict] = None,
) -> DatasetManifest:
    """Write ``samples`` under ``directory`` and return the manifest written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if modalities is None:
        specs = default_modalities()
        modalities = [specs[m] for m in specs if specs[m].kind == "image"]
    entries = []
    for sample in samples:
        sdir = directory / sample.sample_id
        sdir.mkdir(exist_ok=True)
        files = {}
        for name, raster in sample.rasters.items():
            data = np.ascontiguousarray(raster, dtype=_DTYPE).tobytes(order="C")
            rel = f"{sample.sample_id}/{name}.raw"
            (directory / rel).write_bytes(data)
            files[name] = {
                "path": rel,
                "shape": list(raster.shape),
                "dtype": _DTYPE,
                "nbytes": len(data),
                "sha256": _sha256(data),
            }
        entries.append(
            {
                "sample_id": sample.sample_id,
                "geolocation": [float(sample.geolocation[0]), float(sample.geolocation[1])],
                "caption": sample.caption,
                "meta": sample.meta,
                "files": files,
            }
        )
    manifest = DatasetManifest(FORMAT_VERSION, list(modalities), entries, split, rng_seed, dict(extra or {}))
    (directory / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
    return manifest


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise IncompleteDatasetError(f"no manifest at {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptDatasetError(f"unreadable manifest {path}: {exc}") from exc
    return DatasetManifest.from_dict(raw)


def _load_entry(directory: Path, entry: dict, verify: bool = True) -> AlignedSample:
    rasters = {}
    for name, info in entry["files"].items():
        path = directory / info["path"]
        if not path.exists():
            raise IncompleteDatasetError(f"missing {name} file for {entry['sample_id']}: {path}")
        data = path.read_bytes()
        if len(data) != info["nbytes"]:
            raise CorruptDatasetError(f"{path}: expected {info['nbytes']} bytes, found {len(data)}")
        if verify and _sha256(data) != info["sha256"]:
            raise CorruptDatasetError(f"checksum mismatch for {path}")
        rasters[name] = np.frombuffer(data, dtype=info["dtype"]).reshape(info["shape"]).copy()
    lat, lon = entry["geolocation"]
    return AlignedSample(rasters, (lat, lon), entry["caption"], entry["sample_id"], dict(entry.get("meta", {})))


def read_dataset(directory, verify: bool = True) -> Tuple[DatasetManifest, Iterator[AlignedSample]]:
    """Return the manifest and a lazy iterator over samples in manifest order.

    File presence and byte lengths are checked up front; checksums are
    verified as each sample is loaded.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    for entry in manifest.samples:
        for name, info in entry["files"].items():
            path = directory / info["path"]
            if not path.exists():
                raise IncompleteDatasetError(f"missing {name} file for {entry['sample_id']}: {path}")
            if path.stat().st_size != info["nbytes"]:
                raise CorruptDatasetError(f"{path}: size differs from manifest")

    def _iter():
        for entry in manifest.samples:
            yield _load_entry(directory, entry, verify)

    return manifest, _iter()


def load_samples(directory, verify: bool = True) -> List[AlignedSample]:
    return list(read_dataset(directory, verify)[1])
