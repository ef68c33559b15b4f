"""Sample records, track-name parsing, the quality-banded protocol and synthetic data."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRACK_FIELDS = ("group", "scene", "camera", "epoch", "time")


class Label(str, Enum):
    BONAFIDE = "bonafide"
    ATTACK = "attack"

    @property
    def as_int(self) -> int:
        return 1 if self is Label.BONAFIDE else 0

    @classmethod
    def from_int(cls, value: int) -> "Label":
        if value not in (0, 1):
            raise ValueError(f"label must be 0 (attack) or 1 (bonafide), got {value!r}")
        return cls.BONAFIDE if value == 1 else cls.ATTACK


class AttackCategory(str, Enum):
    NONE = "none"
    MASK_RESIN = "mask_resin"
    MASK_SILICONE = "mask_silicone"
    MASK_PLASTER = "mask_plaster"
    MASK_HEADGEAR = "mask_headgear"
    FLAT_2D = "flat_2d"
    ADVERSARIAL = "adversarial"


ATTACK_TYPES = tuple(c for c in AttackCategory if c is not AttackCategory.NONE)


class TrackNameError(ValueError):
    """Raised for track folder names that do not follow Group_Scene_Camera_Epoch_Time."""


@dataclass(frozen=True)
class FolderMeta:
    group: str
    scene: str
    camera: str
    epoch: str
    time: str

    def format(self) -> str:
        parts = [getattr(self, name) for name in TRACK_FIELDS]
        for name, part in zip(TRACK_FIELDS, parts):
            if not part or "_" in part:
                raise TrackNameError(f"field {name!r} must be non-empty and contain no underscore: {part!r}")
        return "_".join(parts)


def parse_track_name(name: str) -> FolderMeta:
    """Split a ``Group_Scene_Camera_Epoch_Time`` folder name into its fields."""
    parts = name.split("_")
    if len(parts) != len(TRACK_FIELDS):
        raise TrackNameError(
            f"wrong field count in {name!r}: expected {len(TRACK_FIELDS)} "
            f"({'_'.join(TRACK_FIELDS)}), got {len(parts)}"
        )
    for field_name, part in zip(TRACK_FIELDS, parts):
        if not part:
            raise TrackNameError(f"empty field {field_name!r} in {name!r}")
    return FolderMeta(*parts)


def format_track_name(meta: FolderMeta) -> str:
    return meta.format()


@dataclass
class SampleRecord:
    sample_id: str
    label: Label
    attack_category: AttackCategory
    quality_score: float
    meta: FolderMeta
    feature: np.ndarray | None = None

    def __post_init__(self):
        self.label = Label(self.label)
        self.attack_category = AttackCategory(self.attack_category)
        if not (0.0 <= self.quality_score <= 1.0):
            raise ValueError(f"{self.sample_id}: quality_score {self.quality_score!r} outside [0, 1]")
        if (self.attack_category is AttackCategory.NONE) != (self.label is Label.BONAFIDE):
            raise ValueError(
                f"{self.sample_id}: attack_category {self.attack_category.value!r} "
                f"inconsistent with label {self.label.value!r}"
            )
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=float)

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "label": self.label.value,
            "attack_category": self.attack_category.value,
            "quality_score": self.quality_score,
            "meta": asdict(self.meta),
        }
        if self.feature is not None:
            d["feature"] = self.feature.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            sample_id=d["sample_id"],
            label=Label(d["label"]),
            attack_category=AttackCategory(d["attack_category"]),
            quality_score=float(d["quality_score"]),
            meta=FolderMeta(**d["meta"]),
            feature=None if d.get("feature") is None else np.asarray(d["feature"], dtype=float),
        )


def dumps_catalog(records: Iterable[SampleRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def write_catalog(records: Iterable[SampleRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_catalog(records))


def read_catalog(path: str | Path) -> list[SampleRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(SampleRecord.from_dict(json.loads(line)))
    ids = [r.sample_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample_id in catalog")
    return records


# --------------------------------------------------------------------------
# Quality-banded protocol


@dataclass(frozen=True)
class QualityBand:
    low: float
    high: float
    high_closed: bool = False

    def contains(self, score: float) -> bool:
        if score < self.low:
            return False
        return score <= self.high if self.high_closed else score < self.high

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "high_closed": self.high_closed}


PROTOCOL3_BANDS = {
    "train": QualityBand(0.4, 1.0, high_closed=True),
    "dev": QualityBand(0.3, 0.4),
    "test": QualityBand(0.0, 0.3),
}
SPLITS = ("train", "dev", "test")


@dataclass
class ProtocolManifest:
    train_ids: list[str]
    dev_ids: list[str]
    test_ids: list[str]
    bands: dict[str, QualityBand] = field(default_factory=lambda: dict(PROTOCOL3_BANDS))

    def __post_init__(self):
        seen: set[str] = set()
        for split in SPLITS:
            ids = set(self.ids(split))
            if len(ids) != len(self.ids(split)):
                raise ValueError(f"duplicate ids in the {split} split")
            if ids & seen:
                raise ValueError(f"{split} split overlaps an earlier split: {sorted(ids & seen)[:5]}")
            seen |= ids

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise KeyError(f"unknown split {split!r}")
        return getattr(self, f"{split}_ids")

    def split_of(self, sample_id: str) -> str:
        for split in SPLITS:
            if sample_id in self.ids(split):
                return split
        raise KeyError(sample_id)

    def to_dict(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "dev_ids": list(self.dev_ids),
            "test_ids": list(self.test_ids),
            "bands": {k: v.to_dict() for k, v in self.bands.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolManifest":
        return cls(
            train_ids=list(d["train_ids"]),
            dev_ids=list(d["dev_ids"]),
            test_ids=list(d["test_ids"]),
            bands={k: QualityBand(**v) for k, v in d["bands"].items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ProtocolManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def band_of(score: float, bands: dict[str, QualityBand] = PROTOCOL3_BANDS) -> str:
    if not (0.0 <= score <= 1.0) or math.isnan(score):
        raise ValueError(f"quality score {score!r} outside [0, 1]")
    for split in SPLITS:
        if bands[split].contains(score):
            return split
    raise ValueError(f"quality score {score!r} falls in no band")


def build_protocol3(samples: Sequence[SampleRecord]) -> ProtocolManifest:
    """Assign every sample to train/dev/test by its image-quality score.

    Bands are ``[0.4, 1]`` for train, ``[0.3, 0.4)`` for dev and ``[0, 0.3)``
    for test. Input order is preserved within each split.
    """
    splits: dict[str, list[str]] = {s: [] for s in SPLITS}
    for rec in samples:
        splits[band_of(rec.quality_score)].append(rec.sample_id)
    return ProtocolManifest(splits["train"], splits["dev"], splits["test"])


# --------------------------------------------------------------------------
# Class balancing


def max_upsample(
    items: Sequence[tuple[str, Label | int]], seed: int
) -> list[tuple[str, Label | int]]:
    """Balance two classes by resampling the minority class with replacement.

    The originals are kept in input order; the resampled minority ids are
    appended after them. A balanced input comes back as an unchanged copy.
    """
    by_class: dict[int, list[tuple[str, Label | int]]] = {0: [], 1: []}
    for item in items:
        lab = item[1]
        by_class[lab.as_int if isinstance(lab, Label) else int(lab)].append(item)
    if not by_class[0] or not by_class[1]:
        raise ValueError("max_upsample needs at least one sample of each class")
    out = list(items)
    n0, n1 = len(by_class[0]), len(by_class[1])
    if n0 == n1:
        return out
    minority = by_class[0] if n0 < n1 else by_class[1]
    deficit = abs(n1 - n0)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(minority), size=deficit)
    out.extend(minority[i] for i in picks)
    return out


# --------------------------------------------------------------------------
# Synthetic desk-scale data


@dataclass
class SynthConfig:
    """Per-class Gaussian features plus quality scores spread over the three bands.

    ``band_weights`` gives the fraction of each class placed in the train,
    dev and test bands; scores are uniform inside the band. ``quality_noise``
    adds isotropic noise scaled by ``1 - quality`` to mimic low-quality captures.
    """

    mean_bonafide: list[float]
    mean_attack: list[float]
    cov_bonafide: list[list[float]]
    cov_attack: list[list[float]]
    n_bonafide: int = 100
    n_attack: int = 100
    band_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    quality_noise: float = 0.0

    @classmethod
    def separated(cls, dim: int = 16, distance: float = 4.0, **kwargs) -> "SynthConfig":
        """Identity-covariance classes whose means sit ``distance`` apart along the first axis."""
        mu = np.zeros(dim)
        mu[0] = distance / 2
        eye = np.eye(dim).tolist()
        return cls(mu.tolist(), (-mu).tolist(), eye, [row[:] for row in eye], **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "band_weights" in d:
            d["band_weights"] = tuple(d["band_weights"])
        return cls(**d)


def _check_cov(cov: np.ndarray, name: str) -> None:
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(cov, cov.T):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(cov).min() <= 1e-12:
        raise ValueError(f"{name} is degenerate (not positive definite)")


def _band_counts(n: int, weights: Sequence[float]) -> list[int]:
    w = np.asarray(weights, dtype=float)
    if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("band_weights must be three nonnegative numbers with positive sum")
    raw = n * w / w.sum()
    counts = np.floor(raw).astype(int)
    # largest remainder, ties to the earlier band
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def synth_dataset(config: SynthConfig, seed: int) -> list[SampleRecord]:
    mu = {1: np.asarray(config.mean_bonafide, float), 0: np.asarray(config.mean_attack, float)}
    cov = {1: np.asarray(config.cov_bonafide, float), 0: np.asarray(config.cov_attack, float)}
    dim = mu[1].shape[0]
    if mu[0].shape != (dim,):
        raise ValueError("class means must have the same dimension")
    for c, name in ((1, "cov_bonafide"), (0, "cov_attack")):
        if cov[c].shape != (dim, dim):
            raise ValueError(f"{name} must be {dim}x{dim}")
        _check_cov(cov[c], name)
    if config.n_bonafide < 1 or config.n_attack < 1:
        raise ValueError("class counts must be >= 1")

    rng = np.random.default_rng(seed)
    records: list[SampleRecord] = []
    idx = 0
    for c, n in ((1, config.n_bonafide), (0, config.n_attack)):
        chol = np.linalg.cholesky(cov[c])
        feats = mu[c] + rng.standard_normal((n, dim)) @ chol.T
        bands = np.repeat(np.arange(3), _band_counts(n, config.band_weights))
        rng.shuffle(bands)
        for i in range(n):
            band = PROTOCOL3_BANDS[SPLITS[bands[i]]]
            q = float(rng.uniform(band.low, band.high))
            if not band.high_closed and q >= band.high:
                q = float(np.nextafter(band.high, band.low))
            f = feats[i]
            if config.quality_noise:
                f = f + config.quality_noise * (1.0 - q) * rng.standard_normal(dim)
            label = Label.from_int(c)
            cat = AttackCategory.NONE if c == 1 else ATTACK_TYPES[int(rng.integers(len(ATTACK_TYPES)))]
            meta = FolderMeta(
                group=f"G{int(rng.integers(1, 11))}",
                scene=f"S{int(rng.integers(1, 41)):02d}",
                camera=f"C{int(rng.integers(1, 8))}",
                epoch=f"E{int(rng.integers(1, 5))}",
                time=f"T{int(rng.integers(1, 100))}",
            )
            records.append(SampleRecord(f"s{idx:06d}", label, cat, q, meta, f))
            idx += 1
    return records
