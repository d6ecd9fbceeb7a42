"""Frequency-planted classification images with a known answer key.

Every class owns a small window of the centered spectrum. A sample of class
``c`` is white noise plus a few random-phase cosines whose frequencies lie in
``c``'s window. Windows sit on the stride grid of the mask generator, so the
masks that should win the shortcut search are known exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .spectral import FrequencyMaskSet, symmetrize
from .tensor_core.errors import ConfigError

SPLITS = ("train", "val", "test")
_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
_STREAM_IDS = {"downstream": 11, "source": 23}

# (row, col) origins of 4x4 cells on the stride-4 grid of a 32x32 spectrum.
DOWNSTREAM_WINDOWS = ((0, 0), (0, 4), (0, 8), (0, 12), (4, 0), (4, 4), (4, 8), (4, 12))
SOURCE_WINDOWS = ((8, 0), (8, 4), (8, 8), (8, 12), (12, 0), (12, 4), (12, 8), (12, 12))


@dataclass(frozen=True)
class PlantedTaskSpec:
    classes: int = 8
    img_h: int = 32
    img_w: int = 32
    windows: tuple[tuple[int, int], ...] = DOWNSTREAM_WINDOWS
    window_size: int = 4
    grid_stride: int = 4
    components: int = 3
    signal_amp: float = 0.28
    noise_amp: float = 0.2
    n_train: int = 512
    n_val: int = 256
    n_test: int = 256
    seed: int = 0
    stream: str = "downstream"

    def planted_grid(self, c: int) -> np.ndarray:
        """Symmetrized 0/1 support of class ``c``'s window."""
        g = np.zeros((self.img_h, self.img_w))
        r, col = self.windows[c]
        g[r:r + self.window_size, col:col + self.window_size] = 1.0
        return symmetrize(g)

    def validate(self) -> None:
        if len(self.windows) != self.classes:
            raise ConfigError(f"{len(self.windows)} windows for {self.classes} classes")
        if self.stream not in _STREAM_IDS:
            raise ConfigError(f"unknown seed stream {self.stream!r}")
        for r, c in self.windows:
            if r % self.grid_stride or c % self.grid_stride:
                raise ConfigError(f"window origin ({r},{c}) is off the stride-{self.grid_stride} grid")
            if r + self.window_size > self.img_h or c + self.window_size > self.img_w:
                raise ConfigError(f"window origin ({r},{c}) runs off the spectrum")
        union = np.zeros((self.img_h, self.img_w))
        for c in range(self.classes):
            g = self.planted_grid(c)
            if np.any(union * g):
                raise ConfigError(f"planted window of class {c} overlaps another class")
            union += g
        dc = (self.img_h // 2, self.img_w // 2)
        if union[dc]:
            raise ConfigError("a planted window covers the zero-frequency bin")

    def to_json(self) -> dict:
        out = asdict(self)
        out["windows"] = [list(w) for w in self.windows]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "PlantedTaskSpec":
        data = dict(data)
        data["windows"] = tuple(tuple(w) for w in data["windows"])
        return cls(**data)


def source_spec(seed: int = 0, **overrides) -> PlantedTaskSpec:
    """Class-disjoint source task for backbone pretraining."""
    base = PlantedTaskSpec(windows=SOURCE_WINDOWS, seed=seed, stream="source",
                           n_train=2048, n_val=512, n_test=0)
    return replace(base, **overrides)


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    spec: PlantedTaskSpec
    splits: dict[str, Split] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def _sample(spec: PlantedTaskSpec, label: int, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    h, w = spec.img_h, spec.img_w
    yy, xx = np.mgrid[0:h, 0:w]
    r0, c0 = spec.windows[label]
    img = spec.noise_amp * rng.standard_normal((h, w))
    rows = rng.integers(r0, r0 + spec.window_size, size=spec.components)
    cols = rng.integers(c0, c0 + spec.window_size, size=spec.components)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.components)
    for row, col, phi in zip(rows, cols, phases):
        ky, kx = row - h // 2, col - w // 2
        img += spec.signal_amp * np.cos(2.0 * np.pi * (ky * yy / h + kx * xx / w) + phi)
    return np.clip(img, -1.0, 1.0) if clip else img


def generate_split(spec: PlantedTaskSpec, split: str, n: int) -> Split:
    """Sample ``i`` depends only on ``(seed, stream, split, i)``."""
    labels = np.arange(n) % spec.classes
    images = np.empty((n, spec.img_h, spec.img_w))
    for i in range(n):
        rng = np.random.default_rng([spec.seed, _STREAM_IDS[spec.stream], _SPLIT_IDS[split], i])
        images[i] = _sample(spec, int(labels[i]), rng)
    return Split(images, labels)


def generate_dataset(spec: PlantedTaskSpec) -> Dataset:
    spec.validate()
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    return Dataset(spec, {name: generate_split(spec, name, sizes[name]) for name in SPLITS})


def window_energy(images: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Per-image spectral energy inside a 0/1 grid of the centered spectrum."""
    spec = np.fft.fftshift(np.fft.fft2(images), axes=(-2, -1))
    return (np.abs(spec) ** 2 * grid).sum(axis=(-2, -1))


def clip_fraction(spec: PlantedTaskSpec, n: int = 256) -> float:
    """Fraction of pixels that saturate the [-1, 1] clip at the configured amplitudes."""
    labels = np.arange(n) % spec.classes
    hits = 0
    for i in range(n):
        rng = np.random.default_rng([spec.seed, _STREAM_IDS[spec.stream], _SPLIT_IDS["train"], i])
        hits += np.sum(np.abs(_sample(spec, int(labels[i]), rng, clip=False)) > 1.0)
    return hits / (n * spec.img_h * spec.img_w)


# ---------------------------------------------------------------- recovery scoring

def overlapping_masks(spec: PlantedTaskSpec, masks: FrequencyMaskSet) -> np.ndarray:
    """Boolean per mask: does its support intersect any planted window?"""
    if (masks.img_h, masks.img_w) != (spec.img_h, spec.img_w):
        raise ConfigError("mask grid and planted spec disagree on image size")
    if spec.grid_stride % masks.r and masks.r % spec.grid_stride:
        raise ConfigError(f"mask stride {masks.r} incompatible with planted grid stride {spec.grid_stride}")
    union = np.zeros((spec.img_h, spec.img_w))
    for c in range(spec.classes):
        union = np.maximum(union, spec.planted_grid(c))
    return np.array([bool(np.any(m.grid * union)) for m in masks])


def shortcut_recovery_score(ranking, spec: PlantedTaskSpec, masks: FrequencyMaskSet, top_t: int) -> float:
    """Fraction of the ``top_t`` ranked masks that touch a planted window."""
    ids = [entry[0] for entry in ranking.entries[:top_t]] if hasattr(ranking, "entries") else list(ranking)[:top_t]
    if len(ranking.entries if hasattr(ranking, "entries") else ranking) != len(masks):
        raise ConfigError("ranking length does not match the mask grid")
    hits = overlapping_masks(spec, masks)
    return float(np.mean([hits[i] for i in ids]))


def permutation_baseline(spec: PlantedTaskSpec, masks: FrequencyMaskSet, top_t: int,
                         n_perm: int = 1000, seed: int = 0) -> float:
    """Mean recovery score of uniformly random rankings."""
    hits = overlapping_masks(spec, masks)
    rng = np.random.default_rng(seed)
    scores = [hits[rng.permutation(len(masks))[:top_t]].mean() for _ in range(n_perm)]
    return float(np.mean(scores))


# ---------------------------------------------------------------- persistence

def save_dataset(dataset: Dataset, directory, prefix: str = "") -> list[Path]:
    from .tensor_core.io import save_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    rows = ["split,index,label"]
    for name, split in dataset.splits.items():
        path = directory / f"{prefix}{name}.paet"
        save_tensor(path, split.images)
        written.append(path)
        rows += [f"{name},{i},{int(y)}" for i, y in enumerate(split.labels)]
    labels = directory / f"{prefix}labels.csv"
    labels.write_text("\n".join(rows) + "\n")
    spec_path = directory / f"{prefix}spec.json"
    spec_path.write_text(json.dumps(dataset.spec.to_json(), indent=2, sort_keys=True) + "\n")
    return written + [labels, spec_path]


def load_dataset(directory, prefix: str = "") -> Dataset:
    from .tensor_core.io import load_tensor

    directory = Path(directory)
    spec = PlantedTaskSpec.from_json(json.loads((directory / f"{prefix}spec.json").read_text()))
    labels: dict[str, list[int]] = {name: [] for name in SPLITS}
    for line in (directory / f"{prefix}labels.csv").read_text().split("\n")[1:]:
        if line:
            name, _, y = line.split(",")
            labels[name].append(int(y))
    splits = {}
    for name in SPLITS:
        images = load_tensor(directory / f"{prefix}{name}.paet")
        splits[name] = Split(images, np.array(labels[name], dtype=np.int64))
    return Dataset(spec, splits)
