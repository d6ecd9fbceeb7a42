"""Centered 2D Fourier analysis and sliding-window frequency masks.

Spectra are fftshift-centered: zero frequency sits at ``(img_h // 2, img_w // 2)``
and window origins index that centered grid. Every mask is closed under point
reflection about the zero-frequency bin so filtered images stay real.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core.errors import ConfigError, ShapeError
from .tensor_core.io import load_tensor, save_tensor


def _check_pow2(n: int) -> None:
    if n < 1 or n & (n - 1):
        raise ConfigError(f"image extent {n} is not a power of two")


def fft2(image: np.ndarray) -> np.ndarray:
    """Centered complex spectrum of a real ``img_h x img_w`` image (unnormalized)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 2:
        raise ShapeError(f"fft2 needs a 2D image, got shape {image.shape}")
    _check_pow2(image.shape[-2])
    _check_pow2(image.shape[-1])
    return np.fft.fftshift(np.fft.fft2(image), axes=(-2, -1))


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`; returns the complex spatial field."""
    return np.fft.ifft2(np.fft.ifftshift(spectrum, axes=(-2, -1)))


def reflect_index(i: int, n: int) -> int:
    """Point reflection of a centered index about the zero-frequency bin."""
    return (n - i) % n


def symmetrize(grid: np.ndarray) -> np.ndarray:
    """Union of a 0/1 grid with its point reflection about the centered origin."""
    h, w = grid.shape
    rows = (h - np.arange(h)) % h
    cols = (w - np.arange(w)) % w
    return np.maximum(grid, grid[np.ix_(rows, cols)])


@dataclass(frozen=True)
class FrequencyMask:
    img_h: int
    img_w: int
    origin: tuple[int, int]
    w: int
    grid: np.ndarray = field(repr=False, compare=False)

    @property
    def raw(self) -> np.ndarray:
        """The un-symmetrized ``w x w`` window."""
        out = np.zeros((self.img_h, self.img_w))
        r, c = self.origin
        out[r:r + self.w, c:c + self.w] = 1.0
        return out

    def sidecar(self) -> str:
        return f"origin=({self.origin[0]},{self.origin[1]}) w={self.w}"


@dataclass(frozen=True)
class FrequencyMaskSet:
    img_h: int
    img_w: int
    w: int
    r: int
    masks: tuple[FrequencyMask, ...]

    def __len__(self) -> int:
        return len(self.masks)

    def __getitem__(self, i: int) -> FrequencyMask:
        return self.masks[i]

    def __iter__(self):
        return iter(self.masks)

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [m.origin for m in self.masks]

    def stack(self) -> np.ndarray:
        return np.stack([m.grid for m in self.masks])


def mask_count(img_h: int, img_w: int, w: int, r: int) -> int:
    return ((img_h - w) // r + 1) * ((img_w - w) // r + 1)


def window_mask(img_h: int, img_w: int, origin: tuple[int, int], w: int) -> FrequencyMask:
    raw = np.zeros((img_h, img_w))
    r, c = origin
    raw[r:r + w, c:c + w] = 1.0
    return FrequencyMask(img_h, img_w, (int(r), int(c)), int(w), symmetrize(raw))


def generate_masks(img_h: int, img_w: int, w: int, r: int) -> FrequencyMaskSet:
    """One symmetrized ``w x w`` window mask per stride-``r`` origin, in row-major scan order."""
    if not 1 <= w <= min(img_h, img_w):
        raise ConfigError(f"window size w={w} must lie in [1, {min(img_h, img_w)}]")
    if r < 1:
        raise ConfigError(f"stride r={r} must be positive")
    masks = tuple(
        window_mask(img_h, img_w, (row, col), w)
        for row in range(0, img_h - w + 1, r)
        for col in range(0, img_w - w + 1, r)
    )
    return FrequencyMaskSet(img_h, img_w, w, r, masks)


def filter_image(image: np.ndarray, mask) -> np.ndarray:
    """Real part of ``ifft2(mask * fft2(image))``.

    ``image`` may carry leading batch or channel axes; the mask applies to the
    last two. ``mask`` is a :class:`FrequencyMask` or a plain 0/1 array.
    """
    grid = mask.grid if isinstance(mask, FrequencyMask) else np.asarray(mask, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != grid.shape:
        raise ShapeError(f"mask shape {grid.shape} does not match image shape {image.shape[-2:]}")
    return ifft2(fft2(image) * grid).real


def save_masks(mask_set: FrequencyMaskSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "masks.paet", mask_set.stack())
    lines = [m.sidecar() for m in mask_set]
    (directory / "masks.txt").write_text("\n".join(lines) + "\n")


def load_masks(directory, r: int) -> FrequencyMaskSet:
    directory = Path(directory)
    grids = load_tensor(directory / "masks.paet")
    masks = []
    for grid, line in zip(grids, (directory / "masks.txt").read_text().split("\n")):
        origin_part, w_part = line.split()
        row, col = origin_part.removeprefix("origin=(").removesuffix(")").split(",")
        masks.append(FrequencyMask(grid.shape[0], grid.shape[1], (int(row), int(col)),
                                   int(w_part.removeprefix("w=")), grid))
    h, w = grids.shape[1:]
    return FrequencyMaskSet(h, w, masks[0].w, r, tuple(masks))
