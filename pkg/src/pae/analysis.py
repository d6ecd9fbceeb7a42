"""Post-hoc diagnostics: Koopman spectra and cross-layer prompt similarity."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .kld import KoopmanSystem
from .tensor_core.eig import eigenvalues, sort_spectrum
from .tensor_core.errors import NumericError, ShapeError


@dataclass
class SpectrumReport:
    tag: str  # "global" or "layer<i>"
    eigenvalues: np.ndarray  # complex, sorted

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.eigenvalues)))

    def to_json(self) -> dict:
        return {
            "operator": self.tag,
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "spectral_radius": self.spectral_radius,
            "mean_abs": self.mean_abs,
        }


def spectral_radius(K: np.ndarray) -> float:
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"spectral radius needs a square matrix, got {K.shape}")
    return float(np.max(np.abs(eigenvalues(K))))


def spectrum_report(system: KoopmanSystem) -> list[SpectrumReport]:
    """One report for a shared operator, one per transition for a layer-wise stack."""
    if system.layerwise:
        return [SpectrumReport(f"layer{i + 1}", sort_spectrum(eigenvalues(K)))
                for i, K in enumerate(system.K)]
    return [SpectrumReport("global", sort_spectrum(eigenvalues(system.K)))]


def linear_cka(X, Y) -> float:
    """Linear CKA between ``(n, p)`` and ``(n, q)`` representations, rows as samples."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"CKA needs matching sample counts, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise NumericError("CKA needs at least two samples")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    nx = np.linalg.norm(Xc.T @ Xc)
    ny = np.linalg.norm(Yc.T @ Yc)
    if nx == 0 or ny == 0:
        raise NumericError("degenerate input: a representation has zero variance after centering")
    value = np.linalg.norm(Xc.T @ Yc) ** 2 / (nx * ny)
    return float(min(max(value, 0.0), 1.0))


def prompt_cka_matrix(prompts: Sequence[np.ndarray]) -> np.ndarray:
    L = len(prompts)
    if L < 2:
        raise ShapeError("CKA matrix needs at least two layers")
    M = np.eye(L)
    for i in range(L):
        for j in range(i + 1, L):
            try:
                M[i, j] = M[j, i] = linear_cka(prompts[i], prompts[j])
            except NumericError as exc:
                bad = i if np.ptp(np.asarray(prompts[i]), axis=0).max() == 0 else j
                raise NumericError(f"layer {bad + 1}: {exc}") from exc
    return M


def distance_spearman(M: np.ndarray) -> float:
    """Spearman correlation between ``|i - j|`` and ``M[i, j]`` over pairs ``i < j``."""
    L = M.shape[0]
    iu = np.triu_indices(L, k=1)
    dist = np.abs(iu[0] - iu[1])
    if np.ptp(dist) == 0:
        raise NumericError("need at least three layers for a distance correlation")
    vals = M[iu]
    if np.ptp(vals) == 0:
        return 0.0
    return float(spearmanr(dist, vals).statistic)


def write_spectrum_json(reports: list[SpectrumReport], path) -> Path:
    path = Path(path)
    payload = {"reports": [r.to_json() for r in reports],
               "max_spectral_radius": max(r.spectral_radius for r in reports)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_cka_csv(M: np.ndarray, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer"] + [f"p{j + 1}" for j in range(M.shape[1])])
        for i, row in enumerate(M):
            w.writerow([f"p{i + 1}"] + [repr(float(v)) for v in row])
    return path
