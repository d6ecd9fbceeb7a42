"""Koopman-Lyapunov dynamics over the per-layer prompt matrices.

Prompts are lifted by a shared ``U`` (d x k), advanced one layer by a shared
operator ``K`` (k x k), and scored with two penalties:

* consistency: ``sum_i ||P_{i+1} U - P_i U K||_F^2``
* stability:   ``sum_i max(0, V(z_{i+1}) - V(z_i))`` with ``V(z) = tr(z Q z^T)``

``Q = A A^T + eps I`` keeps the Lyapunov metric positive definite under
unconstrained updates of ``A``. Both losses are written with tensor ops so the
tape differentiates them during training; the closed-form gradients below are
kept as independent checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_core import tensor as tc
from .tensor_core.errors import ConfigError, ShapeError
from .tensor_core.io import load_tensor, save_tensor
from .tensor_core.tensor import Tensor, as_tensor

DEFAULT_EPS = 1e-4


@dataclass
class KoopmanSystem:
    """Trainable lifting, operator(s) and SPD factor.

    ``K`` is one ``(k, k)`` array on the default path. The layer-wise ablation
    stores an ``(L-1, k, k)`` stack, one independent operator per transition.
    """

    U: np.ndarray
    K: np.ndarray
    A: np.ndarray
    eps: float = DEFAULT_EPS

    @property
    def k_dim(self) -> int:
        return self.U.shape[1]

    @property
    def layerwise(self) -> bool:
        return self.K.ndim == 3

    def Q(self) -> np.ndarray:
        return spd_materialize(self.A, self.eps).data

    def operators(self) -> list[np.ndarray]:
        return list(self.K) if self.layerwise else [self.K]


def init_system(d: int, k_dim: int, seed: int, layers: int | None = None,
                layerwise: bool = False, eps: float = DEFAULT_EPS) -> KoopmanSystem:
    """Kaiming-uniform ``U`` on +-sqrt(6/d); identity operator(s); ``A = I``."""
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / d)
    U = rng.uniform(-bound, bound, size=(d, k_dim))
    if layerwise:
        if layers is None or layers < 2:
            raise ConfigError("layer-wise operators need layers >= 2")
        K = np.stack([np.eye(k_dim) for _ in range(layers - 1)])
    else:
        K = np.eye(k_dim)
    return KoopmanSystem(U, K, np.eye(k_dim), eps)


# ---------------------------------------------------------------- forward maps

def lift(P, U) -> Tensor:
    P, U = as_tensor(P), as_tensor(U)
    if P.shape[-1] != U.shape[0]:
        raise ShapeError(f"cannot lift prompt {P.shape} with U {U.shape}")
    return P @ U


def evolve(z, K) -> Tensor:
    z, K = as_tensor(z), as_tensor(K)
    if z.shape[-1] != K.shape[0] or K.shape[0] != K.shape[1]:
        raise ShapeError(f"cannot evolve state {z.shape} with operator {K.shape}")
    return z @ K


def _operator(K, i: int):
    """Operator for transition ``i -> i+1``: shared matrix or the i-th of a stack."""
    K = as_tensor(K)
    return K[i] if K.ndim == 3 else K


def loss_kp(prompts: Sequence, U, K) -> Tensor:
    """Koopman consistency: ``sum_i ||P_{i+1} U - P_i U K_i||_F^2`` (``K_i = K`` when shared)."""
    if len(prompts) < 2:
        raise ConfigError("Koopman consistency needs at least two layers")
    z = [lift(P, U) for P in prompts]
    total = None
    for i in range(len(z) - 1):
        term = tc.frobenius_norm_sq(z[i + 1] - evolve(z[i], _operator(K, i)))
        total = term if total is None else total + term
    return total


def spd_materialize(A, eps: float = DEFAULT_EPS) -> Tensor:
    """``Q = A A^T + eps I``; symmetric with smallest eigenvalue >= eps."""
    if not eps > 0:
        raise ConfigError(f"SPD floor eps must be positive, got {eps}")
    A = as_tensor(A)
    return A @ A.T + eps * np.eye(A.shape[0])


def lyapunov_V(z, Q) -> Tensor:
    """``tr(z Q z^T)``, written as the elementwise sum of ``z * (z Q)``."""
    z, Q = as_tensor(z), as_tensor(Q)
    return (z * (z @ Q)).sum()


def loss_stab(trajectory: Sequence, Q) -> Tensor:
    """``sum_i max(0, V(z_{i+1}) - V(z_i))`` over consecutive lifted states."""
    if len(trajectory) < 2:
        raise ConfigError("the stability hinge needs at least two layers")
    V = [lyapunov_V(z, Q) for z in trajectory]
    total = None
    for i in range(len(V) - 1):
        term = tc.relu(V[i + 1] - V[i])
        total = term if total is None else total + term
    return total


def lyapunov_values(prompts: Sequence[np.ndarray], U: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return np.array([np.trace(P @ U @ Q @ (P @ U).T) for P in prompts])


# ---------------------------------------------------------------- closed-form gradients

def grad_kp_analytic(prompts: Sequence[np.ndarray], U: np.ndarray, K: np.ndarray) -> list[np.ndarray]:
    """d L_kp / d P_i from the preceding- and succeeding-layer consistency terms."""
    L = len(prompts)
    if L < 2:
        raise ConfigError("Koopman consistency needs at least two layers")
    z = [P @ U for P in prompts]
    ops = [K[i] if K.ndim == 3 else K for i in range(L - 1)]
    grads = []
    for i in range(L):
        g = np.zeros_like(prompts[i])
        if i > 0:
            g += 2.0 * (z[i] - z[i - 1] @ ops[i - 1]) @ U.T
        if i < L - 1:
            g += 2.0 * (z[i] @ ops[i] - z[i + 1]) @ (U @ ops[i]).T
        grads.append(g)
    return grads


def grad_stab_analytic(prompts: Sequence[np.ndarray], U: np.ndarray, Q: np.ndarray) -> list[np.ndarray]:
    """d L_stab / d P_i = 2 (eta_{i-1} - eta_i) z_i Q U^T with eta_i = 1[dV_i > 0].

    Endpoints keep only the term that exists (L-1 hinge terms in total).
    """
    L = len(prompts)
    V = lyapunov_values(prompts, U, Q)
    eta = (np.diff(V) > 0).astype(np.float64)
    grads = []
    for i in range(L):
        coeff = (eta[i - 1] if i > 0 else 0.0) - (eta[i] if i < L - 1 else 0.0)
        grads.append(2.0 * coeff * (prompts[i] @ U) @ Q @ U.T)
    return grads


# ---------------------------------------------------------------- persistence

def save_system(system: KoopmanSystem, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, arr in (("U", system.U), ("K", system.K), ("A", system.A), ("eps", np.array(system.eps))):
        path = directory / f"{name}.paet"
        save_tensor(path, arr)
        paths.append(path)
    manifest = directory / "koopman.txt"
    manifest.write_text(f"k_dim={system.k_dim}\nlayerwise={int(system.layerwise)}\n")
    return paths + [manifest]


def load_system(directory) -> KoopmanSystem:
    directory = Path(directory)
    return KoopmanSystem(
        U=load_tensor(directory / "U.paet"),
        K=load_tensor(directory / "K.paet"),
        A=load_tensor(directory / "A.paet"),
        eps=float(load_tensor(directory / "eps.paet")),
    )
