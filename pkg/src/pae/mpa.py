"""Modal pre-alignment: frequency-shortcut search and prompt initialization.

Phase I scores every frequency mask by the cross-entropy a probe head gets on
mask-filtered images, and ranks the masks by that loss (lowest first). Phase II
pools the patch tokens of images filtered by each of the top-T masks into one
prompt row each, then pushes that first-layer prompt through the frozen
blocks to get the prompts of the deeper layers.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbone import FrozenBackbone, embed_features, encoder_block, patch_embed
from .spectral import FrequencyMaskSet, filter_image, generate_masks
from .tensor_core import tensor as tc
from .tensor_core.errors import ConfigError, ContractError, NumericError
from .tensor_core.tensor import Tape, Tensor

log = logging.getLogger(__name__)

PROBE_STEPS = 200
PROBE_LR = 0.1


@dataclass
class ProbeHead:
    w: np.ndarray
    b: np.ndarray
    loss_init: float
    loss_final: float
    train_accuracy: float

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.w + self.b

    def describe(self) -> str:
        return f"linear-probe steps={PROBE_STEPS} lr={PROBE_LR} final_loss={self.loss_final:.6f}"


@dataclass
class ShortcutRanking:
    """``(mask_id, loss)`` pairs in ascending loss order, ties broken by mask id."""

    entries: list[tuple[int, float]]
    batch_id: str = ""
    probe: str = ""

    def top(self, t: int) -> list[int]:
        return [i for i, _ in self.entries[:t]]

    def position(self, mask_id: int) -> int:
        return [i for i, _ in self.entries].index(mask_id)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MpaResult:
    ranking: ShortcutRanking
    masks: FrequencyMaskSet
    probe: ProbeHead
    prompts: np.ndarray  # (L, T, d)
    batch_index: np.ndarray
    phase1_seconds: float
    phase2_seconds: float
    meta: dict = field(default_factory=dict)


def _softmax_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(tc.cross_entropy(Tensor(logits), labels).data)


def fit_probe_head(backbone: FrozenBackbone, images: np.ndarray, labels: np.ndarray,
                   classes: int, seed: int = 0, steps: int = PROBE_STEPS,
                   lr: float = PROBE_LR) -> ProbeHead:
    """Full-batch gradient descent on a linear head over unfiltered embeddings."""
    if len(labels) == 0:
        raise ContractError("probe batch is empty")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= classes:
        raise ContractError(f"labels outside 0..{classes - 1}")
    feats = embed_features(backbone, images)
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0.0, 0.01, size=(feats.shape[1], classes)), requires_grad=True)
    b = Tensor(np.zeros(classes), requires_grad=True)
    X = Tensor(feats)
    loss_init = None
    for _ in range(steps):
        w.grad = b.grad = None
        with Tape() as tape:
            loss = tc.cross_entropy(X @ w + b, labels)
        if loss_init is None:
            loss_init = loss.item()
        tape.backward(loss, [w, b])
        w.data = w.data - lr * w.grad
        b.data = b.data - lr * b.grad
    logits = feats @ w.data + b.data
    return ProbeHead(w.data, b.data, float(loss_init),
                     _softmax_ce(logits, labels),
                     float(np.mean(np.argmax(logits, 1) == labels)))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PAE_THREADS", "1")))
    except ValueError:
        return 1


def score_mask(backbone: FrozenBackbone, probe: ProbeHead, images: np.ndarray,
               labels: np.ndarray, mask) -> float:
    filtered = filter_image(images, mask)
    return _softmax_ce(probe.logits(embed_features(backbone, filtered)), labels)


def discover_shortcuts(backbone: FrozenBackbone, probe: ProbeHead, images: np.ndarray,
                       labels: np.ndarray, masks: FrequencyMaskSet,
                       batch_id: str = "") -> ShortcutRanking:
    """Rank masks by probe cross-entropy on the filtered batch, lowest first.

    Each mask is scored independently, so scoring may be spread over
    ``PAE_THREADS`` workers without changing the result.
    """
    if len(images) < 2:
        raise ContractError("shortcut discovery needs a batch of at least 2 images")
    labels = np.asarray(labels, dtype=np.int64)

    def job(i):
        return i, score_mask(backbone, probe, images, labels, masks[i])

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scored = dict(pool.map(job, range(len(masks))))
    else:
        scored = dict(map(job, range(len(masks))))
    entries = sorted(scored.items(), key=lambda kv: (kv[1], kv[0]))
    return ShortcutRanking(entries, batch_id=batch_id, probe=probe.describe())


def energy_pooling(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Energy-weighted mean of a ``(B, N, d)`` token set.

    Weights are squared token norms normalized over the whole ``(j, n)`` grid.
    Returns ``(rho, weights)``.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    if tokens.shape[0] * tokens.shape[1] == 0:
        raise ContractError("energy pooling needs at least one token")
    energy = np.sum(tokens * tokens, axis=-1)
    total = energy.sum()
    if not total > 0:
        raise NumericError("all tokens have zero energy; pooling weights are undefined")
    weights = energy / total
    return np.einsum("jn,jnd->d", weights, tokens), weights


def build_first_prompt(backbone: FrozenBackbone, images: np.ndarray,
                       masks: FrequencyMaskSet, top_ids: list[int]) -> np.ndarray:
    """Stack one pooled token per selected mask into a ``(T, d)`` prompt."""
    if len(top_ids) > len(masks):
        raise ConfigError(f"prompt length T={len(top_ids)} exceeds the {len(masks)} masks")
    W = backbone.constants()
    rows = []
    for mask_id in top_ids:
        tokens = patch_embed(filter_image(images, masks[mask_id]), W, backbone.config.patch).data
        rho, _ = energy_pooling(tokens[:, 1:, :])
        rows.append(rho)
    return np.stack(rows)


def propagate_init(backbone: FrozenBackbone, first: np.ndarray, copy: bool = False) -> np.ndarray:
    """``(L, T, d)`` prompts with ``P_{i+1} = E_i(P_i)``; only the prompt enters each block.

    ``copy=True`` repeats ``first`` at every layer instead (ablation).
    """
    cfg = backbone.config
    prompts = [np.asarray(first, dtype=np.float64)]
    W = backbone.constants()
    for i in range(cfg.layers - 1):
        prompts.append(prompts[-1].copy() if copy else encoder_block(Tensor(prompts[-1]), W, i, cfg.heads).data)
    return np.stack(prompts)


def run_mpa(backbone: FrozenBackbone, images: np.ndarray, labels: np.ndarray,
            classes: int, prompt_t: int, w: int, r: int, batch: int, seed: int,
            copy: bool = False) -> MpaResult:
    """Both phases on one seeded mini-batch drawn from ``images``."""
    rng = np.random.default_rng([seed, 0x4D5041])
    idx = np.sort(rng.choice(len(images), size=min(batch, len(images)), replace=False))
    x, y = images[idx], labels[idx]
    cfg = backbone.config
    masks = generate_masks(cfg.img_h, cfg.img_w, w, r)
    if prompt_t > len(masks):
        raise ConfigError(f"prompt length T={prompt_t} exceeds the {len(masks)} masks")

    t0 = time.perf_counter()
    probe = fit_probe_head(backbone, x, y, classes, seed=seed)
    ranking = discover_shortcuts(backbone, probe, x, y, masks, batch_id=f"seed={seed}")
    phase1 = time.perf_counter() - t0

    t0 = time.perf_counter()
    top = ranking.top(prompt_t)
    first = build_first_prompt(backbone, x, masks, top)
    prompts = propagate_init(backbone, first, copy=copy)
    phase2 = time.perf_counter() - t0
    log.info("MPA top-%d masks %s (phase I %.2fs)", prompt_t, top, phase1)
    return MpaResult(ranking, masks, probe, prompts, idx, phase1, phase2)
