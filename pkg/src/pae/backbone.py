"""Tiny pre-norm Vision Transformer that hosts deep visual prompts.

Weights live in a flat ``name -> ndarray`` dict. Once a backbone is frozen the
arrays are made read-only, and tuning code only ever sees them wrapped as
constant tensors, so no gradient can reach them.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_core import tensor as tc
from .tensor_core.errors import ConfigError, ShapeError
from .tensor_core.io import load_tensor, save_tensor
from .tensor_core.tensor import Tape, Tensor

log = logging.getLogger(__name__)

LN_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    img_h: int = 32
    img_w: int = 32
    patch: int = 4
    d: int = 32
    heads: int = 4
    layers: int = 4
    classes: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.img_h % self.patch or self.img_w % self.patch:
            raise ConfigError(
                f"image {self.img_h}x{self.img_w} not divisible by patch {self.patch}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.img_h // self.patch) * (self.img_w // self.patch)

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ViTConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, hidden = cfg.d, cfg.d * cfg.mlp_ratio
    p = {
        "patch.w": _xavier(rng, cfg.patch * cfg.patch, d),
        "patch.b": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, size=(1, d)),
        "pos": rng.normal(0.0, 0.02, size=(cfg.n_patches + 1, d)),
    }
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        p[b + "ln1.g"] = np.ones(d)
        p[b + "ln1.b"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            p[b + f"attn.w{name}"] = _xavier(rng, d, d)
            p[b + f"attn.b{name}"] = np.zeros(d)
        p[b + "ln2.g"] = np.ones(d)
        p[b + "ln2.b"] = np.zeros(d)
        p[b + "mlp.w1"] = _xavier(rng, d, hidden)
        p[b + "mlp.b1"] = np.zeros(hidden)
        p[b + "mlp.w2"] = _xavier(rng, hidden, d)
        p[b + "mlp.b2"] = np.zeros(d)
    p["norm.g"] = np.ones(d)
    p["norm.b"] = np.zeros(d)
    p["head.w"] = np.zeros((d, cfg.classes))
    p["head.b"] = np.zeros(cfg.classes)
    return p


@dataclass
class FrozenBackbone:
    config: ViTConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    source_task: str = "none"
    _constants: dict[str, Tensor] | None = field(default=None, repr=False, compare=False)

    def freeze(self) -> "FrozenBackbone":
        for arr in self.params.values():
            arr.setflags(write=False)
        self._constants = None
        return self

    def constants(self) -> dict[str, Tensor]:
        """Weights wrapped as non-differentiable tensors (cached)."""
        if self._constants is None:
            self._constants = {k: Tensor(v) for k, v in self.params.items()}
        return self._constants

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def init_backbone(cfg: ViTConfig, seed: int) -> FrozenBackbone:
    return FrozenBackbone(cfg, init_params(cfg, seed), seed=seed)


# ---------------------------------------------------------------- forward pieces

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W)`` images to ``(B, N, patch*patch)`` row-major patch vectors."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    b, h, w = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


def patch_tokens(images: np.ndarray, W: dict[str, Tensor], patch: int) -> Tensor:
    """Linear patch projection only: ``(B, N, d)``, no class token or positions."""
    return Tensor(patchify(images, patch)) @ W["patch.w"] + W["patch.b"]


def patch_embed(images: np.ndarray, W: dict[str, Tensor], patch: int) -> Tensor:
    """``(B, N+1, d)`` tokens: class token first, positional table added."""
    tokens = patch_tokens(images, W, patch)
    b, _, d = tokens.shape
    cls = tc.broadcast_to(tc.reshape(W["cls"], (1, 1, d)), (b, 1, d))
    return tc.concat([cls, tokens], axis=1) + W["pos"]


def attention(x: Tensor, W: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, m, d = x.shape
    hd = d // heads

    def split(t):
        return tc.transpose(tc.reshape(t, (b, m, heads, hd)), (0, 2, 1, 3))

    q = split(x @ W[prefix + "wq"] + W[prefix + "bq"])
    k = split(x @ W[prefix + "wk"] + W[prefix + "bk"])
    v = split(x @ W[prefix + "wv"] + W[prefix + "bv"])
    att = tc.softmax((q @ k.T) * (1.0 / np.sqrt(hd)), axis=-1)
    out = tc.reshape(tc.transpose(att @ v, (0, 2, 1, 3)), (b, m, d))
    return out @ W[prefix + "wo"] + W[prefix + "bo"]


def encoder_block(tokens: Tensor, W: dict[str, Tensor], layer: int, heads: int) -> Tensor:
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``+ MLP(LN(.))``.

    Accepts ``(M, d)`` or ``(B, M, d)`` tokens.
    """
    squeeze = tokens.ndim == 2
    x = tc.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    b = f"blocks.{layer}."
    x = x + attention(tc.layer_norm(x, W[b + "ln1.g"], W[b + "ln1.b"], LN_EPS), W, b + "attn.", heads)
    h = tc.layer_norm(x, W[b + "ln2.g"], W[b + "ln2.b"], LN_EPS)
    x = x + tc.gelu(h @ W[b + "mlp.w1"] + W[b + "mlp.b1"]) @ W[b + "mlp.w2"] + W[b + "mlp.b2"]
    return tc.reshape(x, x.shape[1:]) if squeeze else x


def forward_features(
    images: np.ndarray,
    W: dict[str, Tensor],
    cfg: ViTConfig,
    prompts: Sequence[Tensor] | None = None,
) -> Tensor:
    """Normalized class-token output of the last layer, ``(B, d)``.

    ``prompts`` holds one ``(T, d)`` tensor per layer. Layer ``i`` sees
    ``[P_i; class; patches]``; its prompt-row outputs are dropped and replaced
    by ``P_{i+1}`` at the next layer.
    """
    x = patch_embed(images, W, cfg.patch)
    bsz = x.shape[0]
    if prompts is not None and len(prompts) != cfg.layers:
        raise ShapeError(f"expected {cfg.layers} prompt matrices, got {len(prompts)}")
    for i in range(cfg.layers):
        t = 0
        if prompts is not None:
            p = prompts[i]
            if p.ndim != 2 or p.shape[1] != cfg.d:
                raise ShapeError(f"prompt {i} has shape {p.shape}, expected (T, {cfg.d})")
            t = p.shape[0]
        if t:
            x = tc.concat([tc.broadcast_to(tc.reshape(p, (1, t, cfg.d)), (bsz, t, cfg.d)), x], axis=1)
        x = encoder_block(x, W, i, cfg.heads)
        if t:
            x = x[:, t:, :]
    return tc.layer_norm(x[:, 0, :], W["norm.g"], W["norm.b"], LN_EPS)


def forward_deep_prompted(
    images: np.ndarray,
    prompts: Sequence[Tensor] | np.ndarray | None,
    backbone: FrozenBackbone,
    head: tuple[Tensor, Tensor] | None = None,
) -> Tensor:
    """Logits ``(B, C)``. ``head`` defaults to the backbone's own classifier."""
    W = backbone.constants()
    if prompts is not None and not isinstance(prompts[0], Tensor):
        prompts = [Tensor(p) for p in np.asarray(prompts)]
    feats = forward_features(images, W, backbone.config, prompts)
    hw, hb = head if head is not None else (W["head.w"], W["head.b"])
    return feats @ hw + hb


def embed_features(backbone: FrozenBackbone, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Prompt-free class-token features as a plain array (no tape)."""
    W = backbone.constants()
    out = [forward_features(images[i:i + chunk], W, backbone.config).data
           for i in range(0, len(images), chunk)]
    return np.concatenate(out, axis=0)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


# ---------------------------------------------------------------- source pretraining

def pretrain_source(
    cfg: ViTConfig,
    images: np.ndarray,
    labels: np.ndarray,
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch: int = 64,
    source_task: str = "synthetic-source",
) -> FrozenBackbone:
    """Train every backbone weight with Adam on the source split, then freeze.

    ``steps=0`` returns the seeded initialization, frozen.
    """
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 7919)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = len(images)
    order = rng.permutation(n)
    pos = 0
    for step in range(1, steps + 1):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch]
        pos += batch
        W = {k: Tensor(a, requires_grad=True) for k, a in params.items()}
        with Tape() as tape:
            feats = forward_features(images[idx], W, cfg)
            loss = tc.cross_entropy(feats @ W["head.w"] + W["head.b"], labels[idx])
        tape.backward(loss)
        lr_t = lr * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / steps))
        for k, t in W.items():
            g = t.grad if t.grad is not None else 0.0
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            mhat = m[k] / (1 - b1**step)
            vhat = v[k] / (1 - b2**step)
            params[k] = params[k] - lr_t * mhat / (np.sqrt(vhat) + eps)
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    return FrozenBackbone(cfg, params, seed=seed, source_task=source_task).freeze()


# ---------------------------------------------------------------- checkpoints

def _manifest_lines(backbone: FrozenBackbone) -> list[str]:
    cfg = backbone.config
    return [
        f"img_h={cfg.img_h}", f"img_w={cfg.img_w}", f"patch={cfg.patch}", f"d={cfg.d}",
        f"heads={cfg.heads}", f"layers={cfg.layers}", f"classes={cfg.classes}",
        f"mlp_ratio={cfg.mlp_ratio}", f"seed={backbone.seed}",
        f"source_task={backbone.source_task}",
    ]


def save_backbone(backbone: FrozenBackbone, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(backbone.params):
        path = directory / f"{name}.paet"
        save_tensor(path, backbone.params[name])
        written.append(path)
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(_manifest_lines(backbone)) + "\n")
    written.append(manifest)
    return written


def load_backbone(directory) -> FrozenBackbone:
    directory = Path(directory)
    kv = dict(line.split("=", 1) for line in (directory / "manifest.txt").read_text().split("\n") if line)
    cfg = ViTConfig(**{k: int(kv[k]) for k in
                       ("img_h", "img_w", "patch", "d", "heads", "layers", "classes", "mlp_ratio")})
    params = {path.name[: -len(".paet")]: load_tensor(path) for path in sorted(directory.glob("*.paet"))}
    return FrozenBackbone(cfg, params, seed=int(kv["seed"]), source_task=kv["source_task"]).freeze()
