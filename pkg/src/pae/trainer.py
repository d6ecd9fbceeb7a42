"""Prompt tuning loop with optional MPA initialization and Koopman-Lyapunov terms.

Every ablation (vanilla VPT, KLD only, MPA only, full) is one code path with
flags. With ``mpa_on``, ``kp_on`` and ``stab_on`` all false no Koopman tensor
enters the graph and the optimizer only sees the prompts and the head, which
is the plain deep-VPT setup.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import FrozenBackbone, ViTConfig, forward_deep_prompted
from .kld import KoopmanSystem, init_system, lift, loss_kp, loss_stab, save_system, spd_materialize
from .mpa import MpaResult, run_mpa
from .tensor_core import tensor as tc
from .tensor_core.errors import ConfigError, ContractError, NumericError
from .tensor_core.io import save_tensor
from .tensor_core.tensor import Tape, Tensor

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
GRAD_CLIP = 2.0  # norm cap applied to each parameter's gradient
SUMMARY_SCHEMA = 1


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class TrainConfig:
    img_h: int = 32
    img_w: int = 32
    patch: int = 4
    d: int = 32
    heads: int = 4
    layers: int = 4
    classes: int = 8
    prompt_t: int = 4
    k_dim: int = 16
    alpha: float = 0.5
    beta: float = 0.2
    lr: float = 0.25
    momentum: float = 0.9
    epochs: int = 100
    batch: int = 64
    seed: int = 0
    w: int = 8
    r: int = 4
    mpa_on: bool = True
    kp_on: bool = True
    stab_on: bool = True
    layerwise_k: bool = False
    copy_init: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be nonnegative (alpha={self.alpha}, beta={self.beta})")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("prompt_t", "k_dim", "epochs", "batch", "layers", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def vit(self) -> ViTConfig:
        return ViTConfig(self.img_h, self.img_w, self.patch, self.d, self.heads, self.layers, self.classes)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return parse_config(text)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return parse_config(Path(path).read_text())


CONFIG_KEYS = tuple(f.name for f in fields(TrainConfig))
_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"key '{key}': cannot parse {raw!r} as {kind}") from None


def parse_config(text: str) -> TrainConfig:
    """Flat ``key=value`` lines; ``#`` comments and blank lines are ignored.

    Every key of :class:`TrainConfig` must be present exactly once.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = _parse_value(key, raw)
    for key in CONFIG_KEYS:
        if key not in values:
            raise ConfigError(f"missing config key '{key}'")
    return TrainConfig(**values)


# ---------------------------------------------------------------- state and loss

@dataclass
class TrainState:
    prompts: list[Tensor]
    head_w: Tensor
    head_b: Tensor
    system: dict[str, Tensor]  # U, K, A
    eps: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def trainable(self, cfg: TrainConfig) -> dict[str, Tensor]:
        out = {f"P{i}": p for i, p in enumerate(self.prompts)}
        out["head.w"], out["head.b"] = self.head_w, self.head_b
        if cfg.kp_on or cfg.stab_on:
            out["U"] = self.system["U"]
        if cfg.kp_on:
            out["K"] = self.system["K"]
        if cfg.stab_on:
            out["A"] = self.system["A"]
        return out

    def prompt_array(self) -> np.ndarray:
        return np.stack([p.data for p in self.prompts])

    def koopman(self) -> KoopmanSystem:
        s = self.system
        return KoopmanSystem(s["U"].data.copy(), s["K"].data.copy(), s["A"].data.copy(), self.eps)


def random_prompts(cfg: TrainConfig, seed: int) -> np.ndarray:
    """Uniform init on +-sqrt(6 / (patch^2 + d)), the usual VPT fan-based range."""
    rng = np.random.default_rng([seed, 0x505254])
    bound = np.sqrt(6.0 / (cfg.patch * cfg.patch + cfg.d))
    return rng.uniform(-bound, bound, size=(cfg.layers, cfg.prompt_t, cfg.d))


def init_state(cfg: TrainConfig, backbone: FrozenBackbone, train_images: np.ndarray,
               train_labels: np.ndarray) -> tuple[TrainState, MpaResult | None]:
    if backbone.config != cfg.vit():
        raise ConfigError(f"backbone architecture {backbone.config} does not match config {cfg.vit()}")
    mpa = None
    if cfg.mpa_on:
        mpa = run_mpa(backbone, train_images, train_labels, cfg.classes, cfg.prompt_t,
                      cfg.w, cfg.r, cfg.batch, cfg.seed, copy=cfg.copy_init)
        prompts = mpa.prompts
    else:
        prompts = random_prompts(cfg, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x48454144])
    head_w = rng.normal(0.0, 0.01, size=(cfg.d, cfg.classes))
    system = init_system(cfg.d, cfg.k_dim, cfg.seed, layers=cfg.layers, layerwise=cfg.layerwise_k)
    state = TrainState(
        prompts=[Tensor(p.copy(), requires_grad=True) for p in prompts],
        head_w=Tensor(head_w, requires_grad=True),
        head_b=Tensor(np.zeros(cfg.classes), requires_grad=True),
        system={k: Tensor(getattr(system, k), requires_grad=True) for k in ("U", "K", "A")},
        eps=system.eps,
    )
    return state, mpa


def total_loss(images, labels, prompts, system, backbone: FrozenBackbone, head,
               alpha: float, beta: float, kp_on: bool = True, stab_on: bool = True,
               eps: float = 1e-4) -> tuple[Tensor, dict[str, float]]:
    """``L_task + alpha L_kp + beta L_stab``; switched-off terms are left out of the graph.

    ``system`` maps ``U``, ``K`` and ``A`` to tensors. Components that are off
    are still reported (computed without gradient) so traces keep one schema.
    """
    if alpha < 0 or beta < 0:
        raise ConfigError("loss weights must be nonnegative")
    l_task = tc.cross_entropy(forward_deep_prompted(images, prompts, backbone, head), labels)
    total = l_task
    if kp_on:
        l_kp = loss_kp(prompts, system["U"], system["K"])
        total = total + alpha * l_kp
    else:
        # constant inputs, so nothing is recorded on the tape
        l_kp = loss_kp([Tensor(p.data) for p in prompts], Tensor(system["U"].data), Tensor(system["K"].data))
    if stab_on:
        l_stab = loss_stab([lift(p, system["U"]) for p in prompts], spd_materialize(system["A"], eps))
        total = total + beta * l_stab
    else:
        U = Tensor(system["U"].data)
        l_stab = loss_stab([lift(Tensor(p.data), U) for p in prompts], spd_materialize(Tensor(system["A"].data), eps))
    parts = {"l_task": l_task.item(), "l_kp": l_kp.item(), "l_stab": l_stab.item(), "l_total": total.item()}
    return total, parts


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + np.cos(np.pi * step / max(total, 1)))


@dataclass
class TraceRecord:
    step: int
    epoch: int
    lr: float
    l_task: float
    l_kp: float
    l_stab: float
    l_total: float
    grad_norms: list[float]

    def row(self) -> list:
        return [self.step, self.epoch, self.lr, self.l_task, self.l_kp, self.l_stab,
                self.l_total] + list(self.grad_norms)


class TrainingDiverged(NumericError):
    def __init__(self, message: str, record: TraceRecord | None):
        super().__init__(message)
        self.record = record


def train_step(state: TrainState, cfg: TrainConfig, backbone: FrozenBackbone,
               images: np.ndarray, labels: np.ndarray, lr: float, epoch: int = 0) -> TraceRecord:
    """One SGD-with-momentum update of the prompts, head and active Koopman parameters."""
    params = state.trainable(cfg)
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        loss, parts = total_loss(images, labels, state.prompts, state.system, backbone,
                                 (state.head_w, state.head_b), cfg.alpha, cfg.beta,
                                 cfg.kp_on, cfg.stab_on, state.eps)
    grad_norms = [float("nan")] * len(state.prompts)
    record = TraceRecord(state.step, epoch, lr, grad_norms=grad_norms, **parts)
    if not np.isfinite(parts["l_total"]) or parts["l_total"] > DIVERGENCE_LIMIT:
        tape.release()
        raise TrainingDiverged(f"L_total={parts['l_total']!r} at step {state.step}", record)
    grads = tape.backward(loss, list(params.values()))
    record.grad_norms = [float(np.linalg.norm(g)) for g in grads[: len(state.prompts)]]
    for (name, t), g in zip(params.items(), grads):
        norm = float(np.linalg.norm(g))
        if not np.isfinite(norm):
            raise TrainingDiverged(f"non-finite gradient for {name} at step {state.step}", record)
        if norm > GRAD_CLIP:
            g = g * (GRAD_CLIP / norm)
        v = state.velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state.velocity[name] = v
        t.data = t.data - lr * v
    state.step += 1
    return record


# ---------------------------------------------------------------- metrics

def epochs_to_best(curve, tolerance: float = 0.1) -> int:
    """1-based first epoch whose accuracy (percent) is within ``tolerance`` of the run best."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size == 0:
        raise ContractError("epochs_to_best needs a nonempty validation curve")
    best = curve.max()
    return int(np.argmax(curve >= best - tolerance)) + 1


def speedup(baseline_curve, treated_curve) -> float:
    return epochs_to_best(baseline_curve) / epochs_to_best(treated_curve)


def oscillation_score(series, window: int = 20) -> float:
    """Mean over non-overlapping windows of the std of linearly detrended values.

    A trailing partial window is dropped.
    """
    g = np.asarray(series, dtype=np.float64)
    if window < 3:
        raise ContractError("window must hold at least 3 steps")
    if g.size < 2 * window:
        raise ContractError(f"need at least {2 * window} steps, got {g.size}")
    t = np.arange(window, dtype=np.float64)
    out = []
    for k in range(g.size // window):
        seg = g[k * window:(k + 1) * window]
        slope, icept = np.polyfit(t, seg, 1)
        out.append(np.std(seg - (slope * t + icept)))
    return float(np.mean(out))


# ---------------------------------------------------------------- full run

@dataclass
class TrainResult:
    config: TrainConfig
    trace: list[TraceRecord]
    val_curve: list[float]  # percent, one per epoch
    state: TrainState
    mpa: MpaResult | None
    timings: dict[str, float]
    status: str = "ok"
    failure: str = ""

    def mean_grad_norms(self) -> np.ndarray:
        return np.array([np.mean(r.grad_norms) for r in self.trace])

    def summary(self) -> dict:
        ok = self.status == "ok" and len(self.val_curve) > 0
        osc = None
        if ok and len(self.trace) >= 40:
            osc = oscillation_score(self.mean_grad_norms())
        return {
            "schema": SUMMARY_SCHEMA,
            "status": self.status,
            "failure": self.failure,
            "seed": self.config.seed,
            "flags": {k: getattr(self.config, k) for k in
                      ("mpa_on", "kp_on", "stab_on", "layerwise_k", "copy_init")},
            "steps": len(self.trace),
            "epochs": len(self.val_curve),
            "final_val_acc": self.val_curve[-1] if self.val_curve else None,
            "best_val_acc": max(self.val_curve) if self.val_curve else None,
            "epochs_to_best": epochs_to_best(self.val_curve) if self.val_curve else None,
            "oscillation_score": osc,
            "final_l_total": self.trace[-1].l_total if self.trace else None,
            "mpa_top": self.mpa.ranking.top(self.config.prompt_t) if self.mpa else None,
            "val_curve": list(self.val_curve),
        }


def evaluate(state: TrainState, backbone: FrozenBackbone, images: np.ndarray,
             labels: np.ndarray, chunk: int = 256) -> float:
    """Accuracy in percent."""
    prompts = [Tensor(p.data) for p in state.prompts]
    head = (Tensor(state.head_w.data), Tensor(state.head_b.data))
    hits = 0
    for i in range(0, len(images), chunk):
        logits = forward_deep_prompted(images[i:i + chunk], prompts, backbone, head).data
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[i:i + chunk]))
    return 100.0 * hits / len(images)


def train(cfg: TrainConfig, backbone: FrozenBackbone, train_images, train_labels,
          val_images, val_labels) -> TrainResult:
    """Run ``cfg.epochs`` epochs; divergence ends the run with ``status='diverged'``."""
    t0 = time.perf_counter()
    state, mpa = init_state(cfg, backbone, train_images, train_labels)
    timings = {"init_seconds": time.perf_counter() - t0}
    if mpa is not None:
        timings["mpa_phase1_seconds"] = mpa.phase1_seconds
        timings["mpa_phase2_seconds"] = mpa.phase2_seconds
    n = len(train_images)
    steps_per_epoch = -(-n // cfg.batch)
    total_steps = steps_per_epoch * cfg.epochs
    trace, curve = [], []
    t0 = time.perf_counter()
    result = TrainResult(cfg, trace, curve, state, mpa, timings)
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, 0x45504F43, epoch]).permutation(n)
            for k in range(steps_per_epoch):
                idx = order[k * cfg.batch:(k + 1) * cfg.batch]
                lr = cosine_lr(cfg.lr, state.step, total_steps)
                trace.append(train_step(state, cfg, backbone, train_images[idx], train_labels[idx], lr, epoch + 1))
            curve.append(evaluate(state, backbone, val_images, val_labels))
            log.debug("epoch %d val %.2f loss %.4f", epoch + 1, curve[-1], trace[-1].l_total)
    except TrainingDiverged as exc:
        if exc.record is not None:
            trace.append(exc.record)
        result.status, result.failure = "diverged", str(exc)
        log.error("run diverged: %s; last record %s", exc, exc.record)
    timings["train_seconds"] = time.perf_counter() - t0
    timings["epoch_seconds"] = timings["train_seconds"] / max(len(curve), 1)
    return result


# ---------------------------------------------------------------- outputs

TRACE_HEADER = ["step", "epoch", "lr", "l_task", "l_kp", "l_stab", "l_total"]


def write_outputs(result: TrainResult, out_dir) -> list[Path]:
    """Trace CSV, val-curve CSV, checkpoint tensors and summary JSON (no timings)."""
    out = Path(out_dir)
    (out / "checkpoint").mkdir(parents=True, exist_ok=True)
    L = result.config.layers
    written = []

    path = out / "trace.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER + [f"grad_norm_p{i + 1}" for i in range(L)])
        for rec in result.trace:
            w.writerow([repr(v) if isinstance(v, float) else v for v in rec.row()])
    written.append(path)

    path = out / "val_curve.csv"
    path.write_text("epoch,val_acc\n" + "".join(f"{i + 1},{a!r}\n" for i, a in enumerate(result.val_curve)))
    written.append(path)

    ck = out / "checkpoint"
    for name, arr in (("prompts", result.state.prompt_array()),
                      ("head_w", result.state.head_w.data), ("head_b", result.state.head_b.data)):
        save_tensor(ck / f"{name}.paet", arr)
        written.append(ck / f"{name}.paet")
    written += save_system(result.state.koopman(), ck / "koopman")

    path = out / "summary.json"
    path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written
