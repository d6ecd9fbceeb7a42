"""Independent reference computations and the suites that compare against them.

Each suite returns :class:`OracleResult` rows. The ``gradcheck`` subcommand
prints them as a table; the test suite calls the same functions.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from . import kld
from .backbone import ViTConfig, init_backbone
from .spectral import fft2, generate_masks, ifft2, mask_count
from .tensor_core import tensor as tc
from .tensor_core.eig import eigenvalues
from .tensor_core.gradcheck import finite_diff_grad, rel_error
from .tensor_core.tensor import Tape, Tensor


@dataclass
class OracleResult:
    suite: str
    check: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


# ---------------------------------------------------------------- reference computations

def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """Direct O(N^4) 2-D DFT, then centered like :func:`fft2`."""
    h, w = x.shape
    u = np.arange(h)
    v = np.arange(w)
    Fh = np.exp(-2j * np.pi * np.outer(u, u) / h)
    Fw = np.exp(-2j * np.pi * np.outer(v, v) / w)
    out = np.zeros((h, w), dtype=complex)
    for a in range(h):
        for b in range(w):
            out[a, b] = np.sum(x * np.outer(Fh[a], Fw[b]))
    return np.roll(out, (h // 2, w // 2), axis=(0, 1))


def cubic_roots(m: np.ndarray) -> np.ndarray:
    """Eigenvalues of a 3x3 matrix from its characteristic cubic (Cardano)."""
    c2 = -np.trace(m)
    c1 = (m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0] + m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]
          + m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
    c0 = -np.linalg.det(m)
    # depressed cubic t^3 + p t + q with lambda = t - c2/3
    p = c1 - c2 * c2 / 3.0
    q = 2.0 * c2 ** 3 / 27.0 - c2 * c1 / 3.0 + c0
    disc = cmath.sqrt((q / 2.0) ** 2 + (p / 3.0) ** 3)
    u = (-q / 2.0 + disc) ** (1.0 / 3.0)
    if abs(u) < 1e-300:
        u = (-q / 2.0 - disc) ** (1.0 / 3.0)
    omega = cmath.exp(2j * math.pi / 3.0)
    roots = []
    for k in range(3):
        uk = u * omega ** k
        roots.append(uk - p / (3.0 * uk) - c2 / 3.0 if abs(uk) > 0 else -c2 / 3.0)
    return np.array(roots)


def power_radius(m: np.ndarray, iters: int = 500, seed: int = 0) -> float:
    v = np.random.default_rng(seed).standard_normal(m.shape[0])
    for _ in range(iters):
        w = m @ v
        v = w / np.linalg.norm(w)
    return float(abs(v @ m @ v) / (v @ v))


def matched_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max distance between two eigenvalue multisets after greedy matching."""
    b = list(b)
    worst = 0.0
    for z in a:
        j = int(np.argmin([abs(z - y) for y in b]))
        worst = max(worst, abs(z - b.pop(j)))
    return worst


def dominant_matrix(n: int, rng: np.random.Generator, top: float = 2.0) -> np.ndarray:
    """Random similarity transform of a diagonal with one separated real eigenvalue."""
    lam = rng.uniform(-1.0, 1.0, size=n)
    lam[0] = top
    S = rng.standard_normal((n, n)) + n * np.eye(n)
    return S @ np.diag(lam) @ np.linalg.inv(S)


def random_prompts(rng: np.random.Generator, L: int = 4, T: int = 3, d: int = 8) -> list[np.ndarray]:
    return [rng.standard_normal((T, d)) for _ in range(L)]


def stab_instance(rng: np.random.Generator, L=4, T=3, d=8, k=5, gap=1e-3, tries=1000):
    """Random ``(prompts, U, Q)`` with every ``|dV| > gap`` so the hinge is differentiable."""
    for _ in range(tries):
        P = random_prompts(rng, L, T, d)
        U = rng.standard_normal((d, k)) / np.sqrt(d)
        A = rng.standard_normal((k, k))
        Q = A @ A.T + 1e-4 * np.eye(k)
        V = kld.lyapunov_values(P, U, Q)
        if np.all(np.abs(np.diff(V)) > gap):
            return P, U, Q
    raise RuntimeError("could not draw a trajectory with separated energies")


def _flat_grad(fn, prompts):
    """FD and tape gradients of ``fn(list_of_prompt_tensors)`` w.r.t. every prompt entry."""
    L = len(prompts)
    shape = prompts[0].shape
    theta = np.concatenate([p.ravel() for p in prompts])

    def f(th):
        return fn([Tensor(x) for x in th.reshape(L, *shape)]).item()

    fd = finite_diff_grad(f, theta)
    leaves = [Tensor(p.copy(), requires_grad=True) for p in prompts]
    with Tape() as tape:
        out = fn(leaves)
    tape_g = np.concatenate([g.ravel() for g in tape.backward(out, leaves)])
    return fd, tape_g


# ---------------------------------------------------------------- suites

def suite_matmul(seed: int) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 4))
    fwd = rel_error(tc.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))
    A = Tensor(a, requires_grad=True)
    B = Tensor(b, requires_grad=True)
    with Tape() as tape:
        y = (tc.matmul(A, B) * Tensor(np.cos(np.arange(20.0)).reshape(5, 4))).sum()
    ga, gb = tape.backward(y, [A, B])
    fa = finite_diff_grad(lambda x: float(np.sum((x @ b) * np.cos(np.arange(20.0)).reshape(5, 4))), a)
    fb = finite_diff_grad(lambda x: float(np.sum((a @ x) * np.cos(np.arange(20.0)).reshape(5, 4))), b)
    return [OracleResult("matmul", "forward vs triple loop", fwd, 1e-12),
            OracleResult("matmul", "tape vs finite diff", max(rel_error(ga, fa), rel_error(gb, fb)), 1e-7)]


def suite_tape_ops(seed: int) -> list[OracleResult]:
    """Composite of the transformer primitives against finite differences."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 5, 6))
    g0, b0 = rng.standard_normal(6), rng.standard_normal(6)
    w0 = rng.standard_normal((6, 6)) / 3
    labels = np.array([1, 4])

    def fn(x, g, b, w):
        h = tc.layer_norm(x, g, b)
        att = tc.softmax((h @ w) @ tc.swap_last(h), axis=-1)
        y = tc.gelu(att @ h)
        return tc.cross_entropy(y[:, 0, :], labels) + tc.relu(y).mean() + tc.exp(tc.tsum(y) * 0.01)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in (x0, g0, b0, w0)]
    with Tape() as tape:
        out = fn(*leaves)
    grads = tape.backward(out, leaves)
    errs = []
    for k, arr in enumerate((x0, g0, b0, w0)):
        def f(th, k=k):
            args = [Tensor(a) for a in (x0, g0, b0, w0)]
            args[k] = Tensor(th)
            return fn(*args).item()
        errs.append(rel_error(grads[k], finite_diff_grad(f, arr)))
    return [OracleResult("tape_ops", "layernorm/attention/gelu/ce vs finite diff", max(errs), 1e-6)]


def suite_kp(seed: int, instances: int = 20) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    fd_err = tape_err = 0.0
    for _ in range(instances):
        P = random_prompts(rng)
        U = rng.standard_normal((8, 5)) / np.sqrt(8)
        K = np.eye(5) + 0.3 * rng.standard_normal((5, 5))
        analytic = np.concatenate([g.ravel() for g in kld.grad_kp_analytic(P, U, K)])
        fd, tape_g = _flat_grad(lambda ps: kld.loss_kp(ps, Tensor(U), Tensor(K)), P)
        fd_err = max(fd_err, rel_error(analytic, fd))
        tape_err = max(tape_err, rel_error(analytic, tape_g))
    return [OracleResult("koopman_grad", "analytic vs finite diff", fd_err, 1e-6),
            OracleResult("koopman_grad", "analytic vs tape", tape_err, 1e-10)]


def suite_stab(seed: int, instances: int = 20) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    fd_err = tape_err = 0.0
    for _ in range(instances):
        P, U, Q = stab_instance(rng)
        analytic = np.concatenate([g.ravel() for g in kld.grad_stab_analytic(P, U, Q)])
        fd, tape_g = _flat_grad(
            lambda ps: kld.loss_stab([kld.lift(p, Tensor(U)) for p in ps], Tensor(Q)), P)
        fd_err = max(fd_err, rel_error(analytic, fd))
        tape_err = max(tape_err, rel_error(analytic, tape_g))
    return [OracleResult("lyapunov_grad", "analytic vs finite diff", fd_err, 1e-6),
            OracleResult("lyapunov_grad", "analytic vs tape", tape_err, 1e-10)]


def objective_fd_error(seed: int, coords: int = 5, batch: int = 8) -> float:
    """FD vs tape for ``dL_total/dP_1`` at random coordinates on the desk model."""
    from .synth_data import PlantedTaskSpec, generate_split
    from .trainer import total_loss

    cfg = ViTConfig()
    backbone = init_backbone(cfg, seed).freeze()
    rng = np.random.default_rng(seed)
    split = generate_split(PlantedTaskSpec(seed=seed), "train", batch)
    prompts = rng.uniform(-0.35, 0.35, size=(cfg.layers, 4, cfg.d))
    system = kld.init_system(cfg.d, 16, seed)
    head = (Tensor(rng.normal(0, 0.1, (cfg.d, cfg.classes))), Tensor(np.zeros(cfg.classes)))
    sysT = {k: Tensor(getattr(system, k)) for k in ("U", "K", "A")}
    sysT["A"] = Tensor(rng.standard_normal((16, 16)) * 0.3)
    flat = rng.choice(prompts[0].size, size=coords, replace=False)

    def loss_at(p1):
        ps = [Tensor(p1)] + [Tensor(p) for p in prompts[1:]]
        return total_loss(split.images, split.labels, ps, sysT, backbone, head, 0.5, 0.2)[0].item()

    leaves = [Tensor(p.copy(), requires_grad=True) for p in prompts]
    with Tape() as tape:
        loss, _ = total_loss(split.images, split.labels, leaves, sysT, backbone, head, 0.5, 0.2)
    g1 = tape.backward(loss, leaves[:1])[0].ravel()[flat]
    fd = np.empty(coords)
    for n, k in enumerate(flat):
        def f(v, k=k):
            p1 = prompts[0].copy().ravel()
            p1[k] = v[0]
            return loss_at(p1.reshape(prompts[0].shape))
        fd[n] = finite_diff_grad(f, np.array([prompts[0].ravel()[k]]))[0]
    return rel_error(g1, fd)


def suite_objective(seed: int, seeds: int = 5) -> list[OracleResult]:
    err = max(objective_fd_error(seed + s) for s in range(seeds))
    return [OracleResult("total_objective", "dL_total/dP_1 tape vs finite diff", err, 1e-4)]


def suite_fft(seed: int, images: int = 20) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    rt = pars = 0.0
    for _ in range(images):
        x = rng.uniform(-1, 1, size=(32, 32))
        X = fft2(x)
        rt = max(rt, np.abs(ifft2(X).real - x).max())
        pars = max(pars, abs(np.sum(np.abs(X) ** 2) / x.size - np.sum(x * x)) / np.sum(x * x))
    x = rng.uniform(-1, 1, size=(8, 8))
    ref = naive_dft2(x)
    direct = float(np.abs(fft2(x) - ref).max() / np.abs(ref).max())
    counts = float(mask_count(32, 32, 8, 4) != 49 or len(generate_masks(32, 32, 8, 4)) != 49)
    return [OracleResult("fft", "round trip max abs", rt, 1e-9),
            OracleResult("fft", "Parseval relative", pars, 1e-8),
            OracleResult("fft", "vs direct DFT", direct, 1e-10),
            OracleResult("fft", "mask count 32x32 w=8 r=4 is 49", counts, 0.0)]


def suite_eig(seed: int) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    cubic = 0.0
    for _ in range(10):
        m = rng.standard_normal((3, 3))
        cubic = max(cubic, matched_error(eigenvalues(m), cubic_roots(m)))
    from .analysis import spectral_radius
    power = 0.0
    for _ in range(5):
        m = dominant_matrix(16, rng)
        power = max(power, abs(spectral_radius(m) - power_radius(m)))
    rot = abs(spectral_radius(np.array([[0.0, -1.0], [1.0, 0.0]])) - 1.0)
    return [OracleResult("eigensolver", "3x3 vs Cardano roots", cubic, 1e-8),
            OracleResult("eigensolver", "16x16 radius vs power method", power, 1e-4),
            OracleResult("eigensolver", "rotation radius is 1", rot, 1e-12)]


def suite_spd(seed: int, draws: int = 100) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        k = int(rng.integers(2, 17))
        A = rng.standard_normal((k, k)) * rng.choice([1e-6, 1.0, 10.0])
        Q = kld.spd_materialize(A, 1e-4).data
        worst = max(worst, 1e-4 - float(np.min(np.linalg.eigvalsh(Q))))
    return [OracleResult("spd", "min eig >= eps", max(worst, 0.0), 1e-10)]


SUITES = {
    "matmul": suite_matmul,
    "tape_ops": suite_tape_ops,
    "koopman_grad": suite_kp,
    "lyapunov_grad": suite_stab,
    "total_objective": suite_objective,
    "fft": suite_fft,
    "eigensolver": suite_eig,
    "spd": suite_spd,
}


def run_all(seed: int) -> list[OracleResult]:
    out = []
    for fn in SUITES.values():
        out.extend(fn(seed))
    return out
