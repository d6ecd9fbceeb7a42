"""Eigenvalues of a general real matrix.

Householder reduction to upper Hessenberg form, then Francis double-shift QR
with deflation on negligible subdiagonal entries. Only eigenvalues are
computed; no Schur vectors are accumulated.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ShapeError

DEFLATION_TOL = 1e-12
MAX_DIM = 256


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Orthogonally similar upper Hessenberg matrix (Householder reflections)."""
    h = np.array(a, dtype=np.float64)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(alpha, x[0])
        vnorm2 = v @ v
        if vnorm2 == 0.0:
            continue
        # H <- (I - 2vv'/v'v) H (I - 2vv'/v'v) on the trailing block
        h[k + 1:, k:] -= np.outer(v, (2.0 / vnorm2) * (v @ h[k + 1:, k:]))
        h[:, k + 1:] -= np.outer((2.0 / vnorm2) * (h[:, k + 1:] @ v), v)
        h[k + 2:, k] = 0.0
    return h


def _hqr(a: np.ndarray, max_sweeps: int, tol: float) -> np.ndarray:
    """Francis double-shift QR on an upper Hessenberg matrix (modified in place)."""
    n = a.shape[0]
    wr = np.zeros(n)
    wi = np.zeros(n)
    anorm = np.abs(np.triu(a, -1)).sum()
    nn = n - 1
    t = 0.0
    sweeps = 0
    while nn >= 0:
        its = 0
        while True:
            # locate the bottom of the active unreduced block
            l = nn
            while l >= 1:
                s = abs(a[l - 1, l - 1]) + abs(a[l, l])
                if s == 0.0:
                    s = anorm
                if abs(a[l, l - 1]) <= tol * s:
                    a[l, l - 1] = 0.0
                    break
                l -= 1
            x = a[nn, nn]
            if l == nn:
                wr[nn] = x + t
                nn -= 1
                break
            y = a[nn - 1, nn - 1]
            w = a[nn, nn - 1] * a[nn - 1, nn]
            if l == nn - 1:
                p = 0.5 * (y - x)
                q = p * p + w
                z = math.sqrt(abs(q))
                x += t
                if q >= 0.0:
                    z = p + math.copysign(z, p)
                    wr[nn - 1] = wr[nn] = x + z
                    if z != 0.0:
                        wr[nn] = x - w / z
                else:
                    wr[nn - 1] = wr[nn] = x + p
                    wi[nn - 1] = -z
                    wi[nn] = z
                nn -= 2
                break

            if sweeps >= max_sweeps:
                residual = abs(a[nn, nn - 1])
                raise NumericError(
                    f"QR iteration did not converge in {max_sweeps} sweeps "
                    f"(unreduced block {l}..{nn}, subdiagonal residual {residual:.3e})"
                )
            if its in (10, 20):
                # exceptional shift
                t += x
                a[np.arange(nn + 1), np.arange(nn + 1)] -= x
                s = abs(a[nn, nn - 1]) + abs(a[nn - 1, nn - 2])
                x = y = 0.75 * s
                w = -0.4375 * s * s
            its += 1
            sweeps += 1

            m = nn - 2
            while m >= l:
                z = a[m, m]
                r = x - z
                s = y - z
                p = (r * s - w) / a[m + 1, m] + a[m, m + 1]
                q = a[m + 1, m + 1] - z - r - s
                r = a[m + 2, m + 1]
                s = abs(p) + abs(q) + abs(r)
                p /= s
                q /= s
                r /= s
                if m == l:
                    break
                u = abs(a[m, m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(a[m - 1, m - 1]) + abs(z) + abs(a[m + 1, m + 1]))
                if u <= np.finfo(float).eps * v:
                    break
                m -= 1
            for i in range(m, nn - 1):
                a[i + 2, i] = 0.0
                if i != m:
                    a[i + 2, i - 1] = 0.0

            for k in range(m, nn):
                if k != m:
                    p = a[k, k - 1]
                    q = a[k + 1, k - 1]
                    r = a[k + 2, k - 1] if k + 1 != nn else 0.0
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p /= x
                        q /= x
                        r /= x
                s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                if s == 0.0:
                    continue
                if k == m:
                    if l != m:
                        a[k, k - 1] = -a[k, k - 1]
                else:
                    a[k, k - 1] = -s * x
                p += s
                x = p / s
                y = q / s
                z = r / s
                q /= p
                r /= p
                # rows k..k+2, columns k..nn
                row = a[k, k:nn + 1] + q * a[k + 1, k:nn + 1]
                if k + 1 != nn:
                    row = row + r * a[k + 2, k:nn + 1]
                    a[k + 2, k:nn + 1] -= row * z
                a[k + 1, k:nn + 1] -= row * y
                a[k, k:nn + 1] -= row * x
                # columns k..k+2, rows l..min(nn, k+3)
                top = min(nn, k + 3) + 1
                col = x * a[l:top, k] + y * a[l:top, k + 1]
                if k + 1 != nn:
                    col = col + z * a[l:top, k + 2]
                    a[l:top, k + 2] -= col * r
                a[l:top, k + 1] -= col * q
                a[l:top, k] -= col
    return wr + 1j * wi


def eigenvalues(m, max_sweeps: int | None = None, tol: float = DEFLATION_TOL) -> np.ndarray:
    """All eigenvalues of a square real matrix as a complex array (unordered).

    The sweep budget defaults to ``100 * n``; exceeding it raises
    :class:`NumericError` with the remaining subdiagonal residual.
    """
    m = np.asarray(getattr(m, "data", m), dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"eigenvalues needs a square matrix, got {m.shape}")
    n = m.shape[0]
    if n > MAX_DIM:
        raise ShapeError(f"matrix dimension {n} exceeds the supported maximum {MAX_DIM}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=complex)
    if max_sweeps is None:
        max_sweeps = 100 * n
    return _hqr(hessenberg(m), max_sweeps, tol)


def sort_spectrum(values: np.ndarray) -> np.ndarray:
    """Sort by real part, then imaginary part."""
    values = np.asarray(values, dtype=complex)
    return values[np.lexsort((values.imag, values.real))]
