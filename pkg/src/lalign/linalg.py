"""Dense linear-algebra kernels.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. All
functions are pure: inputs are never modified.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConvergenceError, NonSquareError, ShapeMismatchError, ZeroColumnError

# [6/6] Pade coefficients: c_k = (12-k)! 6! / (12! k! (6-k)!)
_PADE6 = tuple(
    math.factorial(12 - k) * math.factorial(6) / (math.factorial(12) * math.factorial(k) * math.factorial(6 - k))
    for k in range(7)
)
_SCALED_NORM_MAX = 0.5
JACOBI_MAX_SWEEPS = 60


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _require_square(a: np.ndarray) -> None:
    if a.shape[0] != a.shape[1]:
        raise NonSquareError(f"matrix must be square, got {a.shape}")


def frobenius_norm(m) -> float:
    """Square root of the sum of squared entries."""
    a = _as_matrix(m)
    return float(np.sqrt(np.sum(a * a)))


def expm(p) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a [6/6] Pade approximant.

    The squaring count ``s`` is the smallest integer with
    ``||p||_1 / 2**s <= 0.5``.
    """
    a = _as_matrix(p)
    _require_square(a)
    n = a.shape[0]
    norm = np.linalg.norm(a, 1) if n else 0.0
    s = 0
    if norm > _SCALED_NORM_MAX:
        s = int(math.ceil(math.log2(norm / _SCALED_NORM_MAX)))
    a = a / (2.0**s)

    ident = np.eye(n)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    c = _PADE6
    even = c[0] * ident + c[2] * a2 + c[4] * a4 + c[6] * a6
    odd = a @ (c[1] * ident + c[3] * a2 + c[5] * a4)
    r = np.linalg.solve(even - odd, even + odd)
    for _ in range(s):
        r = r @ r
    return r


def expm_frechet(p, e) -> np.ndarray:
    """Directional derivative ``d/dt exp(p + t e)`` at ``t = 0``.

    Uses the identity ``exp([[p, e], [0, p]]) = [[exp(p), L(p, e)], [0, exp(p)]]``.
    """
    a = _as_matrix(p)
    d = _as_matrix(e)
    _require_square(a)
    _require_square(d)
    if a.shape != d.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {d.shape}")
    n = a.shape[0]
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = a
    big[n:, n:] = a
    big[:n, n:] = d
    return expm(big)[:n, n:].copy()


def _complete_orthonormal(q: np.ndarray, k_valid: int) -> np.ndarray:
    """Replace columns ``k_valid:`` of ``q`` with an orthonormal completion."""
    m, k = q.shape
    if k_valid >= k:
        return q
    basis = [q[:, j] for j in range(k_valid)]
    for i in range(m):
        if len(basis) == k:
            break
        v = np.zeros(m)
        v[i] = 1.0
        for _ in range(2):
            for b in basis:
                v = v - (b @ v) * b
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            basis.append(v / nv)
    out = q.copy()
    for j in range(k_valid, k):
        out[:, j] = basis[j]
    return out


def _jacobi_tall(a: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    tol = np.finfo(np.float64).eps * m
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui = u[:, i]
                uj = u[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                u[:, [i, j]] = np.column_stack((c * ui - s * uj, s * ui + c * uj))
                vi = v[:, i].copy()
                vj = v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    else:
        raise ConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")

    sing = np.linalg.norm(u, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    u = u[:, order]
    v = v[:, order]
    scale = sing[0] if n and sing[0] > 0 else 1.0
    k_valid = int(np.sum(sing > scale * 1e-13)) if n and sing[0] > 0 else 0
    u[:, :k_valid] /= sing[:k_valid]
    u = _complete_orthonormal(u, k_valid)
    return u, sing, v


def svd(m, max_sweeps: int = JACOBI_MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U @ diag(S) @ V.T`` by one-sided Jacobi rotations.

    Returns ``(U, S, V)`` with ``k = min(rows, cols)`` columns each; ``S`` is
    nonincreasing. Raises :class:`ConvergenceError` after ``max_sweeps``.
    """
    a = _as_matrix(m)
    if not np.all(np.isfinite(a)):
        raise ConvergenceError("svd input has non-finite entries")
    if a.shape[0] >= a.shape[1]:
        return _jacobi_tall(a, max_sweeps)
    vt, s, ut = _jacobi_tall(a.T, max_sweeps)
    return ut, s, vt


def column_angles(w) -> np.ndarray:
    """Pairwise angles in degrees between all column pairs of ``w``."""
    a = _as_matrix(w)
    if a.shape[1] < 2:
        raise ShapeMismatchError("need at least two columns")
    norms = np.linalg.norm(a, axis=0)
    if np.any(norms < 1e-12):
        raise ZeroColumnError("matrix has a (near-)zero column")
    unit = a / norms
    cos = np.clip(unit.T @ unit, -1.0, 1.0)
    iu = np.triu_indices(a.shape[1], k=1)
    return np.degrees(np.arccos(cos[iu]))


def silverman_bandwidth(sample: np.ndarray, fallback: float = 1.0) -> float:
    x = np.asarray(sample, dtype=np.float64)
    if x.size < 2:
        return fallback
    std = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34) if q75 > q25 else std
    h = 0.9 * spread * x.size ** (-0.2)
    return h if h > 0 else fallback


def column_angle_kde(w, grid, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian KDE of pairwise column angles, evaluated on ``grid`` (degrees).

    Kernels are reflected at 0 and 180 degrees so the density carries unit
    mass on ``[0, 180]``. ``bandwidth=None`` selects Silverman's rule.
    """
    angles = column_angles(w)
    h = silverman_bandwidth(angles) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    g = np.asarray(grid, dtype=np.float64)[:, None]
    norm = 1.0 / (h * math.sqrt(2.0 * math.pi) * angles.size)
    dens = np.zeros(g.shape[0])
    for centers in (angles, -angles, 360.0 - angles):
        dens += np.exp(-0.5 * ((g - centers[None, :]) / h) ** 2).sum(axis=1)
    return dens * norm
