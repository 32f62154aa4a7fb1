"""Dense linear algebra used by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
The SVD is a one-sided (Hestenes) Jacobi iteration with a fixed
round-robin pair order, so identical input bits give identical factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 64


class ConvergenceError(NumericalError):
    pass


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and return ``m`` as a finite 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x k, orthonormal columns
    sigma: np.ndarray  # k, nonincreasing
    vt: np.ndarray  # k x n, orthonormal rows

    @property
    def k(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed tournament schedule: n - 1 rounds (n even) of n / 2 disjoint column pairs.

    Every pair meets exactly once per sweep. An odd ``n`` gets a dummy
    index that is dropped from the rounds.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        rounds.append((np.array([a for a, _ in pairs], dtype=np.intp), np.array([b for _, b in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int):
    """One-sided Jacobi on a tall matrix (m >= n). Returns (W, V) with W = a V.

    Pairs are visited in a fixed round-robin order; the disjoint pairs of
    one round are rotated together. A pair is skipped once the cosine of
    the angle between its columns is at most ``tol``.
    """
    m, n = a.shape
    w = np.array(a, dtype=np.float64, copy=True)
    v = np.eye(n)
    rounds = _round_robin(n)
    off = 0.0
    for _ in range(max_sweeps):
        off = 0.0
        rotated = False
        for p, q in rounds:
            if p.size == 0:
                continue
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            live = (alpha > 0.0) & (beta > 0.0)
            cos = np.zeros_like(gamma)
            cos[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
            if cos.size:
                off = max(off, float(cos.max()))
            act = cos > tol
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p], w[:, q] = c * wp - sn * wq, sn * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - sn * vq, sn * vp + c * vq
        if not rotated:
            return w, v
    raise ConvergenceError(
        f"Jacobi SVD of {m}x{n} matrix did not converge in {max_sweeps} sweeps "
        f"(residual off-diagonal cosine {off:.3e})"
    )


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not marked in ``filled`` with an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if filled[j]]
    candidates = iter(range(m))
    for j in range(k):
        if filled[j]:
            continue
        while True:
            e = np.zeros(m)
            e[next(candidates)] = 1.0
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 0.5:
                break
        u[:, j] = e / nrm
        basis.append(u[:, j])
    return u


def svd(m, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> SvdResult:
    """Thin SVD by cyclic one-sided Jacobi.

    Sign convention: the largest-magnitude entry of each left singular vector
    is nonnegative (first such entry on ties).
    """
    a = as_matrix(m)
    rows, cols = a.shape
    transposed = rows < cols
    if transposed:
        a = a.T
    w, v = _jacobi_tall(a, tol, max_sweeps)
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    nonzero = sigma > 0.0
    u = np.zeros_like(w)
    u[:, nonzero] = w[:, nonzero] / sigma[nonzero]
    if not nonzero.all():
        u = _complete_basis(u, nonzero)
    if transposed:
        u, v = v, u
    # u: rows x k, v: cols x k
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    v = v * signs
    return SvdResult(u=np.ascontiguousarray(u), sigma=sigma, vt=np.ascontiguousarray(v.T))


def truncate(s: SvdResult, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Split the leading ``r`` triplets into ``A = U_r sqrt(S_r)`` and ``B = sqrt(S_r) V_r^T``."""
    if not 1 <= r <= s.k:
        raise ValueError(f"requested rank {r}, available ranks 1..{s.k}")
    root = np.sqrt(s.sigma[:r])
    a = s.u[:, :r] * root
    b = root[:, None] * s.vt[:r]
    return a, b


def low_rank(m, r: int) -> tuple[np.ndarray, np.ndarray]:
    return truncate(svd(m), r)


def _pow2_neighbours(dim: int) -> tuple[int, int]:
    lo = 1 << max(dim.bit_length() - 1, 0)
    return lo, lo * 2


def hadamard(dim: int) -> np.ndarray:
    """Normalized Sylvester-Hadamard matrix of size ``dim`` (a power of two)."""
    if dim < 1 or dim & (dim - 1):
        lo, hi = _pow2_neighbours(max(dim, 1))
        raise ValueError(f"Hadamard size must be a power of two, got {dim}; nearest valid sizes {lo} and {hi}")
    h = np.ones((1, 1))
    while h.shape[0] < dim:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(dim)


def fwht(x: np.ndarray) -> np.ndarray:
    """Apply the normalized Hadamard transform along the last axis, ``x @ hadamard(n)``."""
    x = np.array(x, dtype=np.float64, copy=True)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"transform length must be a power of two, got {n}")
    h = 1
    while h < n:
        y = x.reshape(*x.shape[:-1], n // (2 * h), 2, h)
        a = y[..., 0, :].copy()
        b = y[..., 1, :]
        y[..., 0, :] = a + b
        y[..., 1, :] = a - b
        h *= 2
    return x / np.sqrt(n)


@dataclass
class SkewParam:
    """Skew-symmetric generator of an orthogonal matrix via the Cayley map."""

    theta: np.ndarray

    def __post_init__(self):
        t = as_matrix(self.theta, "theta")
        if t.shape[0] != t.shape[1]:
            raise ValueError(f"theta must be square, got {t.shape}")
        if not np.array_equal(t, -t.T):
            raise ValueError("theta must be exactly skew-symmetric")
        self.theta = t

    @classmethod
    def zeros(cls, dim: int) -> "SkewParam":
        return cls(np.zeros((dim, dim)))

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, scale: float = 1.0) -> "SkewParam":
        z = rng.normal(scale=scale, size=(dim, dim))
        return cls(skew(z))

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def step(self, delta: np.ndarray) -> None:
        """Add ``delta`` and re-project so theta stays exactly skew."""
        self.theta = skew(self.theta + delta)


def skew(z: np.ndarray) -> np.ndarray:
    """Exactly skew-symmetric part; upper triangle is taken from ``(z - z^T)/2``."""
    t = np.triu(0.5 * (z - z.T), 1)
    return t - t.T


def cayley(p: SkewParam | np.ndarray) -> np.ndarray:
    """``Q = (I - theta/2)(I + theta/2)^{-1}``."""
    theta = p.theta if isinstance(p, SkewParam) else as_matrix(p, "theta")
    n = theta.shape[0]
    eye = np.eye(n)
    plus = eye + 0.5 * theta
    cond = np.linalg.cond(plus)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(f"I + theta/2 is singular (condition estimate {cond:.3e})")
    # Q = N M^{-1}  <=>  M^T Q^T = N^T
    return np.linalg.solve(plus.T, (eye - 0.5 * theta).T).T


def cayley_grad(theta: np.ndarray, q: np.ndarray, grad_q: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``Q = cayley(theta)`` back to the skew parameter.

    The result is the gradient w.r.t. the free upper-triangular entries,
    mirrored so it is itself skew-symmetric.
    """
    n = theta.shape[0]
    plus = np.eye(n) + 0.5 * theta
    # dQ = -(I + Q) dtheta/2 M^{-1}
    g = -0.5 * (np.eye(n) + q).T @ grad_q @ np.linalg.inv(plus).T
    return g - g.T


def orthogonality_error(q: np.ndarray) -> float:
    """Frobenius norm of ``Q^T Q - I``."""
    return float(np.linalg.norm(q.T @ q - np.eye(q.shape[1])))
