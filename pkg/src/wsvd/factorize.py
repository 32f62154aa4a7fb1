"""Per-head low-rank factorization, rank allocation and Fisher-weighted fine-tuning."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError
from .linalg import SvdResult, svd, truncate
from .model import ROLES, head_slice
from .optim import Adam

FT_LR = 1e-4
FT_STEPS = 100


@dataclass
class HeadFactors:
    """``W_h ~= a @ b`` with ``a`` E x r and ``b`` r x H."""

    a: np.ndarray
    b: np.ndarray
    layer: int = 0
    role: str = "k"
    head: int = 0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ConfigError(f"factor shapes {self.a.shape} and {self.b.shape} do not chain")
        if self.rank > self.b.shape[1]:
            raise ConfigError(f"rank {self.rank} exceeds head dimension {self.b.shape[1]}")
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}, got {self.role!r}")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ConfigError("factors contain non-finite values")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def key(self) -> tuple[int, str, int]:
        return (self.layer, self.role, self.head)

    def product(self) -> np.ndarray:
        return self.a @ self.b

    def down(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.a

    def up_matrix(self) -> np.ndarray:
        return self.b

    def copy(self) -> "HeadFactors":
        return HeadFactors(self.a.copy(), self.b.copy(), self.layer, self.role, self.head)


def head_svd(w_full: np.ndarray, head: int, head_dim: int, whiten: np.ndarray | None = None) -> SvdResult:
    """SVD of one head's E x H slice, optionally of ``diag(whiten) @ slice``."""
    w = head_slice(np.asarray(w_full, dtype=np.float64), head, head_dim)
    if w.shape[1] != head_dim:
        raise ConfigError(f"head {head} is out of range for a matrix with {w_full.shape[1]} columns")
    if whiten is not None:
        w = np.asarray(whiten, dtype=np.float64)[:, None] * w
    return svd(w)


def per_head_svd(
    w_full: np.ndarray,
    head: int,
    r: int,
    head_dim: int,
    layer: int = 0,
    role: str = "k",
    whiten: np.ndarray | None = None,
    decomposition: SvdResult | None = None,
) -> HeadFactors:
    """Truncated SVD of the columns of ``w_full`` owned by ``head``.

    ``whiten`` is a diagonal pre-scaling hook (off by default); when given,
    the scaling is undone on the left factor.
    """
    if not 1 <= r <= head_dim:
        raise ConfigError(f"rank {r} outside 1..{head_dim}")
    s = decomposition if decomposition is not None else head_svd(w_full, head, head_dim, whiten)
    a, b = truncate(s, r)
    if whiten is not None:
        a = a / np.asarray(whiten, dtype=np.float64)[:, None]
    return HeadFactors(a, b, layer, role, head)


def full_matrix_factors(w_full: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Shared-latent factorization of the whole E x E projection (A: E x R, B: R x E)."""
    return truncate(svd(w_full), rank)


def weighted_loss(w: np.ndarray, f: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    r = w - a @ b
    return float(np.sum(f * r * r))


def weighted_loss_grads(w, f, a, b):
    """Gradients of ``sum(F * (W - AB)^2)`` w.r.t. A and B."""
    g = f * (w - a @ b)
    return -2.0 * g @ b.T, -2.0 * a.T @ g


@dataclass
class FinetuneReport:
    initial_loss: float
    final_loss: float
    trace: list[float]
    steps: int
    lr: float
    aborted: bool = False
    diagnostic: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "trace": list(self.trace),
            "steps": self.steps,
            "lr": self.lr,
            "aborted": self.aborted,
            "diagnostic": self.diagnostic,
        }
        d.update(self.extra)
        return d


def weighted_finetune(
    factors: HeadFactors,
    w_target: np.ndarray,
    f: np.ndarray,
    steps: int = FT_STEPS,
    lr: float = FT_LR,
) -> tuple[HeadFactors, FinetuneReport]:
    """Minimize ``||sqrt(F) * (W - AB)||_F^2`` over A and B with Adam."""
    w_target = np.asarray(w_target, dtype=np.float64)
    f = np.asarray(getattr(f, "scores", f), dtype=np.float64)
    if w_target.shape != (factors.a.shape[0], factors.b.shape[1]) or f.shape != w_target.shape:
        raise ConfigError(
            f"shape mismatch: target {w_target.shape}, fisher {f.shape}, factors {factors.a.shape} x {factors.b.shape}"
        )
    if np.any(f < 0):
        raise ConfigError("Fisher weights must be nonnegative")
    a = factors.a.copy()
    b = factors.b.copy()
    opt = Adam([a, b], lr=lr)
    trace = [weighted_loss(w_target, f, a, b)]
    aborted, diag = False, ""
    for step in range(steps):
        prev = (a.copy(), b.copy())
        opt.step(weighted_loss_grads(w_target, f, a, b))
        loss = weighted_loss(w_target, f, a, b)
        if not np.isfinite(loss):
            a[...], b[...] = prev
            aborted, diag = True, f"non-finite loss at step {step + 1}; returning state after step {step}"
            break
        trace.append(loss)
    report = FinetuneReport(trace[0], trace[-1], trace, len(trace) - 1, lr, aborted, diag)
    return HeadFactors(a, b, factors.layer, factors.role, factors.head), report


# rank allocation

RankKey = tuple[int, str, int]


@dataclass
class RankPlan:
    ranks: dict[RankKey, int]
    embed_dim: int
    head_dim: int
    target_rho1: float

    def _rho1_fraction(self) -> Fraction:
        e, h = self.embed_dim, self.head_dim
        total = sum(self.ranks.values())
        return Fraction((e + h) * total, e * h * len(self.ranks))

    @property
    def rho1(self) -> float:
        return float(self._rho1_fraction())

    @property
    def rho2(self) -> float:
        k = [r for (_, role, _), r in self.ranks.items() if role == "k"] or list(self.ranks.values())
        return float(Fraction(sum(k), self.head_dim * len(k)))

    def rank(self, layer: int, role: str, head: int) -> int:
        return self.ranks[(layer, role, head)]

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "head_dim": self.head_dim,
            "target_rho1": self.target_rho1,
            "rho1": self.rho1,
            "rho2": self.rho2,
            "ranks": {f"{l}.{ro}.{h}": r for (l, ro, h), r in sorted(self.ranks.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankPlan":
        ranks = {}
        for k, r in d["ranks"].items():
            l, ro, h = k.split(".")
            ranks[(int(l), ro, int(h))] = int(r)
        return cls(ranks, d["embed_dim"], d["head_dim"], d["target_rho1"])


def rank_gains(sigma: np.ndarray, f_head: np.ndarray | None = None) -> np.ndarray:
    """Marginal Fisher-weighted energy of each additional rank: ``mean(F_h) * sigma_i^2``."""
    weight = 1.0 if f_head is None else float(np.mean(f_head))
    return weight * np.asarray(sigma, dtype=np.float64) ** 2


def min_rho1(embed_dim: int, head_dim: int) -> float:
    return (embed_dim + head_dim) / (embed_dim * head_dim)


def allocate_ranks(
    gains: dict[RankKey, np.ndarray],
    embed_dim: int,
    head_dim: int,
    rho1: float,
    uniform: bool = False,
) -> RankPlan:
    """Spend a parameter budget of ``rho1 * n_heads * E * H`` on per-head ranks.

    Greedy: every head starts at rank 1, then each extra rank goes to the
    head with the largest next marginal gain (ties: lower layer, lower head,
    role order q/k/v). Every rank costs ``E + H`` parameters.
    """
    e, h = embed_dim, head_dim
    n = len(gains)
    if n == 0:
        raise ConfigError("no heads to allocate")
    if not rho1 > 0:
        raise ConfigError(f"rho1 must be positive, got {rho1}")
    rho_max = Fraction(e + h, e)
    target = Fraction(rho1).limit_denominator(10**9)
    if target > rho_max:
        raise ConfigError(f"rho1={rho1} exceeds the full-rank ratio {float(rho_max)}")
    per_head = target * e * h / (e + h)
    units = round(per_head * n) if not uniform else round(per_head) * n
    if units < n:
        raise ConfigError(f"budget too small for rank 1 everywhere; minimum feasible rho1 is {min_rho1(e, h):.6g}")
    keys = sorted(gains, key=lambda k: (k[0], k[2], ROLES.index(k[1])))
    if uniform:
        return RankPlan({k: min(round(per_head), h) for k in keys}, e, h, float(rho1))

    units = min(units, n * h)
    ranks = {k: 1 for k in keys}
    heap = []
    for k in keys:
        g = np.asarray(gains[k], dtype=np.float64)
        if g.shape[0] < h:
            raise ConfigError(f"head {k} has {g.shape[0]} gains, expected {h}")
        if h > 1:
            heap.append((-float(g[1]), k[0], k[2], ROLES.index(k[1]), k))
    heapq.heapify(heap)
    for _ in range(units - n):
        _, _, _, _, k = heapq.heappop(heap)
        ranks[k] += 1
        r = ranks[k]
        if r < h:
            heapq.heappush(heap, (-float(gains[k][r]), k[0], k[2], ROLES.index(k[1]), k))
    return RankPlan(ranks, e, h, float(rho1))
