"""Symmetric round-to-nearest quantization, rotations and local QAT."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .factorize import FinetuneReport, HeadFactors
from .fisher import check_orthogonal
from .linalg import SkewParam, cayley, cayley_grad, orthogonality_error
from .optim import Adam

QAT_LR = 1e-5
QAT_STEPS = 50
DEFAULT_CLIP_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(11))


@dataclass(frozen=True)
class QuantSpec:
    weight_bits: int = 8
    activation_bits: int = 8
    clip_grid: tuple[float, ...] = DEFAULT_CLIP_GRID
    symmetric: bool = True

    def __post_init__(self):
        for name in ("weight_bits", "activation_bits"):
            if getattr(self, name) not in (4, 8):
                raise ConfigError(f"{name} must be 4 or 8, got {getattr(self, name)}")
        grid = tuple(float(c) for c in self.clip_grid)
        if not grid or any(not 0.0 < c <= 1.0 for c in grid):
            raise ConfigError(f"clip ratios must lie in (0, 1], got {grid}")
        if not self.symmetric:
            raise ConfigError("only symmetric quantization is supported")
        object.__setattr__(self, "clip_grid", grid)


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def channel_scales(w: np.ndarray, bits: int, clip: float = 1.0) -> np.ndarray:
    """Per-column scale ``clip * max|w[:, j]| / qmax``; all-zero columns get scale 1."""
    peak = np.max(np.abs(w), axis=0)
    scale = clip * peak / qmax(bits)
    return np.where(peak > 0, scale, 1.0)


def quantize_with_scale(w: np.ndarray, scale, bits: int) -> np.ndarray:
    m = qmax(bits)
    return np.clip(np.round(np.asarray(w, dtype=np.float64) / scale), -m, m).astype(np.int64)


@dataclass
class QuantizedTensor:
    q: np.ndarray  # integer codes
    scale: np.ndarray  # one per column
    clip: float
    bits: int

    def dequantize(self) -> np.ndarray:
        return self.q * self.scale


def rtn(w: np.ndarray, bits: int, clip: float = 1.0) -> QuantizedTensor:
    w = np.asarray(w, dtype=np.float64)
    scale = channel_scales(w, bits, clip)
    return QuantizedTensor(quantize_with_scale(w, scale, bits), scale, float(clip), bits)


def quantize_weight(w: np.ndarray, spec: QuantSpec = QuantSpec()) -> QuantizedTensor:
    """Per-output-channel (column) RTN with the clip ratio chosen by linear search.

    The first grid entry wins ties.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or not np.all(np.isfinite(w)):
        raise ConfigError("weight must be a finite 2-D matrix")
    best, best_err = None, np.inf
    for clip in spec.clip_grid:
        qt = rtn(w, spec.weight_bits, clip)
        err = float(np.sum((w - qt.dequantize()) ** 2))
        if err < best_err:
            best, best_err = qt, err
    return best


def quantize_activation(x: np.ndarray, bits: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (row) symmetric quantization. Returns ``(q, scales)``; zero rows get scale 1."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    peak = np.max(np.abs(x), axis=1, keepdims=True)
    scale = np.where(peak > 0, peak / qmax(bits), 1.0)
    return quantize_with_scale(x, scale, bits), scale[:, 0]


def fake_quant_activation(x: np.ndarray, bits: int = 8) -> np.ndarray:
    q, s = quantize_activation(x, bits)
    return q * s[:, None]


def fake_quant(w: np.ndarray, bits: int, clip: float):
    """Quantize-dequantize with a dynamic scale; also return the straight-through mask."""
    scale = channel_scales(w, bits, clip)
    deq = quantize_with_scale(w, scale, bits) * scale
    mask = np.abs(w) <= qmax(bits) * scale
    return deq, mask


@dataclass
class RotationPair:
    """Fixed ``s1`` (E x E) and trainable ``s2 = cayley(theta)`` (r x r)."""

    s1: np.ndarray
    s2_param: SkewParam

    def __post_init__(self):
        self.s1 = np.asarray(self.s1, dtype=np.float64)
        check_orthogonal(self.s1, tol=1e-12, name="s1")

    @classmethod
    def identity(cls, embed_dim: int, rank: int) -> "RotationPair":
        return cls(np.eye(embed_dim), SkewParam.zeros(rank))

    @property
    def s2(self) -> np.ndarray:
        return cayley(self.s2_param)


def insert_rotations(factors: HeadFactors, pair: RotationPair, s2: np.ndarray | None = None):
    """Return ``(s1 @ A @ s2.T, s2 @ B)``; the product with ``X @ s1.T`` equals ``X @ A @ B``."""
    s2 = pair.s2 if s2 is None else s2
    e, r = factors.a.shape
    if pair.s1.shape != (e, e) or s2.shape != (r, r):
        raise ConfigError(f"rotation shapes {pair.s1.shape}, {s2.shape} do not match factors E={e}, r={r}")
    return pair.s1 @ factors.a @ s2.T, s2 @ factors.b


@dataclass
class QuantizedFactors:
    a: QuantizedTensor  # codes of s1 A s2^T, E x r
    b: QuantizedTensor  # codes of s2 B, r x H
    pair: RotationPair
    activation_bits: int = 8
    layer: int = 0
    role: str = "k"
    head: int = 0

    def __post_init__(self):
        for t in (self.a, self.b):
            m = qmax(t.bits)
            if np.any(np.abs(t.q) > m) or np.any(t.scale <= 0):
                raise ConfigError("quantized codes out of range or non-positive scales")

    @property
    def rank(self) -> int:
        return self.a.q.shape[1]

    def rotated_product(self) -> np.ndarray:
        """Dequantized ``Q(s1 A s2^T) Q(s2 B)``, an approximation of ``s1 @ W``."""
        return self.a.dequantize() @ self.b.dequantize()

    def down(self, x: np.ndarray) -> np.ndarray:
        """Latent ``Q(x s1^T) Q(s1 A s2^T)`` for token rows ``x``."""
        xr = np.atleast_2d(x) @ self.pair.s1.T
        return fake_quant_activation(xr, self.activation_bits) @ self.a.dequantize()

    def up_matrix(self) -> np.ndarray:
        return self.b.dequantize()


def qat_objective(w_rot: np.ndarray, f_rot: np.ndarray, qa: np.ndarray, qb: np.ndarray) -> float:
    r = w_rot - qa @ qb
    return float(np.sum(f_rot * r * r))


def rtn_objective(factors: HeadFactors, pair: RotationPair, w_target, f_rot, spec: QuantSpec = QuantSpec()) -> float:
    """Objective of quantizing the rotated factors directly, without training."""
    at, bt = insert_rotations(factors, pair)
    qa = quantize_weight(at, spec).dequantize()
    qb = quantize_weight(bt, spec).dequantize()
    return qat_objective(pair.s1 @ w_target, np.asarray(getattr(f_rot, "scores", f_rot)), qa, qb)


def local_qat(
    factors: HeadFactors,
    pair: RotationPair,
    w_target: np.ndarray,
    f_rot,
    steps: int = QAT_STEPS,
    lr: float = QAT_LR,
    spec: QuantSpec = QuantSpec(),
    lr_rotation: float | None = None,
) -> tuple[QuantizedFactors, FinetuneReport]:
    """Fake-quantized Adam on (A, B, theta) against ``||sqrt(F') * (s1 W - Q(s1 A s2^T) Q(s2 B))||^2``.

    Clip ratios are searched once on the starting factors and then frozen;
    scales follow the current values every step. Gradients pass through the
    rounding unchanged inside the clip range and are zero outside it. The
    returned factors are the best iterate seen, so the final objective never
    exceeds the untrained RTN objective.
    """
    f = np.asarray(getattr(f_rot, "scores", f_rot), dtype=np.float64)
    w_target = np.asarray(w_target, dtype=np.float64)
    if f.shape != w_target.shape or w_target.shape != (factors.a.shape[0], factors.b.shape[1]):
        raise ConfigError(f"shape mismatch: target {w_target.shape}, fisher {f.shape}")
    s1 = pair.s1
    w_rot = s1 @ w_target
    a = factors.a.copy()
    b = factors.b.copy()
    theta = pair.s2_param.theta.copy()
    bits = spec.weight_bits

    at0, bt0 = insert_rotations(factors, pair)
    clip_a = quantize_weight(at0, spec).clip
    clip_b = quantize_weight(bt0, spec).clip

    def evaluate(a, b, theta):
        s2 = cayley(theta)
        at = s1 @ a @ s2.T
        bt = s2 @ b
        qa, ma = fake_quant(at, bits, clip_a)
        qb, mb = fake_quant(bt, bits, clip_b)
        return s2, qa, ma, qb, mb, qat_objective(w_rot, f, qa, qb)

    opt = Adam([a, b, theta], lr=lr)
    lr_rot = lr if lr_rotation is None else lr_rotation
    s2, qa, ma, qb, mb, obj = evaluate(a, b, theta)
    trace = [obj]
    best = (obj, a.copy(), b.copy(), theta.copy(), 0)
    max_orth = orthogonality_error(s2)
    aborted, diag = False, ""
    for step in range(steps):
        g = -2.0 * f * (w_rot - qa @ qb)
        d_at = ma * (g @ qb.T)
        d_bt = mb * (qa.T @ g)
        grad_a = s1.T @ d_at @ s2
        grad_b = s2.T @ d_bt
        grad_s2 = d_at.T @ (s1 @ a) + d_bt @ b.T
        grad_theta = cayley_grad(theta, s2, grad_s2)
        da, db, dth = opt.updates([grad_a, grad_b, grad_theta])
        a += da
        b += db
        theta[...] = _skew_step(theta, dth * (lr_rot / lr))
        s2, qa, ma, qb, mb, obj = evaluate(a, b, theta)
        if not np.isfinite(obj):
            aborted, diag = True, f"non-finite objective at step {step + 1}"
            break
        max_orth = max(max_orth, orthogonality_error(s2))
        trace.append(obj)
        if obj < best[0]:
            best = (obj, a.copy(), b.copy(), theta.copy(), step + 1)

    obj, a, b, theta, best_step = best
    out_pair = RotationPair(s1, SkewParam(theta))
    s2 = out_pair.s2
    qt_a = rtn(s1 @ a @ s2.T, bits, clip_a)
    qt_b = rtn(s2 @ b, bits, clip_b)
    qf = QuantizedFactors(qt_a, qt_b, out_pair, spec.activation_bits, factors.layer, factors.role, factors.head)
    report = FinetuneReport(
        trace[0], obj, trace, len(trace) - 1, lr, aborted, diag,
        extra={"best_step": best_step, "max_orthogonality_error": max_orth, "clip_a": clip_a, "clip_b": clip_b},
    )
    return qf, report


def _skew_step(theta: np.ndarray, delta: np.ndarray) -> np.ndarray:
    p = SkewParam(theta)
    p.step(delta)
    return p.theta
