"""Per-element importance scores from calibration gradients.

Scores are batch means (not sums). Per-sample values are stacked, sorted
along the sample axis and then summed, so the result is bit-identical
under any permutation of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import AttentionWeights, CalibrationBatch, head_slice, sample_gradient


@dataclass(frozen=True)
class FisherScores:
    scores: np.ndarray
    sample_count: int
    target: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ConfigError(f"Fisher scores must be 2-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ConfigError("Fisher scores must be finite and nonnegative")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be positive")
        object.__setattr__(self, "scores", s)

    @property
    def shape(self):
        return self.scores.shape

    def head(self, head: int, head_dim: int) -> np.ndarray:
        return head_slice(self.scores, head, head_dim)

    def sidecar(self, seed: int | None = None) -> dict:
        return {"sample_count": self.sample_count, "seed": seed, "target": self.target}


def _ordered_mean(stack: np.ndarray) -> np.ndarray:
    # sorting makes the reduction independent of sample order
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


def per_sample_gradients(w: AttentionWeights, batch: CalibrationBatch, target: str):
    """Yield the gradient of ``target`` for each sample, one at a time."""
    w.get(target)  # validates the identifier
    for x, t in batch.samples():
        _, g = sample_gradient(w, x, t)
        yield g.get(target)


def fisher_from_gradients(grads, target: str = "", s1: np.ndarray | None = None) -> FisherScores:
    """Mean of squared per-sample gradients, optionally rotated by ``s1`` first."""
    squares = []
    for g in grads:
        g = np.asarray(g, dtype=np.float64)
        if s1 is not None:
            g = s1 @ g
        squares.append(g * g)
    if not squares:
        raise ConfigError("cannot accumulate Fisher scores over an empty batch")
    return FisherScores(_ordered_mean(np.stack(squares)), len(squares), target)


def mean_gradient(grads) -> np.ndarray:
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if not grads:
        raise ConfigError("cannot average gradients over an empty batch")
    return _ordered_mean(np.stack(grads))


def accumulate_fisher(w: AttentionWeights, batch: CalibrationBatch, target: str) -> FisherScores:
    if len(batch) == 0:
        raise ConfigError("empty calibration batch")
    return fisher_from_gradients(per_sample_gradients(w, batch, target), target)


def expected_gradient(w: AttentionWeights, batch: CalibrationBatch, target: str) -> np.ndarray:
    if len(batch) == 0:
        raise ConfigError("empty calibration batch")
    return mean_gradient(per_sample_gradients(w, batch, target))


def check_orthogonal(s: np.ndarray, tol: float = 1e-10, name: str = "s1") -> None:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ConfigError(f"{name} must be square, got shape {s.shape}")
    dev = float(np.linalg.norm(s.T @ s - np.eye(s.shape[0])))
    if dev > tol:
        raise ConfigError(f"{name} is not orthogonal: ||S^T S - I||_F = {dev:.3e}")


def rotate_fisher(grads, s1: np.ndarray, target: str = "") -> FisherScores:
    """Fisher scores of the rotated weight ``s1 @ W``.

    Each per-sample gradient is rotated before squaring; rotating the
    accumulated scores instead would be wrong.
    """
    check_orthogonal(s1)
    return fisher_from_gradients(grads, target, s1=np.asarray(s1, dtype=np.float64))


def collect_gradients(w: AttentionWeights, batch: CalibrationBatch, targets) -> dict[str, list[np.ndarray]]:
    """Per-sample gradients for several weights with one backward pass per sample."""
    targets = list(targets)
    for name in targets:
        w.get(name)
    out: dict[str, list[np.ndarray]] = {name: [] for name in targets}
    for x, t in batch.samples():
        _, g = sample_gradient(w, x, t)
        for name in targets:
            out[name].append(g.get(name))
    return out
