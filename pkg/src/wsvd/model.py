"""A small causal multi-head attention stack with hand-written backprop.

Each layer computes

    A = MHA(X) = concat_h softmax(Q_h K_h^T / sqrt(H) + mask) V_h  @ W_o
    Y = A + tanh(A W_1) W_2

with no residual around attention, so all-zero weights give a zero output.
The calibration task is sequence regression: the target at position t is a
fixed random linear map of the input at t-1 (zero at t=0), and the loss is
the mean squared error over all L*E entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, NumericalError

ROLES = ("q", "k", "v")
WEIGHT_KEYS = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    head_dim: int = 32
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 0  # 0 means 2 * embed_dim
    seed: int = 0
    spectral_decay: float = 1.0
    outlier_channels: tuple[int, ...] = ()
    outlier_scale: float = 10.0

    def __post_init__(self):
        e, h = self.embed_dim, self.head_dim
        if min(e, h, self.n_heads, self.n_layers) < 1:
            raise ConfigError("embed_dim, head_dim, n_heads and n_layers must be positive")
        if self.n_heads * h != e:
            raise ConfigError(f"n_heads * head_dim = {self.n_heads * h} does not equal embed_dim = {e}")
        if e & (e - 1):
            raise ConfigError(f"embed_dim must be a power of two for the Hadamard rotation, got {e}")
        if any(not 0 <= c < e for c in self.outlier_channels):
            raise ConfigError(f"outlier channels must lie in [0, {e})")
        object.__setattr__(self, "outlier_channels", tuple(int(c) for c in self.outlier_channels))

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim or 2 * self.embed_dim

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["outlier_channels"] = list(self.outlier_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "outlier_channels" in kw:
            kw["outlier_channels"] = tuple(kw["outlier_channels"])
        return cls(**kw)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class AttentionWeights:
    config: ModelConfig
    layers: list[LayerWeights] = field(default_factory=list)

    def names(self) -> list[str]:
        return [f"layers.{i}.{k}" for i in range(len(self.layers)) for k in WEIGHT_KEYS]

    def get(self, name: str) -> np.ndarray:
        layer, key = parse_name(name)
        return getattr(self.layers[layer], key)

    def set(self, name: str, value: np.ndarray) -> None:
        layer, key = parse_name(name)
        old = getattr(self.layers[layer], key)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ConfigError(f"{name}: expected shape {old.shape}, got {value.shape}")
        setattr(self.layers[layer], key, value)

    def items(self):
        for name in self.names():
            yield name, self.get(name)

    def map(self, fn) -> "AttentionWeights":
        return AttentionWeights(
            self.config,
            [LayerWeights(**{k: fn(getattr(lw, k)) for k in WEIGHT_KEYS}) for lw in self.layers],
        )

    def copy(self) -> "AttentionWeights":
        return self.map(np.copy)

    def zeros_like(self) -> "AttentionWeights":
        return self.map(np.zeros_like)


def parse_name(name: str) -> tuple[int, str]:
    parts = name.split(".")
    if len(parts) != 3 or parts[0] != "layers" or parts[2] not in WEIGHT_KEYS:
        raise ConfigError(f"unknown weight identifier {name!r}")
    return int(parts[1]), parts[2]


def weight_name(layer: int, role: str) -> str:
    return f"layers.{layer}.w{role}"


def head_slice(w: np.ndarray, head: int, head_dim: int) -> np.ndarray:
    """Columns of a Q/K/V projection that belong to ``head`` (an E x H block)."""
    return w[:, head * head_dim:(head + 1) * head_dim]


def _spectral_matrix(rng, n_in: int, n_out: int, decay: float) -> np.ndarray:
    k = min(n_in, n_out)
    s = np.arange(1, k + 1, dtype=np.float64) ** (-decay)
    g1 = rng.normal(size=(n_in, k))
    g2 = rng.normal(size=(k, n_out))
    return (g1 * s) @ g2 / np.sqrt(n_in * np.sum(s * s))


def init_weights(cfg: ModelConfig) -> AttentionWeights:
    """Seeded weights; attention projections get a power-law spectrum."""
    rng = np.random.default_rng([cfg.seed, 0])
    e, f = cfg.embed_dim, cfg.hidden_dim
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                wq=_spectral_matrix(rng, e, e, cfg.spectral_decay),
                wk=_spectral_matrix(rng, e, e, cfg.spectral_decay),
                wv=_spectral_matrix(rng, e, e, cfg.spectral_decay),
                wo=_spectral_matrix(rng, e, e, cfg.spectral_decay),
                w1=rng.normal(size=(e, f)) / np.sqrt(e),
                w2=rng.normal(size=(f, e)) / np.sqrt(f),
            )
        )
    return AttentionWeights(cfg, layers)


@dataclass
class CalibrationBatch:
    inputs: np.ndarray  # n x L x E
    targets: np.ndarray  # n x L x E

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.inputs.shape != self.targets.shape:
            raise ConfigError(f"inputs {self.inputs.shape} and targets {self.targets.shape} must be equal n x L x E")
        if self.inputs.shape[1] < 1:
            raise ConfigError("sequence length must be at least 1")
        if not np.all(np.isfinite(self.inputs)):
            raise ConfigError("calibration inputs contain non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "CalibrationBatch":
        idx = np.atleast_1d(np.asarray(idx))
        return CalibrationBatch(self.inputs[idx], self.targets[idx])

    def samples(self):
        for i in range(len(self)):
            yield self.inputs[i], self.targets[i]


def task_map(cfg: ModelConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 2])
    return rng.normal(size=(cfg.embed_dim, cfg.embed_dim)) / np.sqrt(cfg.embed_dim)


def make_targets(cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    t = np.zeros_like(x)
    t[..., 1:, :] = x[..., :-1, :] @ task_map(cfg)
    return t


def generate_calibration(cfg: ModelConfig, n_samples: int, seq_len: int, seed: int | None = None) -> CalibrationBatch:
    """Standard-normal inputs; channels in ``cfg.outlier_channels`` are scaled by ``cfg.outlier_scale``."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be positive, got {n_samples}")
    if seq_len < 1:
        raise ConfigError(f"seq_len must be positive, got {seq_len}")
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
    x = rng.normal(size=(n_samples, seq_len, cfg.embed_dim))
    if cfg.outlier_channels:
        x[..., list(cfg.outlier_channels)] *= cfg.outlier_scale
    return CalibrationBatch(x, make_targets(cfg, x))


def _check_input(cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim or x.shape[0] < 1:
        raise ConfigError(f"input must be L x {cfg.embed_dim}, got {x.shape}")
    return x


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=-1, keepdims=True)


def attention(lw: LayerWeights, x: np.ndarray, cfg: ModelConfig):
    """Causal multi-head attention before the output projection.

    Returns ``(o, cache)`` where ``o`` is L x E (heads concatenated).
    """
    n, h = cfg.n_heads, cfg.head_dim
    length = x.shape[0]
    q = (x @ lw.wq).reshape(length, n, h).transpose(1, 0, 2)
    k = (x @ lw.wk).reshape(length, n, h).transpose(1, 0, 2)
    v = (x @ lw.wv).reshape(length, n, h).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(h)
    mask = np.triu(np.ones((length, length), dtype=bool), 1)
    scores = np.where(mask, -np.inf, scores)
    p = _softmax_rows(scores)
    o = (p @ v).transpose(1, 0, 2).reshape(length, n * h)
    return o, (q, k, v, p)


def _layer_forward(lw: LayerWeights, x: np.ndarray, cfg: ModelConfig):
    o, att = attention(lw, x, cfg)
    a = o @ lw.wo
    g = np.tanh(a @ lw.w1)
    y = a + g @ lw.w2
    return y, (x, o, att, a, g)


def forward(w: AttentionWeights, x: np.ndarray, targets: np.ndarray | None = None):
    """Run the stack on one sequence. Returns ``(output, loss)``; loss is None without targets."""
    cfg = w.config
    y = _check_input(cfg, x)
    for lw in w.layers:
        y, _ = _layer_forward(lw, y, cfg)
    loss = None
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != y.shape:
            raise ConfigError(f"targets shape {targets.shape} does not match output {y.shape}")
        loss = float(np.mean((y - targets) ** 2))
    return y, loss


def batch_loss(w: AttentionWeights, batch: CalibrationBatch) -> float:
    losses = [forward(w, x, t)[1] for x, t in batch.samples()]
    return float(np.mean(losses))


def sample_gradient(w: AttentionWeights, x: np.ndarray, targets: np.ndarray, loss_scale: float = 1.0):
    """Gradient of ``loss_scale * mse(forward(x), targets)`` for one sequence.

    Returns ``(loss, grads)`` with ``grads`` shaped like ``w``.
    """
    cfg = w.config
    y = _check_input(cfg, x)
    caches = []
    for lw in w.layers:
        y, c = _layer_forward(lw, y, cfg)
        caches.append(c)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != y.shape:
        raise ConfigError(f"targets shape {targets.shape} does not match output {y.shape}")
    loss = float(np.mean((y - targets) ** 2))
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss; refusing to differentiate")

    n, h = cfg.n_heads, cfg.head_dim
    dy = loss_scale * 2.0 * (y - targets) / y.size
    grads = []
    for lw, (xin, o, (q, k, v, p), a, g) in zip(reversed(w.layers), reversed(caches)):
        length = xin.shape[0]
        dw2 = g.T @ dy
        dz = (dy @ lw.w2.T) * (1.0 - g * g)
        dw1 = a.T @ dz
        da = dy + dz @ lw.w1.T
        dwo = o.T @ da
        do = (da @ lw.wo.T).reshape(length, n, h).transpose(1, 0, 2)
        dp = do @ v.transpose(0, 2, 1)
        dv = p.transpose(0, 2, 1) @ do
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) / np.sqrt(h)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dq, dk, dv = (t.transpose(1, 0, 2).reshape(length, n * h) for t in (dq, dk, dv))
        grads.append(
            LayerWeights(wq=xin.T @ dq, wk=xin.T @ dk, wv=xin.T @ dv, wo=dwo, w1=dw1, w2=dw2)
        )
        dy = dq @ lw.wq.T + dk @ lw.wk.T + dv @ lw.wv.T
    grads.reverse()
    return loss, AttentionWeights(cfg, grads)


def backward(w: AttentionWeights, batch: CalibrationBatch, loss_scale: float = 1.0) -> AttentionWeights:
    """Gradient of the batch-mean loss, reduced over samples in index order."""
    total = w.zeros_like()
    for x, t in batch.samples():
        _, g = sample_gradient(w, x, t, loss_scale)
        for lt, lg in zip(total.layers, g.layers):
            for key in WEIGHT_KEYS:
                getattr(lt, key).__iadd__(getattr(lg, key))
    count = len(batch)
    return total.map(lambda a: a / count)


def with_weight(w: AttentionWeights, name: str, value: np.ndarray) -> AttentionWeights:
    out = AttentionWeights(w.config, [replace(lw) for lw in w.layers])
    out.set(name, value)
    return out
