"""Decoding with per-head latent KV caches and tiled online softmax.

Traffic is tallied in scalars per logical stream and per head. Anything not
tallied is treated as on-chip. FLOPs are counted as multiply-accumulates.

Modes:

``fused``          per-head latents; K tiles rebuilt from ``C_Kh`` in-tile, V
                   accumulated in latent space and up-projected through the
                   fused ``B_Vh @ W_o`` block.
``shared_latent``  one width-R latent per layer shared by all heads; every head
                   streams the whole shared latent.
``flash_full``     full K/V cache, tiled online softmax.
``eager``          full K/V cache, one-shot softmax; score and probability
                   vectors are written back (stores only).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .costmodel import latent_cost
from .errors import ConfigError
from .factorize import HeadFactors, full_matrix_factors
from .model import AttentionWeights, LayerWeights, ModelConfig, head_slice

STREAMS = ("latent-K", "latent-V", "full-K", "full-V", "weights-B", "query", "output", "scores")
MODES = ("fused", "eager", "flash_full", "shared_latent")
BYTES_PER_SCALAR = 8
FP16_BYTES_PER_SCALAR = 2


@dataclass
class StreamCount:
    loads: int = 0
    stores: int = 0
    flops: int = 0

    def __iadd__(self, other: "StreamCount"):
        self.loads += other.loads
        self.stores += other.stores
        self.flops += other.flops
        return self


class TrafficCounter:
    """Monotone scalar tallies keyed by ``(stream, head)``."""

    def __init__(self):
        self._counts: dict[tuple[str, int], StreamCount] = {}

    def _get(self, stream: str, head: int) -> StreamCount:
        if stream not in STREAMS:
            raise ConfigError(f"unknown stream {stream!r}")
        return self._counts.setdefault((stream, head), StreamCount())

    def load(self, stream: str, head: int, n: int) -> None:
        self._get(stream, head).loads += int(n)

    def store(self, stream: str, head: int, n: int) -> None:
        self._get(stream, head).stores += int(n)

    def flop(self, stream: str, head: int, n: int) -> None:
        self._get(stream, head).flops += int(n)

    def merge(self, other: "TrafficCounter") -> "TrafficCounter":
        for key, c in other._counts.items():
            self._get(*key).__iadd__(c)
        return self

    def head(self, stream: str, head: int) -> StreamCount:
        return self._counts.get((stream, head), StreamCount())

    def heads(self) -> list[int]:
        return sorted({h for _, h in self._counts})

    def total(self, stream: str) -> StreamCount:
        out = StreamCount()
        for (s, _), c in self._counts.items():
            if s == stream:
                out += c
        return out

    def to_dict(self, batch: int = 1) -> dict:
        out = {}
        for s in STREAMS:
            t = self.total(s)
            if t.loads or t.stores or t.flops:
                out[s] = {"loads": t.loads * batch, "stores": t.stores * batch, "flops": t.flops * batch}
        return out


@dataclass(frozen=True)
class TileConfig:
    length: int = 32

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError(f"tile length must be at least 1, got {self.length}")


@dataclass
class SoftmaxState:
    """Running max, denominator and weighted-value accumulator for one query row."""

    m: float
    l: float
    acc: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "SoftmaxState":
        return cls(-math.inf, 0.0, np.zeros(dim))

    @classmethod
    def from_scores(cls, scores: np.ndarray, values: np.ndarray) -> "SoftmaxState":
        m = float(np.max(scores))
        p = np.exp(scores - m)
        return cls(m, float(p.sum()), p @ values)

    def merge(self, other: "SoftmaxState") -> "SoftmaxState":
        if other.l == 0.0:
            return self
        if self.l == 0.0:
            return other
        m = max(self.m, other.m)
        a = math.exp(self.m - m)
        b = math.exp(other.m - m)
        return SoftmaxState(m, self.l * a + other.l * b, self.acc * a + other.acc * b)

    def result(self) -> np.ndarray:
        return self.acc / self.l


class GrowableMatrix:
    """Row-appendable matrix with amortized doubling."""

    def __init__(self, cols: int, capacity: int = 16):
        self._data = np.empty((max(capacity, 1), cols))
        self._n = 0

    def append(self, row: np.ndarray) -> None:
        row = np.asarray(row, dtype=np.float64).reshape(-1)
        if row.shape[0] != self._data.shape[1]:
            raise ConfigError(f"row of length {row.shape[0]} appended to matrix with {self._data.shape[1]} columns")
        if self._n == self._data.shape[0]:
            grown = np.empty((2 * self._data.shape[0], self._data.shape[1]))
            grown[: self._n] = self._data[: self._n]
            self._data = grown
        self._data[self._n] = row
        self._n += 1

    def __len__(self) -> int:
        return self._n

    @property
    def view(self) -> np.ndarray:
        return self._data[: self._n]


# models used by the decode engine


@dataclass
class PerHeadLayer:
    q: list  # per-head factors: HeadFactors or quant.QuantizedFactors
    k: list
    v: list
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    _fused: list | None = field(default=None, repr=False)

    def fused_output(self, head: int, head_dim: int) -> np.ndarray:
        """``B_Vh @ W_o[rows of head]``: maps the V latent straight to the layer output."""
        if self._fused is None:
            self._fused = [
                f.up_matrix() @ self.wo[h * head_dim:(h + 1) * head_dim] for h, f in enumerate(self.v)
            ]
        return self._fused[head]


@dataclass
class PerHeadModel:
    config: ModelConfig
    layers: list[PerHeadLayer]


@dataclass
class SharedLayer:
    wq: np.ndarray
    a_k: np.ndarray  # E x R
    b_k: np.ndarray  # R x E
    a_v: np.ndarray
    b_v: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class SharedModel:
    config: ModelConfig
    layers: list[SharedLayer]
    rank: int


def build_per_head_model(weights: AttentionWeights, factors: dict) -> PerHeadModel:
    """``factors`` maps ``(layer, role, head)`` to per-head factors for roles q, k, v."""
    cfg = weights.config
    layers = []
    for i, lw in enumerate(weights.layers):
        per_role = {
            role: [factors[(i, role, h)] for h in range(cfg.n_heads)] for role in ("q", "k", "v")
        }
        layers.append(PerHeadLayer(per_role["q"], per_role["k"], per_role["v"], lw.wo, lw.w1, lw.w2))
    return PerHeadModel(cfg, layers)


def build_shared_model(weights: AttentionWeights, rank: int) -> SharedModel:
    """Full-matrix truncated SVD of W_K and W_V with a latent of width ``rank``."""
    layers = []
    for lw in weights.layers:
        a_k, b_k = full_matrix_factors(lw.wk, rank)
        a_v, b_v = full_matrix_factors(lw.wv, rank)
        layers.append(SharedLayer(lw.wq, a_k, b_k, a_v, b_v, lw.wo, lw.w1, lw.w2))
    return SharedModel(weights.config, layers, rank)


# caches


class LatentCache:
    """Per-layer, per-head latent rows ``x @ A_Kh`` and ``x @ A_Vh``."""

    def __init__(self, model: PerHeadModel):
        self.model = model
        self.c_k = [[GrowableMatrix(f.rank) for f in layer.k] for layer in model.layers]
        self.c_v = [[GrowableMatrix(f.rank) for f in layer.v] for layer in model.layers]

    def length(self, layer: int) -> int:
        return len(self.c_k[layer][0])

    def cache_scalars(self, layer: int, head: int) -> int:
        return self.c_k[layer][head].view.size

    def append(self, layer: int, x_t: np.ndarray) -> np.ndarray:
        lay = self.model.layers[layer]
        x_t = _check_token(self.model.config, x_t)
        for h in range(len(lay.k)):
            self.c_k[layer][h].append(lay.k[h].down(x_t))
            self.c_v[layer][h].append(lay.v[h].down(x_t))
        return np.stack([(f.down(x_t) @ f.up_matrix())[0] for f in lay.q])


class FullKVCache:
    """Per-layer, per-head full key/value rows."""

    def __init__(self, weights: AttentionWeights):
        self.model = weights
        cfg = weights.config
        self.k = [[GrowableMatrix(cfg.head_dim) for _ in range(cfg.n_heads)] for _ in weights.layers]
        self.v = [[GrowableMatrix(cfg.head_dim) for _ in range(cfg.n_heads)] for _ in weights.layers]

    def length(self, layer: int) -> int:
        return len(self.k[layer][0])

    def cache_scalars(self, layer: int, head: int) -> int:
        return self.k[layer][head].view.size

    def append(self, layer: int, x_t: np.ndarray) -> np.ndarray:
        cfg = self.model.config
        lw: LayerWeights = self.model.layers[layer]
        x_t = _check_token(cfg, x_t)[0]
        k = (x_t @ lw.wk).reshape(cfg.n_heads, cfg.head_dim)
        v = (x_t @ lw.wv).reshape(cfg.n_heads, cfg.head_dim)
        for h in range(cfg.n_heads):
            self.k[layer][h].append(k[h])
            self.v[layer][h].append(v[h])
        return (x_t @ lw.wq).reshape(cfg.n_heads, cfg.head_dim)


class SharedLatentCache:
    """One width-R latent per layer shared by every head."""

    def __init__(self, model: SharedModel):
        self.model = model
        self.c_k = [GrowableMatrix(model.rank) for _ in model.layers]
        self.c_v = [GrowableMatrix(model.rank) for _ in model.layers]

    def length(self, layer: int) -> int:
        return len(self.c_k[layer])

    def cache_scalars(self, layer: int, head: int | None = None) -> int:
        return self.c_k[layer].view.size

    def append(self, layer: int, x_t: np.ndarray) -> np.ndarray:
        cfg = self.model.config
        lay = self.model.layers[layer]
        x_t = _check_token(cfg, x_t)[0]
        self.c_k[layer].append(x_t @ lay.a_k)
        self.c_v[layer].append(x_t @ lay.a_v)
        return (x_t @ lay.wq).reshape(cfg.n_heads, cfg.head_dim)


def make_cache(mode: str, model):
    if mode == "fused":
        return LatentCache(model)
    if mode in ("eager", "flash_full"):
        return FullKVCache(model)
    if mode == "shared_latent":
        return SharedLatentCache(model)
    raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


def _check_token(cfg: ModelConfig, x_t) -> np.ndarray:
    x = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != cfg.embed_dim:
        raise ConfigError(f"token must have length {cfg.embed_dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ConfigError("token contains non-finite values")
    return x


def append_token(cache, x_t: np.ndarray, layer: int = 0) -> np.ndarray:
    """Project one token into ``cache`` and return the per-head queries (n_heads x H)."""
    return cache.append(layer, x_t)


# attention kernels


@dataclass
class AttentionResult:
    heads: np.ndarray  # n_heads x H, attention output before the output projection
    output: np.ndarray  # E, after the output projection
    latent: list[np.ndarray] | None = None  # per-head V-latent results (latent modes)


def _latent_head(q_h, c_k, b_k, c_v, tile, counter, head, materialize):
    """Steps 1-4 of the fused pipeline for one head; returns the V-latent result."""
    length, r_k = c_k.shape
    r_v = c_v.shape[1]
    hd = b_k.shape[1]
    inv = 1.0 / math.sqrt(hd)
    counter.load("query", head, hd)
    counter.load("weights-B", head, b_k.size)
    if materialize:
        # reconstruct, write back and reload full K before attending
        counter.load("latent-K", head, c_k.size)
        counter.flop("latent-K", head, length * r_k * hd)
        k_full = c_k @ b_k
        counter.store("full-K", head, k_full.size)
        counter.load("full-K", head, k_full.size)
        counter.load("latent-V", head, c_v.size)
        state = SoftmaxState.empty(r_v)
        for start in range(0, length, tile):
            s = k_full[start:start + tile] @ q_h * inv
            counter.flop("scores", head, s.shape[0] * hd)
            counter.flop("latent-V", head, s.shape[0] * r_v)
            state = state.merge(SoftmaxState.from_scores(s, c_v[start:start + tile]))
        return state.result()
    state = SoftmaxState.empty(r_v)
    for start in range(0, length, tile):
        ck = c_k[start:start + tile]
        n = ck.shape[0]
        counter.load("latent-K", head, ck.size)
        k_tile = ck @ b_k
        counter.flop("latent-K", head, n * r_k * hd)
        s = k_tile @ q_h * inv
        counter.flop("scores", head, n * hd)
        cv = c_v[start:start + tile]
        counter.load("latent-V", head, cv.size)
        counter.flop("latent-V", head, n * r_v)
        state = state.merge(SoftmaxState.from_scores(s, cv))
    return state.result()


def _finish_latent(z, b_v, fused_out, counter, head):
    hd = b_v.shape[1]
    counter.load("weights-B", head, b_v.size)
    counter.flop("weights-B", head, b_v.size)
    counter.store("output", head, hd)
    return z @ b_v, z @ fused_out


def fused_decode_step(cache: LatentCache, q, tiles: TileConfig = TileConfig(), counter: TrafficCounter | None = None,
                      layer: int = 0, materialize: bool = False) -> AttentionResult:
    """One decode step over per-head latent caches.

    Per head: stream ``C_Kh`` tiles, rebuild keys with ``B_Kh`` (loaded once),
    score against ``q_h``, merge online-softmax state, and accumulate the
    ``C_Vh`` tile in latent space. The latent result goes through
    ``B_Vh @ W_o`` so full values are never formed.
    """
    if cache.length(layer) < 1:
        raise ConfigError("cannot decode from an empty cache")
    counter = TrafficCounter() if counter is None else counter
    lay = cache.model.layers[layer]
    hd = cache.model.config.head_dim
    q = np.asarray(q, dtype=np.float64)
    heads, latents, out = [], [], 0.0
    for h in range(len(lay.k)):
        worker = TrafficCounter()
        b_k = lay.k[h].up_matrix()
        b_v = lay.v[h].up_matrix()
        z = _latent_head(q[h], cache.c_k[layer][h].view, b_k, cache.c_v[layer][h].view, tiles.length, worker, h, materialize)
        head_out, proj = _finish_latent(z, b_v, lay.fused_output(h, hd), worker, h)
        counter.merge(worker)
        heads.append(head_out)
        latents.append(z)
        out = out + proj
    return AttentionResult(np.stack(heads), np.asarray(out), latents)


def _shared_step(cache: SharedLatentCache, q, tiles, counter, layer, materialize):
    lay = cache.model.layers[layer]
    cfg = cache.model.config
    hd = cfg.head_dim
    c_k = cache.c_k[layer].view
    c_v = cache.c_v[layer].view
    heads, latents, out = [], [], 0.0
    for h in range(cfg.n_heads):
        worker = TrafficCounter()
        b_k = head_slice(lay.b_k, h, hd)
        b_v = head_slice(lay.b_v, h, hd)
        z = _latent_head(q[h], c_k, b_k, c_v, tiles.length, worker, h, materialize)
        fused = b_v @ lay.wo[h * hd:(h + 1) * hd]
        head_out, proj = _finish_latent(z, b_v, fused, worker, h)
        counter.merge(worker)
        heads.append(head_out)
        latents.append(z)
        out = out + proj
    return AttentionResult(np.stack(heads), np.asarray(out), latents)


def _full_step(cache: FullKVCache, q, tiles, counter, layer, eager):
    cfg = cache.model.config
    hd = cfg.head_dim
    inv = 1.0 / math.sqrt(hd)
    heads = []
    for h in range(cfg.n_heads):
        worker = TrafficCounter()
        k = cache.k[layer][h].view
        v = cache.v[layer][h].view
        length = k.shape[0]
        worker.load("query", h, hd)
        if eager:
            worker.load("full-K", h, k.size)
            s = k @ q[h] * inv
            worker.flop("scores", h, length * hd)
            worker.store("scores", h, length)
            p = np.exp(s - s.max())
            p /= p.sum()
            worker.store("scores", h, length)
            worker.load("full-V", h, v.size)
            worker.flop("full-V", h, length * hd)
            o = p @ v
        else:
            state = SoftmaxState.empty(hd)
            for start in range(0, length, tiles.length):
                kt = k[start:start + tiles.length]
                worker.load("full-K", h, kt.size)
                s = kt @ q[h] * inv
                worker.flop("scores", h, kt.shape[0] * hd)
                vt = v[start:start + tiles.length]
                worker.load("full-V", h, vt.size)
                worker.flop("full-V", h, vt.size)
                state = state.merge(SoftmaxState.from_scores(s, vt))
            o = state.result()
        worker.store("output", h, hd)
        counter.merge(worker)
        heads.append(o)
    heads = np.stack(heads)
    return AttentionResult(heads, heads.reshape(-1) @ cache.model.layers[layer].wo)


def baseline_decode_step(mode: str, cache, q, counter: TrafficCounter | None = None,
                         tiles: TileConfig = TileConfig(), layer: int = 0, materialize: bool = False) -> AttentionResult:
    """Reference decoding modes: ``eager``, ``flash_full`` and ``shared_latent``."""
    if cache.length(layer) < 1:
        raise ConfigError("cannot decode from an empty cache")
    counter = TrafficCounter() if counter is None else counter
    q = np.asarray(q, dtype=np.float64)
    if mode == "shared_latent":
        return _shared_step(cache, q, tiles, counter, layer, materialize)
    if mode in ("eager", "flash_full"):
        return _full_step(cache, q, tiles, counter, layer, mode == "eager")
    raise ConfigError(f"unknown baseline mode {mode!r}")


def decode_step(mode: str, cache, q, counter=None, tiles: TileConfig = TileConfig(), layer: int = 0,
                materialize: bool = False) -> AttentionResult:
    if mode == "fused":
        return fused_decode_step(cache, q, tiles, counter, layer, materialize)
    return baseline_decode_step(mode, cache, q, counter, tiles, layer, materialize)


def decode_sequence(mode: str, model, x: np.ndarray, tiles: TileConfig = TileConfig(),
                    counter: TrafficCounter | None = None) -> np.ndarray:
    """Feed ``x`` (L x E) token by token through every layer; returns L x E outputs."""
    cache = make_cache(mode, model)
    x = np.asarray(x, dtype=np.float64)
    outputs = []
    for t in range(x.shape[0]):
        y = x[t]
        for i, lay in enumerate(model.layers):
            q = cache.append(i, y)
            a = decode_step(mode, cache, q, counter, tiles, i).output
            y = a + np.tanh(a @ lay.w1) @ lay.w2
        outputs.append(y)
    return np.stack(outputs)


# decode benchmark and report


@dataclass(frozen=True)
class BenchConfig:
    mode: str = "fused"
    seq_len: int = 256
    tile: int = 32
    n_heads: int = 4
    embed_dim: int = 128
    head_dim: int = 32
    rank: int = 8
    shared_rank: int = 32
    seed: int = 0
    batch: int = 1
    materialize: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_heads * self.head_dim != self.embed_dim:
            raise ConfigError("n_heads * head_dim must equal embed_dim")
        if not 1 <= self.rank <= self.head_dim:
            raise ConfigError(f"rank must lie in 1..{self.head_dim}")
        if not 1 <= self.shared_rank <= self.embed_dim:
            raise ConfigError(f"shared rank must lie in 1..{self.embed_dim}")
        if self.seq_len < 1 or self.batch < 1:
            raise ConfigError("seq_len and batch must be positive")
        TileConfig(self.tile)

    def model_config(self) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, head_dim=self.head_dim, n_heads=self.n_heads,
                           n_layers=1, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "L": self.seq_len, "tile": self.tile, "heads": self.n_heads,
            "E": self.embed_dim, "H": self.head_dim, "r": self.rank, "R": self.shared_rank,
            "seed": self.seed, "batch": self.batch, "materialize": self.materialize,
        }


def bench_model(cfg: BenchConfig):
    """Seeded single-layer model in the representation ``cfg.mode`` needs."""
    from .model import init_weights
    from .factorize import per_head_svd

    weights = init_weights(cfg.model_config())
    if cfg.mode in ("eager", "flash_full"):
        return weights
    if cfg.mode == "shared_latent":
        return build_shared_model(weights, cfg.shared_rank)
    lw = weights.layers[0]
    factors = {}
    for role, w in (("q", lw.wq), ("k", lw.wk), ("v", lw.wv)):
        for h in range(cfg.n_heads):
            factors[(0, role, h)] = per_head_svd(w, h, cfg.rank, cfg.head_dim, 0, role)
    return build_per_head_model(weights, factors)


def run_bench(cfg: BenchConfig, model=None, timing: bool = True) -> dict:
    """Prefill ``seq_len`` tokens, then time and count one decode step."""
    model = bench_model(cfg) if model is None else model
    rng = np.random.default_rng([cfg.seed, 3])
    x = rng.normal(size=(cfg.seq_len, cfg.embed_dim))
    cache = make_cache(cfg.mode, model)
    for t in range(cfg.seq_len - 1):
        cache.append(0, x[t])
    # the new token attends over L - 1 prefilled positions plus itself
    q = cache.append(0, x[-1])
    counter = TrafficCounter()
    t0 = time.perf_counter()
    result = decode_step(cfg.mode, cache, q, counter, TileConfig(cfg.tile), 0, cfg.materialize)
    wall_ms = (time.perf_counter() - t0) * 1e3
    ranks = _mode_ranks(cfg.mode, model, cfg)
    report = traffic_report(counter, cfg.mode, cache.length(0), cfg.embed_dim, cfg.head_dim, ranks, cfg.batch)
    report["config"] = cfg.to_dict()
    report["wall_ms"] = wall_ms if timing else None
    report["output_norm"] = float(np.linalg.norm(result.output))
    return report


def _mode_ranks(mode, model, cfg: BenchConfig) -> dict[int, tuple[int, int]]:
    if mode == "fused":
        lay = model.layers[0]
        return {h: (lay.k[h].rank, lay.v[h].rank) for h in range(len(lay.k))}
    if mode == "shared_latent":
        return {h: (model.rank, model.rank) for h in range(cfg.n_heads)}
    return {h: (cfg.head_dim, cfg.head_dim) for h in range(cfg.n_heads)}


def traffic_report(counter: TrafficCounter, mode: str, seq_len: int, embed_dim: int, head_dim: int,
                   ranks: dict[int, tuple[int, int]], batch: int = 1) -> dict:
    """Measured per-head traffic next to the closed-form predictions.

    ``ranks`` maps head -> (r_K, r_V); for full-KV modes pass ``(H, H)``.
    ``match`` is true when every head's measured K-path loads and
    reconstruction MACs equal the analytic values exactly.
    """
    latent = mode in ("fused", "shared_latent")
    k_stream = "latent-K" if latent else "full-K"
    per_head = {}
    match = True
    for h, (r_k, r_v) in sorted(ranks.items()):
        c = counter.head(k_stream, h)
        if latent:
            gamma, eta = latent_cost(seq_len, r_k, head_dim)
        else:
            eta, gamma = seq_len * head_dim, 0
        ok = c.loads == eta and c.flops == gamma
        match = match and ok
        per_head[str(h)] = {"eta_measured": c.loads, "gamma_measured": c.flops, "eta": eta, "gamma": gamma,
                            "latent_v_loads": counter.head("latent-V", h).loads, "match": ok}
    r_mean = sum(r for r, _ in ranks.values()) / len(ranks)
    if mode == "fused":
        rk = [r for r, _ in ranks.values()]
        rho1 = sum((embed_dim + head_dim) * r for r in rk) / (embed_dim * head_dim * len(rk))
        rho2 = sum(rk) / (head_dim * len(rk))
    elif mode == "shared_latent":
        rr = next(iter(ranks.values()))[0]
        rho1, rho2 = 2 * rr / embed_dim, rr / embed_dim
    else:
        rho1 = rho2 = 1.0
    first = per_head[str(min(ranks))]
    return {
        "mode": mode,
        "counters": counter.to_dict(batch),
        "analytic": {"gamma": first["gamma"], "eta": first["eta"], "rho1": rho1, "rho2": rho2,
                     "mean_rank": r_mean},
        "per_head": per_head,
        "bytes": {
            "loaded": _total_loads(counter) * BYTES_PER_SCALAR * batch,
            "loaded_fp16_equiv": _total_loads(counter) * FP16_BYTES_PER_SCALAR * batch,
        },
        "match": match,
    }


def _total_loads(counter: TrafficCounter) -> int:
    return sum(counter.total(s).loads for s in STREAMS)
