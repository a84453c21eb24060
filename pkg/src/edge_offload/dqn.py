"""Deep Q-network for offloading under a token bucket.

The network reads only the arrival/metric history and emits one Q-value per
feasible (token state, action) pair, so a single forward pass scores every
token state at once. Because inputs never depend on actions, training
samples segments from a fixed replay trace and regresses all token-state
outputs simultaneously against targets from a frozen copy of the network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .token_bucket import BucketParams

log = logging.getLogger(__name__)

GAP_CLIP = 255
_MAGIC = b"EDGEDQN1"
_EVAL_CHUNK = 8192


class DivergenceError(RuntimeError):
    pass


# -- output layout -------------------------------------------------------------

class OutputLayout:
    """Bijection (n_bar, a) <-> output index.

    Indices ``0 .. M-N`` hold a=0 for n_bar = N..M; the following ``M-P+1``
    hold a=1 for n_bar = P..M.
    """

    def __init__(self, params: BucketParams):
        self.params = params
        N, P, M = params.N, params.P, params.M
        self.n_states = M - N + 1
        self.size = 2 * M - P - N + 2
        # indexed by n_bar directly; -1 marks pairs outside the layout
        self.idx0 = np.full(M + 1, -1, dtype=np.int64)
        self.idx1 = np.full(M + 1, -1, dtype=np.int64)
        self.idx0[N:] = np.arange(self.n_states)
        self.idx1[P:] = self.n_states + np.arange(M - P + 1)
        pairs = [(n, 0) for n in range(N, M + 1)] + [(n, 1) for n in range(P, M + 1)]
        self.n_bar = np.array([p[0] for p in pairs], dtype=np.int64)
        self.action = np.array([p[1] for p in pairs], dtype=np.int64)

    def __len__(self) -> int:
        return self.size

    def index(self, n_bar: int, a: int) -> int:
        i = int((self.idx1 if a else self.idx0)[n_bar]) if 0 <= n_bar <= self.params.M else -1
        if i < 0:
            raise KeyError(f"(n_bar={n_bar}, a={a}) is not in the output layout")
        return i

    def pair(self, index: int) -> tuple[int, int]:
        return int(self.n_bar[index]), int(self.action[index])


# -- inputs --------------------------------------------------------------------

@dataclass(frozen=True)
class HistoryWindow:
    """Last T-1 (gap, metric) pairs, oldest first, zero-padded at the front."""

    gaps: np.ndarray
    metrics: np.ndarray

    @classmethod
    def empty(cls, T: int) -> "HistoryWindow":
        return cls(np.zeros(T - 1, dtype=np.int64), np.zeros(T - 1))

    def push(self, gap: int, metric: float) -> "HistoryWindow":
        return HistoryWindow(np.r_[self.gaps[1:], gap], np.r_[self.metrics[1:], metric])


def encode(gaps, metrics, gap_clip: int = GAP_CLIP) -> np.ndarray:
    """Network input: clipped, scaled gaps followed by raw metrics."""
    g = np.minimum(np.asarray(gaps, dtype=float), gap_clip) / gap_clip
    return np.concatenate([g, np.asarray(metrics, dtype=float)], axis=-1)


def padded_columns(trace, T: int, gap_clip: int = GAP_CLIP) -> tuple[np.ndarray, np.ndarray]:
    """Encoded gap and metric columns with T-1 leading zeros."""
    pad = T - 1
    g = np.r_[np.zeros(pad), np.minimum(trace.gap, gap_clip) / gap_clip]
    m = np.r_[np.zeros(pad), trace.metric]
    return g, m


def trace_windows(trace, T: int, gap_clip: int = GAP_CLIP) -> np.ndarray:
    """Encoded input for every arrival: row i ends with arrival i."""
    g, m = padded_columns(trace, T, gap_clip)
    gw = sliding_window_view(g, T - 1)[1:]
    mw = sliding_window_view(m, T - 1)[1:]
    return np.concatenate([gw, mw], axis=1)


# -- network -------------------------------------------------------------------

@dataclass
class QNetwork:
    weights: list
    biases: list
    T: int
    params: BucketParams
    gap_clip: int = GAP_CLIP

    def __post_init__(self):
        expected = 2 * (self.T - 1)
        if self.weights[0].shape[0] != expected:
            raise ValueError(f"input width {self.weights[0].shape[0]} != 2(T-1) = {expected}")
        if self.weights[-1].shape[1] != OutputLayout(self.params).size:
            raise ValueError("output width does not match the bucket's output layout")

    @property
    def layout(self) -> OutputLayout:
        return OutputLayout(self.params)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.T, self.params, self.gap_clip)

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_network(T: int, params: BucketParams, hidden=(64,) * 5, seed=0,
                 gap_clip: int = GAP_CLIP) -> QNetwork:
    """He-uniform weights (limit sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [2 * (T - 1), *hidden, OutputLayout(params).size]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return QNetwork(weights, biases, T, params, gap_clip)


def _forward(net: QNetwork, x: np.ndarray) -> tuple[np.ndarray, list]:
    acts = [x]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = x @ w + b
        if i < last:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return x, acts


def forward(net: QNetwork, x) -> np.ndarray:
    """Q-values for a HistoryWindow, or for a batch of encoded inputs."""
    if isinstance(x, HistoryWindow):
        if x.gaps.size != net.T - 1 or x.metrics.size != net.T - 1:
            raise ValueError(f"window length must be T-1 = {net.T - 1}")
        x = encode(x.gaps, x.metrics, net.gap_clip)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.weights[0].shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != {net.weights[0].shape[0]}")
    return _forward(net, x)[0]


def forward_trace(net: QNetwork, trace) -> np.ndarray:
    """Q-values for every arrival of a trace, evaluated in chunks."""
    out = np.empty((len(trace), net.weights[-1].shape[1]))
    g, m = padded_columns(trace, net.T, net.gap_clip)
    gw = sliding_window_view(g, net.T - 1)[1:]
    mw = sliding_window_view(m, net.T - 1)[1:]
    for s in range(0, len(trace), _EVAL_CHUNK):
        x = np.concatenate([gw[s:s + _EVAL_CHUNK], mw[s:s + _EVAL_CHUNK]], axis=1)
        out[s:s + _EVAL_CHUNK] = _forward(net, x)[0]
    return out


def backward(net: QNetwork, acts: list, grad_out: np.ndarray) -> list[np.ndarray]:
    """Gradients in :meth:`QNetwork.tensors` order for upstream ``grad_out``."""
    grads = [None] * (2 * len(net.weights))
    g = grad_out
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ net.weights[i].T) * (acts[i] > 0)
    return grads


# -- targets and loss ----------------------------------------------------------

def q_targets(x_next: np.ndarray, reward, next_gap, target: QNetwork, params: BucketParams,
              gamma: float) -> np.ndarray:
    """Regression targets for every (n_bar, a) of a batch.

    ``a*R + gamma * max_a' Q_target(X', n_bar'; a')`` with
    ``n_bar' = min(M, n_bar - P*a + N*I_T)``; all token states read the same
    target forward pass.
    """
    layout = OutputLayout(params)
    x_next = np.atleast_2d(x_next)
    reward = np.atleast_1d(np.asarray(reward, dtype=float))
    next_gap = np.atleast_1d(np.asarray(next_gap, dtype=np.int64))
    qt = forward(target, x_next)
    N, P, M = params.N, params.P, params.M
    # best next value per next-state n' in N..M
    best = qt[:, layout.idx0[N:]].copy()
    best[:, P - N:] = np.maximum(best[:, P - N:], qt[:, layout.idx1[P:]])
    n_next = np.minimum(M, layout.n_bar[None, :] - P * layout.action[None, :]
                        + N * next_gap[:, None])
    boot = np.take_along_axis(best, n_next - N, axis=1)
    return layout.action[None, :] * reward[:, None] + gamma * boot


def q_target_update(X: HistoryWindow, X_next: HistoryWindow, R: float, I_T: int,
                    target: QNetwork, params: BucketParams, gamma: float) -> np.ndarray:
    """Single-segment form of :func:`q_targets`; ``X`` is unused by the target."""
    x_next = encode(X_next.gaps, X_next.metrics, target.gap_clip)
    return q_targets(x_next, R, I_T, target, params, gamma)[0]


def mse_loss(net: QNetwork, x: np.ndarray, targets: np.ndarray) -> tuple[float, list]:
    """Mean squared error over batch and outputs, with parameter gradients."""
    q, acts = _forward(net, x)
    diff = q - targets
    loss = float(np.mean(diff * diff))
    grads = backward(net, acts, 2.0 * diff / diff.size)
    return loss, grads


# -- optimisation --------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, tensors: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in tensors]
            self.v = [np.zeros_like(p) for p in tensors]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(tensors, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    segments_per_sync: int = 2 ** 12
    sync_count: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    T: int = 97
    hidden: tuple = (64,) * 5
    gap_clip: int = GAP_CLIP
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if self.segments_per_sync < 1 or self.batch_size < 1 or self.sync_count < 0:
            raise ValueError("segment, batch and sync counts must be positive")
        if self.T < 2:
            raise ValueError("history window T must be >= 2")


@dataclass
class SegmentBatch:
    """Inputs X, X', the current reward R and the next gap I_T of each segment."""

    x: np.ndarray
    x_next: np.ndarray
    reward: np.ndarray
    next_gap: np.ndarray


class ReplayBuffer:
    """Fixed trace sampled as length-T segments, zero-padded at the start."""

    def __init__(self, trace, T: int, gap_clip: int = GAP_CLIP):
        if len(trace) < 2:
            raise ValueError("replay trace needs at least two arrivals")
        self.T = T
        g, m = padded_columns(trace, T, gap_clip)
        self._g = sliding_window_view(g, T)
        self._m = sliding_window_view(m, T)
        self._reward = trace.reward.astype(float)
        self._gap = trace.gap
        self.n_segments = len(trace) - 1

    def segments(self, ends: np.ndarray) -> SegmentBatch:
        """Segments whose last entry is trace index ``ends`` (each >= 1)."""
        g, m = self._g[ends], self._m[ends]
        x = np.concatenate([g[:, :-1], m[:, :-1]], axis=1)
        x_next = np.concatenate([g[:, 1:], m[:, 1:]], axis=1)
        return SegmentBatch(x, x_next, self._reward[ends - 1], self._gap[ends])

    def sample(self, n: int, rng: np.random.Generator) -> SegmentBatch:
        return self.segments(rng.integers(1, self.n_segments + 1, n))


def train_step(net: QNetwork, target: QNetwork, batch: SegmentBatch, cfg: TrainerConfig,
               opt: Adam) -> float:
    """One optimiser step on a batch; returns the pre-step loss."""
    if batch.x.shape[0] == 0:
        raise ValueError("empty batch")
    y = q_targets(batch.x_next, batch.reward, batch.next_gap, target, net.params, cfg.gamma)
    loss, grads = mse_loss(net, batch.x, y)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at optimiser step {opt.t}")
    if opt.lr:
        opt.step(net.tensors(), grads)
    return loss


def train(trace, params: BucketParams, cfg: TrainerConfig, net: QNetwork | None = None,
          progress=None) -> tuple[QNetwork, list[float]]:
    """Run ``sync_count`` rounds of ``segments_per_sync`` segments each.

    Returns the trained network and the mean loss of every round.
    """
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = init_network(cfg.T, params, cfg.hidden, seed=rng.integers(2 ** 63), gap_clip=cfg.gap_clip)
    if cfg.sync_count == 0:
        return net, []
    buf = ReplayBuffer(trace, cfg.T, cfg.gap_clip)
    opt = Adam(lr=cfg.learning_rate)
    history = []
    for k in range(cfg.sync_count):
        target = net.copy()
        losses, left = [], cfg.segments_per_sync
        while left > 0:
            n = min(cfg.batch_size, left)
            losses.append(train_step(net, target, buf.sample(n, rng), cfg, opt))
            left -= n
        history.append(float(np.mean(losses)))
        log.debug("sync %d/%d loss %.6g", k + 1, cfg.sync_count, history[-1])
        if progress is not None:
            progress(k, history[-1])
    return net, history


# -- acting --------------------------------------------------------------------

def greedy(q: np.ndarray, layout: OutputLayout, n_bar: int) -> bool:
    """Offload iff feasible and Q(n_bar, 1) strictly beats Q(n_bar, 0)."""
    if n_bar < layout.params.P:
        return False
    return bool(q[layout.idx1[n_bar]] > q[layout.idx0[n_bar]])


def act(net: QNetwork, ctx) -> bool:
    return greedy(forward(net, ctx.history), net.layout, ctx.bucket.n_bar)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(net: QNetwork, path) -> None:
    """ASCII header line, then little-endian float64 weights and biases in layer order."""
    p = net.params
    sizes = ",".join(str(s) for s in net.sizes)
    header = f"{_MAGIC.decode()} T={net.T} N={p.N} P={p.P} M={p.M} layers={sizes} gap_clip={net.gap_clip}\n"
    with Path(path).open("wb") as fh:
        fh.write(header.encode())
        for t in net.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> QNetwork:
    raw = Path(path).read_bytes()
    line, _, body = raw.partition(b"\n")
    fields = line.split()
    if not fields or fields[0] != _MAGIC:
        raise ValueError(f"{path}: not a DQN checkpoint")
    meta = dict(f.decode().split("=", 1) for f in fields[1:])
    params = BucketParams(int(meta["N"]), int(meta["P"]), int(meta["M"]))
    sizes = [int(s) for s in meta["layers"].split(",")]
    T = int(meta["T"])
    if sizes[-1] != OutputLayout(params).size:
        raise ValueError(f"{path}: output width {sizes[-1]} does not match layout "
                         f"{OutputLayout(params).size}")
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])) * 8
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} weight bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(float)
    weights, biases, off = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[off:off + a * b].reshape(a, b).copy())
        off += a * b
        biases.append(flat[off:off + b].copy())
        off += b
    return QNetwork(weights, biases, T, params, int(meta.get("gap_clip", GAP_CLIP)))

