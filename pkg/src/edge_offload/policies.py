"""Offloading policies: fixed threshold, bucket-free lower bound, MDP, DQN.

Every policy answers per-arrival queries through ``decide`` and, for the
simulator's fast path, produces a decision table: row ``i`` holds the
action it would take at arrival ``i`` for each token state ``N..M``. Inputs
never depend on past actions, so the table is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dqn
from .token_bucket import BucketParams, BucketState


@dataclass(frozen=True)
class Decision:
    offload: bool

    def __bool__(self) -> bool:
        return self.offload


@dataclass(frozen=True)
class DecisionContext:
    history: dqn.HistoryWindow
    bucket: BucketState
    params: BucketParams
    current_metric: float
    current_gap: int


def _states(params: BucketParams) -> np.ndarray:
    return np.arange(params.N, params.M + 1)


@dataclass(frozen=True)
class ThresholdPolicy:
    """Offload when the metric reaches ``threshold``.

    With ``respects_bucket=False`` this is the lower bound: it ignores the
    bucket entirely and the simulator skips token accounting for it.
    """

    threshold: float
    respects_bucket: bool = True

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    def decide(self, ctx: DecisionContext) -> Decision:
        want = ctx.current_metric >= self.threshold
        if self.respects_bucket:
            want = want and ctx.bucket.n_bar >= ctx.params.P
        return Decision(bool(want))

    def decision_table(self, trace, params: BucketParams) -> np.ndarray:
        want = trace.metric >= self.threshold
        if not self.respects_bucket:
            return want[:, None]
        return want[:, None] & (_states(params) >= params.P)[None, :]


def baseline(threshold: float) -> ThresholdPolicy:
    return ThresholdPolicy(threshold, respects_bucket=True)


def lower_bound(threshold: float) -> ThresholdPolicy:
    return ThresholdPolicy(threshold, respects_bucket=False)


def quantile_threshold(metrics, r: float) -> float:
    """Upper ``(1 - r)`` quantile of ``metrics``.

    Returns the sorted value at 0-based rank ``n - floor(r n)``, so that at
    most ``floor(r n)`` distinct-valued samples clear it.
    """
    if not 0 < r <= 1:
        raise ValueError(f"rate must be in (0, 1], got {r}")
    v = np.sort(np.asarray(metrics, dtype=float))
    if v.size == 0:
        raise ValueError("empty population")
    k = v.size - math.floor(r * v.size + 1e-9)
    return float(v[min(k, v.size - 1)])


def offload_fraction(params: BucketParams, mean_gap: float) -> float:
    """Share of images the token rate can sustain at the given arrival rate."""
    return min(1.0, float(params.rate) * mean_gap)


def trace_span(trace) -> int:
    """Slots covered by a trace: the first arrival's slot through the last."""
    return int(trace.gap[1:].sum()) + 1 if len(trace) else 0


def trace_budget_fraction(trace, params: BucketParams) -> float:
    """Long-run token budget of ``trace`` as a fraction of its images."""
    return min(1.0, float(params.rate) * trace_span(trace) / len(trace))


def lower_bound_for(trace, params: BucketParams) -> ThresholdPolicy:
    """Bucket-free reference that offloads the best ``floor(r * span)`` images of ``trace``.

    The threshold is read off the evaluated sequence itself, so the
    reference spends exactly the long-run token budget; it is not causal.
    """
    k = min(len(trace), int(params.N * trace_span(trace) // params.P))
    if k == 0:
        return lower_bound(math.nextafter(float(trace.metric.max()), math.inf))
    return lower_bound(float(np.sort(trace.metric)[len(trace) - k]))


# -- MDP baseline --------------------------------------------------------------

@dataclass(frozen=True)
class MetricBins:
    """Equal-mass discretisation of a metric distribution."""

    lower: np.ndarray   # smallest metric in each bin, ascending
    prob: np.ndarray
    reward: np.ndarray  # mean realised reward per bin


def discretize(metrics, rewards, n_bins: int = 100, monotone: bool = True) -> MetricBins:
    """Split samples sorted by metric into ``n_bins`` near-equal-count bins.

    With ``monotone`` the bin rewards are made non-decreasing by pooling
    adjacent violators, which makes the optimal per-state rule a threshold.
    """
    if not 1 <= n_bins <= 1024:
        raise ValueError("need 1..1024 bins")
    m = np.asarray(metrics, dtype=float)
    r = np.asarray(rewards, dtype=float)
    order = np.argsort(m, kind="stable")
    chunks = [c for c in np.array_split(order, min(n_bins, m.size)) if c.size]
    lower = np.array([m[c].min() for c in chunks])
    prob = np.array([c.size for c in chunks], dtype=float) / m.size
    reward = np.array([r[c].mean() for c in chunks])
    if monotone:
        reward = _pool_adjacent_violators(reward, prob)
    return MetricBins(lower, prob, reward)


def _pool_adjacent_violators(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    blocks = []  # (value, weight, count)
    for yi, wi in zip(y, w):
        blocks.append([yi, wi, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            v2, w2, c2 = blocks.pop()
            v1, w1, c1 = blocks.pop()
            blocks.append([(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2, c1 + c2])
    return np.concatenate([np.full(c, v) for v, _, c in blocks])


def _gap_mixture(arrival_rate: float) -> list[tuple[int, float]]:
    """Integer gaps straddling 1/rate whose mean equals 1/rate."""
    if not 0 < arrival_rate <= 1:
        raise ValueError("arrival rate must be in (0, 1] images per slot")
    g = 1.0 / arrival_rate
    lo = math.floor(g + 1e-12)
    frac = g - lo
    if frac < 1e-12:
        return [(lo, 1.0)]
    return [(lo, 1.0 - frac), (lo + 1, frac)]


@dataclass(frozen=True)
class MdpPolicy:
    """Per-token-state metric thresholds (``inf`` = never offload)."""

    thresholds: np.ndarray  # indexed by n_bar - P for n_bar = P..M
    params: BucketParams
    assumed_rate: float
    gamma: float
    values: np.ndarray | None = None

    def threshold(self, n_bar: int) -> float:
        if n_bar < self.params.P:
            return math.inf
        return float(self.thresholds[n_bar - self.params.P])

    def decide(self, ctx: DecisionContext) -> Decision:
        n = ctx.bucket.n_bar
        return Decision(bool(n >= self.params.P and ctx.current_metric >= self.threshold(n)))

    def decision_table(self, trace, params: BucketParams) -> np.ndarray:
        thr = np.array([self.threshold(n) for n in _states(params)])
        return trace.metric[:, None] >= thr[None, :]


def _continuation(V: np.ndarray, params: BucketParams, gamma: float, gaps) -> tuple[np.ndarray, np.ndarray]:
    N, P, M = params.N, params.P, params.M
    n = np.arange(M + 1)
    keep = np.zeros(M + 1)
    spend = np.full(M + 1, -np.inf)
    for g, q in gaps:
        keep += q * gamma ** g * V[np.minimum(M, n + N * g)]
    feasible = n >= P
    spend[feasible] = 0.0
    for g, q in gaps:
        spend[feasible] += q * gamma ** g * V[np.minimum(M, n[feasible] - P + N * g)]
    return keep, spend


def solve_mdp(bins: MetricBins, arrival_rate: float, params: BucketParams, gamma: float = 0.99,
              tol: float = 1e-9, max_sweeps: int = 10 ** 6) -> MdpPolicy:
    """Value iteration over token counts assuming i.i.d. metrics and periodic arrivals.

    Non-integer mean gaps are planned as a two-point mix of the neighbouring
    integer gaps.
    """
    if not 0 <= gamma < 1:
        raise ValueError("gamma must be in [0, 1)")
    gaps = _gap_mixture(arrival_rate)
    V = np.zeros(params.M + 1)
    for _ in range(max_sweeps):
        keep, spend = _continuation(V, params, gamma, gaps)
        gain = np.maximum(0.0, bins.reward[None, :] + spend[:, None] - keep[:, None])
        V_new = keep + gain @ bins.prob
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        if delta < tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge in {max_sweeps} sweeps")
    keep, spend = _continuation(V, params, gamma, gaps)
    thresholds = []
    for n in range(params.P, params.M + 1):
        cost = keep[n] - spend[n]
        wins = np.nonzero(bins.reward > cost)[0]
        thresholds.append(bins.lower[wins[0]] if wins.size else math.inf)
    thresholds = np.array(thresholds)
    finite = np.where(np.isinf(thresholds), np.finfo(float).max, thresholds)
    if np.any(np.diff(finite) > 0):
        raise RuntimeError(f"MDP thresholds are not monotone in the token count: {thresholds}")
    return MdpPolicy(thresholds, params, arrival_rate, gamma, V)


# -- DQN adapter ---------------------------------------------------------------

@dataclass(frozen=True)
class DqnPolicy:
    net: dqn.QNetwork

    @property
    def T(self) -> int:
        return self.net.T

    def decide(self, ctx: DecisionContext) -> Decision:
        return Decision(dqn.act(self.net, ctx))

    def decision_table(self, trace, params: BucketParams) -> np.ndarray:
        if params != self.net.params:
            raise ValueError("network was trained for a different bucket")
        q = dqn.forward_trace(self.net, trace)
        lay = self.net.layout
        states = _states(params)
        table = np.zeros((len(trace), states.size), dtype=bool)
        feas = states >= params.P
        s = states[feas]
        table[:, feas] = q[:, lay.idx1[s]] > q[:, lay.idx0[s]]
        return table
