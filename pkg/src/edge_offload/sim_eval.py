"""Episode simulation with token accounting, policy comparison and trace export."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import token_bucket as tb
from .dqn import HistoryWindow
from .policies import DecisionContext
from .token_bucket import BucketParams, BucketState, BucketViolation

log = logging.getLogger(__name__)

UNBOUNDED = -1  # n_bar logged for policies that bypass the bucket

LOG_COLUMNS = ["t", "metric", "n_bar_before", "action", "reward"]


@dataclass
class DecisionLog:
    t: np.ndarray
    metric: np.ndarray
    n_bar_before: np.ndarray
    action: np.ndarray
    reward: np.ndarray

    def __len__(self) -> int:
        return self.t.size

    def equals(self, other: "DecisionLog") -> bool:
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in LOG_COLUMNS)


@dataclass
class EpisodeResult:
    avg_loss: float
    discounted_reward: float
    offload_count: int
    conformance_ok: bool
    log: DecisionLog = field(repr=False)

    @property
    def avg_reward(self) -> float:
        n = len(self.log)
        return float(np.sum(self.log.action * self.log.reward)) / n if n else 0.0


def arrival_slots(gaps: np.ndarray) -> np.ndarray:
    """Slot index of each arrival, the first arriving at slot 0."""
    t = np.cumsum(gaps)
    return t - t[0] if t.size else t


def iter_contexts(trace, params: BucketParams, T: int, actions, bounded: bool = True) -> Iterator[DecisionContext]:
    """Contexts seen by a policy given its past actions.

    ``actions`` is consulted lazily: after each yielded context the caller
    must have appended its action to it. Unbounded policies always see a
    full bucket.
    """
    window = HistoryWindow.empty(T)
    n_bar = params.M
    for i in range(len(trace)):
        e = trace[i]
        if i > 0 and bounded:
            n_bar = tb.advance_count(n_bar, params, actions[i - 1], e.gap)
        window = window.push(e.gap, e.metric)
        yield DecisionContext(window, BucketState(n_bar), params, e.metric, e.gap)


def check_conformance(offload_slots: np.ndarray, params: BucketParams, horizon: int | None = None) -> bool:
    """Offloads in every window of W slots stay within ``floor((N W + M) / P)``.

    Windows of every power-of-two length up to ``horizon`` are checked,
    each anchored at every offload.
    """
    s = np.sort(np.asarray(offload_slots))
    if s.size == 0:
        return True
    span = int(s[-1] - s[0]) + 1 if horizon is None else horizon
    W = 1
    while True:
        counts = np.searchsorted(s, s + W, side="left") - np.arange(s.size)
        if counts.max() > tb.conformance_bound(params, W):
            return False
        if W >= span:
            return True
        W *= 2


def run(policy, trace, params: BucketParams, gamma: float = 0.99, table: np.ndarray | None = None) -> EpisodeResult:
    """Play ``policy`` over ``trace`` starting from a full bucket.

    Loss per image is ``weak_loss - a * reward``. Offloading without tokens
    raises :class:`BucketViolation` naming the arrival.
    """
    n = len(trace)
    if n == 0:
        raise ValueError("empty trace")
    if table is None:
        table = policy.decision_table(trace, params)
    bounded = getattr(policy, "respects_bucket", True)
    actions = np.zeros(n, dtype=np.int64)
    n_log = np.full(n, UNBOUNDED, dtype=np.int64)
    gaps = trace.gap.tolist()
    if bounded:
        N, P, M = params.N, params.P, params.M
        n_bar, prev = M, False
        rows = table.tolist()
        acts, states = [0] * n, [0] * n
        for i in range(n):
            if i:
                n_bar = min(M, n_bar - (P if prev else 0) + N * gaps[i])
            states[i] = n_bar
            prev = rows[i][n_bar - N]
            if prev:
                if n_bar < P:
                    raise BucketViolation(f"arrival {i}: offload with n_bar={n_bar} < P={P}")
                acts[i] = 1
        actions[:] = acts
        n_log[:] = states
    else:
        actions[:] = table[:, 0]
    slots = arrival_slots(trace.gap)
    offloaded = actions.astype(bool)
    gained = actions * trace.reward
    losses = trace.weak_loss - gained
    with np.errstate(under="ignore"):
        disc = float(np.sum(gained * np.power(gamma, slots.astype(float))))
    ok = check_conformance(slots[offloaded], params) if bounded else True
    return EpisodeResult(
        avg_loss=float(losses.mean()),
        discounted_reward=disc,
        offload_count=int(offloaded.sum()),
        conformance_ok=ok,
        log=DecisionLog(slots, trace.metric.copy(), n_log, actions, trace.reward.copy()),
    )


def run_reference(policy, trace, params: BucketParams, T: int, gamma: float = 0.99) -> EpisodeResult:
    """Slow path: query ``policy.decide`` arrival by arrival."""
    bounded = getattr(policy, "respects_bucket", True)
    actions: list[int] = []
    states: list[int] = []
    for ctx in iter_contexts(trace, params, T, actions, bounded):
        d = policy.decide(ctx)
        if bounded and d.offload and ctx.bucket.n_bar < params.P:
            raise BucketViolation(f"arrival {len(actions)}: offload with n_bar={ctx.bucket.n_bar}")
        actions.append(int(d.offload))
        states.append(ctx.bucket.n_bar)
    if not bounded:
        return run(policy, trace, params, gamma, table=np.array(actions, dtype=bool)[:, None])
    # only the visited cell of each row matters to the fast path
    table = np.zeros((len(trace), params.M - params.N + 1), dtype=bool)
    table[np.arange(len(trace)), np.array(states) - params.N] = np.array(actions, dtype=bool)
    return run(policy, trace, params, gamma, table=table)


# -- comparison ----------------------------------------------------------------

@dataclass
class Scenario:
    """Everything needed to produce a seed's test trace."""

    make_trace: Callable[[int], object]
    params: BucketParams
    gamma: float = 0.99


def _evaluate_seed(args):
    policies, scenario, seed = args
    trace = scenario.make_trace(seed)
    out = {}
    for name, pol in policies.items():
        p = pol if hasattr(pol, "decide") else pol(seed, trace)
        out[name] = run(p, trace, scenario.params, scenario.gamma)
    return seed, out


def compare(policies: dict, scenario: Scenario, seeds, workers: int = 1) -> "Summary":
    """Evaluate every policy on identical per-seed test traces.

    A policy entry may instead be a factory ``(seed, test_trace) -> policy``
    for per-seed models or trace-calibrated references.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = [(policies, scenario, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = dict(ex.map(_evaluate_seed, jobs))
    else:
        results = dict(map(_evaluate_seed, jobs))
    per_seed = {name: [results[s][name] for s in seeds] for name in policies}
    return Summary(seeds, per_seed)


@dataclass
class Summary:
    seeds: list
    results: dict  # name -> list[EpisodeResult], in seed order

    def losses(self, name: str) -> np.ndarray:
        return np.array([r.avg_loss for r in self.results[name]])

    def rows(self) -> list[dict]:
        out = []
        for name in self.results:
            l = self.losses(name)
            out.append({
                "policy": name,
                "mean_loss": float(l.mean()),
                "std_loss": float(l.std(ddof=1)) if l.size > 1 else 0.0,
                "mean_offload_rate": float(np.mean([r.offload_count / len(r.log) for r in self.results[name]])),
                "conformance_ok": all(r.conformance_ok for r in self.results[name]),
                "seeds": l.size,
            })
        return out

    def table(self) -> str:
        lines = ["policy,mean_loss,std_loss,mean_offload_rate,conformance_ok,seeds"]
        for r in self.rows():
            lines.append(f"{r['policy']},{r['mean_loss']:.17g},{r['std_loss']:.17g},"
                         f"{r['mean_offload_rate']:.17g},{int(r['conformance_ok'])},{r['seeds']}")
        return "\n".join(lines) + "\n"

    def key_values(self) -> str:
        lines = []
        for r in self.rows():
            for k, v in r.items():
                if k != "policy":
                    lines.append(f"{r['policy']}.{k}={v!r}")
        for name in self.results:
            for s, l in zip(self.seeds, self.losses(name)):
                lines.append(f"{name}.seed[{s}].avg_loss={float(l)!r}")
        return "\n".join(lines) + "\n"


def paired_gap(summary: Summary, better: str, worse: str) -> tuple[float, float]:
    """Mean and standard error of ``loss(worse) - loss(better)`` across seeds."""
    d = summary.losses(worse) - summary.losses(better)
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    return float(d.mean()), se


# -- trace files ---------------------------------------------------------------

def emit_trace(result: EpisodeResult, path, limit: int | None = None) -> None:
    """Write the decision log as CSV, optionally only its first ``limit`` rows."""
    lg = result.log
    cut = slice(None, limit)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in zip(lg.t[cut].tolist(), lg.metric[cut].tolist(), lg.n_bar_before[cut].tolist(),
                       lg.action[cut].tolist(), lg.reward[cut].tolist()):
            w.writerow([row[0], format(row[1], ".17g"), *row[2:]])


def read_trace_log(path) -> DecisionLog:
    with Path(path).open(newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        cols = list(zip(*rows))
    if not cols:
        empty = np.zeros(0, dtype=np.int64)
        return DecisionLog(empty, np.zeros(0), empty, empty, empty)
    ints = lambda c: np.array([int(x) for x in c], dtype=np.int64)  # noqa: E731
    return DecisionLog(ints(cols[0]), np.array([float(x) for x in cols[1]]), ints(cols[2]),
                       ints(cols[3]), ints(cols[4]))
