"""Synthetic image populations and arrival/selection sequence generators.

A population stands in for a labelled image set: each sample carries a weak
classifier output entropy and the 0/1 top-k losses of both classifiers.
Traces zip a two-state Markov-modulated arrival process with a correlated
sampler over the metric-ranked population.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import metric_map as mm

_CHUNK = 4096
_SOJOURN_BATCH = 1024

# the three outcome categories: both right, both wrong, only strong right
CATEGORY_LOSSES = {"a": (0, 0), "b": (1, 1), "c": (1, 0)}


@dataclass(frozen=True)
class ArrivalConfig:
    I1: int = 1
    I2: int = 1
    tprob1: float = 1.0
    tprob2: float = 1.0

    def __post_init__(self):
        if self.I1 < 1 or self.I2 < 1:
            raise ValueError("inter-arrival times must be >= 1 slot")
        for p in (self.tprob1, self.tprob2):
            if not 0 < p <= 1:
                raise ValueError(f"transition probability must be in (0, 1], got {p}")

    @property
    def state1_fraction(self) -> float:
        """Long-run fraction of arrivals emitted in state 1."""
        return self.tprob2 / (self.tprob1 + self.tprob2)

    @property
    def mean_gap(self) -> float:
        pi1 = self.state1_fraction
        return pi1 * self.I1 + (1 - pi1) * self.I2


@dataclass(frozen=True)
class SelectionConfig:
    sp: float = 1.0
    rprob: float = 1.0

    def __post_init__(self):
        if not 0 <= self.sp <= 1:
            raise ValueError(f"spread must be in [0, 1], got {self.sp}")
        if not 0 < self.rprob <= 1:
            raise ValueError(f"reset probability must be in (0, 1], got {self.rprob}")


@dataclass(frozen=True)
class EntropyModel:
    """Per-category log-normal entropies given as (median, log-space sigma)."""

    a: tuple[float, float] = (0.6, 0.7)
    b: tuple[float, float] = (2.4, 0.4)
    c: tuple[float, float] = (2.3, 0.45)

    def draw(self, category: str, n: int, rng: np.random.Generator, h_max: float) -> np.ndarray:
        median, sigma = getattr(self, category)
        return np.clip(median * np.exp(sigma * rng.standard_normal(n)), 0.0, h_max)


@dataclass(frozen=True)
class PopulationSample:
    entropy: float
    weak_loss: int
    strong_loss: int
    reward: int
    rank: int


@dataclass(frozen=True)
class TraceEntry:
    gap: int
    metric: float
    reward: int
    weak_loss: int


@dataclass
class SyntheticPopulation:
    """Column store of samples.

    Once ranked (``metric`` set), samples are sorted ascending by metric,
    ties broken by entropy and then original position.
    """

    entropy: np.ndarray
    weak_loss: np.ndarray
    strong_loss: np.ndarray
    metric: np.ndarray | None = None
    _ranked: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.entropy = np.asarray(self.entropy, dtype=float)
        self.weak_loss = np.asarray(self.weak_loss, dtype=np.int64)
        self.strong_loss = np.asarray(self.strong_loss, dtype=np.int64)

    def __len__(self) -> int:
        return self.entropy.size

    @property
    def reward(self) -> np.ndarray:
        return self.weak_loss - self.strong_loss

    def fractions(self) -> dict[str, float]:
        n = len(self)
        return {k: float(np.sum((self.weak_loss == w) & (self.strong_loss == s))) / n
                for k, (w, s) in CATEGORY_LOSSES.items()}

    def sample(self, i: int) -> PopulationSample:
        return PopulationSample(float(self.entropy[i]), int(self.weak_loss[i]),
                                int(self.strong_loss[i]), int(self.reward[i]), i)

    def anchors(self) -> np.ndarray:
        return np.column_stack([self.entropy, self.reward.astype(float)])

    def take(self, idx) -> "SyntheticPopulation":
        idx = np.asarray(idx)
        return SyntheticPopulation(self.entropy[idx], self.weak_loss[idx], self.strong_loss[idx],
                                   None if self.metric is None else self.metric[idx])

    def ranked(self, mapping: mm.MetricMap, grid: bool = True) -> "SyntheticPopulation":
        """Copy sorted ascending by offloading metric under ``mapping``."""
        key = (id(mapping), grid)
        if key not in self._ranked:
            metric = np.asarray(mm.evaluate(mapping, self.entropy, grid=grid))
            order = np.lexsort((np.arange(len(self)), self.entropy, metric))
            ranked = self.take(order)
            ranked.metric = metric[order]
            self._ranked[key] = (mapping, ranked)
        return self._ranked[key][1]

    def split(self, train_fraction: float, seed) -> tuple["SyntheticPopulation", "SyntheticPopulation"]:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        return self.take(np.sort(perm[:cut])), self.take(np.sort(perm[cut:]))


def build_population(size: int, frac_a: float = 0.7, frac_b: float = 0.0447,
                     frac_c: float = 0.2553, entropy_model: EntropyModel | None = None,
                     seed=0, n_classes: int = mm.DEFAULT_CLASSES) -> SyntheticPopulation:
    """Draw ``size`` samples with exactly ``round(frac * size)`` per category.

    Category ``c`` absorbs any rounding remainder.
    """
    if size < 1:
        raise ValueError("population size must be >= 1")
    fracs = (frac_a, frac_b, frac_c)
    if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"category fractions must be non-negative and sum to 1, got {fracs}")
    model = entropy_model or EntropyModel()
    n_a, n_b = int(round(frac_a * size)), int(round(frac_b * size))
    n_c = size - n_a - n_b
    if n_c < 0:
        raise ValueError("category fractions round to more than the population size")
    rng = np.random.default_rng(seed)
    h_max = math.log(n_classes)
    parts = []
    for cat, n in zip("abc", (n_a, n_b, n_c)):
        w, s = CATEGORY_LOSSES[cat]
        parts.append((model.draw(cat, n, rng, h_max), np.full(n, w), np.full(n, s)))
    ent, wl, sl = (np.concatenate(cols) for cols in zip(*parts))
    perm = rng.permutation(size)
    return SyntheticPopulation(ent[perm], wl[perm], sl[perm])


def atom_population(atoms, size: int, seed=0) -> SyntheticPopulation:
    """Population whose entropies take a few discrete values.

    ``atoms`` is a list of ``(entropy, probability_mass, reward_probability)``;
    rewarded samples are category ``c``, the rest category ``a``.
    """
    rng = np.random.default_rng(seed)
    masses = np.array([a[1] for a in atoms], dtype=float)
    counts = np.floor(masses / masses.sum() * size).astype(int)
    counts[-1] += size - counts.sum()
    ent, wl = [], []
    for (h, _, p), n in zip(atoms, counts):
        k = int(round(p * n))
        ent.append(np.full(n, float(h)))
        wl.append(np.r_[np.ones(k, dtype=int), np.zeros(n - k, dtype=int)])
    ent, wl = np.concatenate(ent), np.concatenate(wl)
    perm = rng.permutation(ent.size)
    return SyntheticPopulation(ent[perm], wl[perm], np.zeros(ent.size, dtype=int))


# -- arrival process ---------------------------------------------------------

def _sojourns(cfg: ArrivalConfig, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Alternating (gap, arrival-count) runs; the initial state is stationary."""
    state = 0 if rng.random() < cfg.state1_fraction else 1
    gaps = np.array([cfg.I1, cfg.I2])
    probs = np.array([cfg.tprob1, cfg.tprob2])
    while True:
        states = (state + np.arange(_SOJOURN_BATCH)) % 2
        yield gaps[states], rng.geometric(probs[states])
        state = (state + _SOJOURN_BATCH) % 2


def arrival_gaps(cfg: ArrivalConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    out, total = [], 0
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    for g, lengths in _sojourns(cfg, rng):
        out.append(np.repeat(g, lengths))
        total += out[-1].size
        if total >= n:
            break
    return np.concatenate(out)[:n].astype(np.int64)


def arrival_stream(cfg: ArrivalConfig, seed) -> Iterator[int]:
    """Endless inter-arrival gaps; prefix-identical to :func:`arrival_gaps`."""
    rng = np.random.default_rng(seed)
    for g, lengths in _sojourns(cfg, rng):
        for gap in np.repeat(g, lengths):
            yield int(gap)


# -- selection process -------------------------------------------------------

def _window(size: int, sp: float) -> int:
    return max(1, min(size, int(round(sp * size))))


def _selection_chunk(size: int, cfg: SelectionConfig, rng: np.random.Generator, start: int,
                     first: bool) -> tuple[np.ndarray, int]:
    w = _window(size, cfg.sp)
    resets = rng.random(_CHUNK) < cfg.rprob
    if first:
        resets[0] = True
    fresh = rng.integers(0, size - w + 1, _CHUNK)
    offsets = rng.integers(0, w, _CHUNK)
    pos = np.where(resets, np.arange(_CHUNK), -1)
    np.maximum.accumulate(pos, out=pos)
    starts = np.where(pos >= 0, fresh[np.maximum(pos, 0)], start)
    return starts + offsets, int(starts[-1])


def selection_ranks(size: int, cfg: SelectionConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Ranks drawn by the correlated sampler.

    The window of ``round(sp * size)`` consecutive ranks starts at a
    location that is redrawn uniformly (clipped to fit) with probability
    ``rprob`` before each draw; the draw is uniform within the window.
    """
    if size < 1:
        raise ValueError("empty population")
    out, start = [], 0
    for k in range(-(-n // _CHUNK)):
        ranks, start = _selection_chunk(size, cfg, rng, start, first=k == 0)
        out.append(ranks)
    return np.concatenate(out)[:n] if out else np.zeros(0, dtype=np.int64)


def selection_stream(pop: SyntheticPopulation, cfg: SelectionConfig, seed) -> Iterator[PopulationSample]:
    rng = np.random.default_rng(seed)
    start, first = 0, True
    while True:
        ranks, start = _selection_chunk(len(pop), cfg, rng, start, first)
        first = False
        for r in ranks:
            yield pop.sample(int(r))


# -- traces ------------------------------------------------------------------

@dataclass
class Trace:
    """Column store of arrivals."""

    gap: np.ndarray
    metric: np.ndarray
    reward: np.ndarray
    weak_loss: np.ndarray

    def __post_init__(self):
        self.gap = np.asarray(self.gap, dtype=np.int64)
        self.metric = np.asarray(self.metric, dtype=float)
        self.reward = np.asarray(self.reward, dtype=np.int64)
        self.weak_loss = np.asarray(self.weak_loss, dtype=np.int64)

    def __len__(self) -> int:
        return self.gap.size

    def __getitem__(self, i: int) -> TraceEntry:
        return TraceEntry(int(self.gap[i]), float(self.metric[i]), int(self.reward[i]),
                          int(self.weak_loss[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def strong_loss(self) -> np.ndarray:
        return self.weak_loss - self.reward

    @classmethod
    def from_entries(cls, entries) -> "Trace":
        entries = list(entries)
        return cls([e.gap for e in entries], [e.metric for e in entries],
                   [e.reward for e in entries], [e.weak_loss for e in entries])

    def equals(self, other: "Trace") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("gap", "metric", "reward", "weak_loss"))


def generate_trace(pop: SyntheticPopulation, acfg: ArrivalConfig, scfg: SelectionConfig,
                   length: int, mapping: mm.MetricMap, seed, grid: bool = True) -> Trace:
    ranked = pop.ranked(mapping, grid=grid)
    arr_seed, sel_seed = np.random.SeedSequence(seed).spawn(2)
    gaps = arrival_gaps(acfg, length, np.random.default_rng(arr_seed))
    ranks = selection_ranks(len(ranked), scfg, length, np.random.default_rng(sel_seed))
    return Trace(gaps, ranked.metric[ranks], ranked.reward[ranks], ranked.weak_loss[ranks])


_TRACE_COLUMNS = ["gap", "metric", "reward", "weak_loss"]


def save_trace(trace: Trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_TRACE_COLUMNS)
        for g, m, r, wl in zip(trace.gap.tolist(), trace.metric.tolist(),
                               trace.reward.tolist(), trace.weak_loss.tolist()):
            w.writerow([g, format(m, ".17g"), r, wl])


def load_trace(path) -> Trace:
    with Path(path).open(newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header != _TRACE_COLUMNS:
            raise ValueError(f"{path}: expected columns {_TRACE_COLUMNS}, got {header}")
        cols = list(zip(*rows))
    if not cols:
        return Trace([], [], [], [])
    return Trace([int(x) for x in cols[0]], [float(x) for x in cols[1]],
                 [int(x) for x in cols[2]], [int(x) for x in cols[3]])


def save_population(pop: SyntheticPopulation, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entropy", "weak_loss", "strong_loss"])
        for h, wl, sl in zip(pop.entropy.tolist(), pop.weak_loss.tolist(), pop.strong_loss.tolist()):
            w.writerow([format(h, ".17g"), wl, sl])


def load_population(path) -> SyntheticPopulation:
    with Path(path).open(newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        cols = list(zip(*rows))
    return SyntheticPopulation([float(x) for x in cols[0]], [int(x) for x in cols[1]],
                               [int(x) for x in cols[2]])
