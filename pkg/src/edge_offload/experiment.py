"""End-to-end scenario pipeline shared by the CLI and the acceptance suite.

Per scenario: one synthetic population split into train/test halves and a
metric map fitted on the training half. Per seed: a training sequence (the
replay buffer, which also calibrates Baseline and MDP), a DQN trained on it,
and a fresh test sequence on which every policy is scored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dqn, metric_map as mm, policies as pol, sim_eval as se, trace_gen as tg
from .config import ScenarioConfig

log = logging.getLogger(__name__)

TRAIN, TEST = 0, 1


@dataclass
class Artifacts:
    cfg: ScenarioConfig
    population: tg.SyntheticPopulation
    train_pop: tg.SyntheticPopulation
    test_pop: tg.SyntheticPopulation
    mapping: mm.MetricMap
    # directory holding ``train_trace_<seed>.csv`` files to use instead of regenerating
    trace_dir: Path | None = None
    _train_traces: dict = field(default_factory=dict, repr=False)

    @property
    def params(self):
        return self.cfg.bucket_params()

    def trace(self, seed: int, which: int, length: int | None = None) -> tg.Trace:
        cfg = self.cfg
        if length is None:
            length = cfg.experiment.train_length if which == TRAIN else cfg.experiment.test_length
        pop = self.train_pop if which == TRAIN else self.test_pop
        return tg.generate_trace(pop, cfg.arrival_config(), cfg.selection_config(), length,
                                 self.mapping, seed=[seed, which])

    def train_trace(self, seed: int) -> tg.Trace:
        if seed not in self._train_traces:
            path = train_trace_path(self.trace_dir, seed) if self.trace_dir is not None else None
            trace = tg.load_trace(path) if path is not None and path.exists() else self.trace(seed, TRAIN)
            self._train_traces = {seed: trace}
        return self._train_traces[seed]


def train_trace_path(directory, seed: int) -> Path:
    return Path(directory) / f"train_trace_{seed}.csv"


def prepare(cfg: ScenarioConfig, population: tg.SyntheticPopulation | None = None) -> Artifacts:
    p = cfg.population
    if population is None:
        population = tg.build_population(p.size, p.frac_a, p.frac_b, p.frac_c, cfg.entropy_model(),
                                         seed=[p.seed, 0], n_classes=p.n_classes)
    train_pop, test_pop = population.split(p.train_fraction, seed=[p.seed, 1])
    lam = p.kernel_lambda or mm.median_heuristic(train_pop.entropy, np.random.default_rng([p.seed, 2]))
    mapping = mm.fit(train_pop.anchors(), lam, n_classes=p.n_classes)
    return Artifacts(cfg, population, train_pop, test_pop, mapping)


@dataclass(frozen=True)
class Calibration:
    """Policies calibrated on one training sequence."""

    baseline: pol.ThresholdPolicy
    mdp: pol.MdpPolicy
    arrival_rate: float


def calibrate(train: tg.Trace, cfg: ScenarioConfig) -> Calibration:
    params = cfg.bucket_params()
    thr = pol.quantile_threshold(train.metric, pol.trace_budget_fraction(train, params))
    rate = len(train) / pol.trace_span(train)
    bins = pol.discretize(train.metric, train.reward, cfg.population.mdp_bins)
    mdp = pol.solve_mdp(bins, rate, params, cfg.experiment.gamma)
    return Calibration(pol.baseline(thr), mdp, rate)


def train_dqn(art: Artifacts, seed: int, progress=None) -> tuple[dqn.QNetwork, list[float]]:
    cfg = art.cfg
    return dqn.train(art.train_trace(seed), art.params, cfg.trainer_config(seed), progress=progress)


class SeedPolicies:
    """Picklable ``(seed, test_trace) -> policy`` factory for :func:`sim_eval.compare`."""

    def __init__(self, art: Artifacts, kind: str, nets=None):
        self.art, self.kind, self.nets = art, kind, nets

    def __call__(self, seed: int, trace: tg.Trace):
        if self.kind == "lower_bound":
            return pol.lower_bound_for(trace, self.art.params)
        if self.kind == "dqn":
            net = self.nets[seed] if isinstance(self.nets, dict) else self.nets
            return pol.DqnPolicy(net)
        cal = calibrate(self.art.train_trace(seed), self.art.cfg)
        return getattr(cal, self.kind)


class TestTraces:
    def __init__(self, art: Artifacts):
        self.art = art

    def __call__(self, seed: int) -> tg.Trace:
        return self.art.trace(seed, TEST)


def policy_set(art: Artifacts, nets=None) -> dict:
    out = {name: SeedPolicies(art, name) for name in ("lower_bound", "baseline", "mdp")}
    if nets is not None:
        out["dqn"] = SeedPolicies(art, "dqn", nets)
    return out


def evaluate(art: Artifacts, seeds, nets=None, workers: int = 1) -> se.Summary:
    """Score lower bound, Baseline, MDP (and DQN when ``nets`` is given) per seed.

    ``nets`` is one network shared by all seeds or a ``{seed: network}`` map.
    """
    scenario = se.Scenario(TestTraces(art), art.params, art.cfg.experiment.gamma)
    return se.compare(policy_set(art, nets), scenario, seeds, workers=workers)


def train_and_evaluate(art: Artifacts, seeds, progress=None) -> tuple[se.Summary, dict]:
    """Train one DQN per seed on that seed's training sequence, then evaluate."""
    nets = {}
    for s in seeds:
        nets[s], _ = train_dqn(art, s)
        log.info("trained DQN for seed %s", s)
        if progress is not None:
            progress(s)
    return evaluate(art, seeds, nets), nets
