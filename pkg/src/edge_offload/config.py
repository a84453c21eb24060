"""Scenario configuration files.

INI-style sections mirror the library modules. Parsing is strict: unknown
sections or keys are errors. A comma-separated value on a scalar field
declares a sweep; :func:`expand` yields one scenario per Cartesian point.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import dqn, trace_gen as tg
from .token_bucket import BucketParams, from_rational


class ConfigError(ValueError):
    pass


@dataclass
class BucketSection:
    r_num: int = 1
    r_den: int = 10
    b_num: int = 4
    b_den: int = 1


@dataclass
class ArrivalSection:
    I1: int = 1
    I2: int = 1
    tprob1: float = 1.0
    tprob2: float = 1.0


@dataclass
class SelectionSection:
    sp: float = 1.0
    rprob: float = 1.0


@dataclass
class PopulationSection:
    size: int = 50000
    frac_a: float = 0.7
    frac_b: float = 0.0447
    frac_c: float = 0.2553
    a_median: float = 0.6
    a_sigma: float = 0.7
    b_median: float = 2.4
    b_sigma: float = 0.4
    c_median: float = 2.3
    c_sigma: float = 0.45
    n_classes: int = 1000
    train_fraction: float = 2 / 3
    # 0 selects the median heuristic
    kernel_lambda: float = 0.0
    mdp_bins: int = 100
    seed: int = 0


@dataclass
class TrainerSection:
    segments_per_sync: int = 2 ** 12
    sync_count: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    T: int = 97
    hidden_layers: int = 5
    hidden_units: int = 64
    gap_clip: int = dqn.GAP_CLIP


@dataclass
class ExperimentSection:
    gamma: float = 0.99
    train_length: int = 10 ** 6
    test_length: int = 10 ** 6
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1


_SECTIONS = {
    "bucket": BucketSection,
    "arrival": ArrivalSection,
    "selection": SelectionSection,
    "population": PopulationSection,
    "trainer": TrainerSection,
    "experiment": ExperimentSection,
}

PRESETS = {
    "desk": {"experiment.train_length": 10 ** 6, "experiment.test_length": 10 ** 6,
             "trainer.segments_per_sync": 2 ** 12, "trainer.sync_count": 200},
    "paper": {"experiment.train_length": 10 ** 8, "experiment.test_length": 10 ** 7,
              "trainer.segments_per_sync": 2 ** 14, "trainer.sync_count": 4000},
}


@dataclass
class ScenarioConfig:
    bucket: BucketSection = field(default_factory=BucketSection)
    arrival: ArrivalSection = field(default_factory=ArrivalSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    population: PopulationSection = field(default_factory=PopulationSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    # -- derived component configs --
    def bucket_params(self) -> BucketParams:
        b = self.bucket
        return from_rational(b.r_num, b.r_den, b.b_num, b.b_den)

    def arrival_config(self) -> tg.ArrivalConfig:
        a = self.arrival
        return tg.ArrivalConfig(a.I1, a.I2, a.tprob1, a.tprob2)

    def selection_config(self) -> tg.SelectionConfig:
        return tg.SelectionConfig(self.selection.sp, self.selection.rprob)

    def entropy_model(self) -> tg.EntropyModel:
        p = self.population
        return tg.EntropyModel((p.a_median, p.a_sigma), (p.b_median, p.b_sigma), (p.c_median, p.c_sigma))

    def trainer_config(self, seed: int) -> dqn.TrainerConfig:
        t = self.trainer
        return dqn.TrainerConfig(
            gamma=self.experiment.gamma, segments_per_sync=t.segments_per_sync,
            sync_count=t.sync_count, batch_size=t.batch_size, learning_rate=t.learning_rate,
            T=t.T, hidden=(t.hidden_units,) * t.hidden_layers, gap_clip=t.gap_clip, seed=seed)

    def validate(self) -> "ScenarioConfig":
        try:
            self.bucket_params()
            self.arrival_config()
            self.selection_config()
            self.trainer_config(0)
            tg.build_population(1, self.population.frac_a, self.population.frac_b,
                                self.population.frac_c)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not self.experiment.seeds:
            raise ConfigError("experiment.seeds must list at least one seed")
        if self.experiment.train_length < 2 or self.experiment.test_length < 1:
            raise ConfigError("trace lengths too short")
        return self

    def with_overrides(self, overrides: dict) -> "ScenarioConfig":
        cfg = dataclasses.replace(self, **{s: dataclasses.replace(getattr(self, s)) for s in _SECTIONS})
        for dotted, value in overrides.items():
            sec, key = dotted.split(".", 1)
            setattr(getattr(cfg, sec), key, value)
        return cfg


def _coerce(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is list:
            return [int(x) for x in raw.replace(",", " ").split()]
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from e
    raise ConfigError(f"{where}: unsupported type")


def _field_type(f) -> type:
    t = f.type if isinstance(f.type, type) else {"int": int, "float": float, "list": list}[f.type]
    return t


def parse_grid(text: str) -> tuple[ScenarioConfig, dict]:
    """Parse config text into a base scenario plus ``{dotted_key: [values]}`` sweeps."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = ScenarioConfig()
    sweeps = {}
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        known = {f.name: f for f in fields(_SECTIONS[sec])}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}")
            typ = _field_type(known[key])
            where = f"{sec}.{key}"
            parts = [p for p in raw.split(",") if p.strip()]
            if typ is not list and len(parts) > 1:
                values = [_coerce(p, typ, where) for p in parts]
                sweeps[where] = values
                setattr(getattr(cfg, sec), key, values[0])
            else:
                setattr(getattr(cfg, sec), key, _coerce(raw, typ, where))
    return cfg, sweeps


def parse(text: str) -> ScenarioConfig:
    cfg, sweeps = parse_grid(text)
    if sweeps:
        raise ConfigError(f"sweep values given for {sorted(sweeps)}; use expand()")
    return cfg.validate()


def load(path) -> tuple[ScenarioConfig, dict]:
    return parse_grid(Path(path).read_text())


def expand(cfg: ScenarioConfig, sweeps: dict) -> list[tuple[dict, ScenarioConfig]]:
    """One validated scenario per point of the sweep grid, in row-major order."""
    keys = sorted(sweeps)
    out = []
    for combo in itertools.product(*(sweeps[k] for k in keys)):
        point = dict(zip(keys, combo))
        out.append((point, cfg.with_overrides(point).validate()))
    return out


def _fmt(v) -> str:
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(cfg: ScenarioConfig) -> str:
    buf = io.StringIO()
    for sec, cls in _SECTIONS.items():
        buf.write(f"[{sec}]\n")
        obj = getattr(cfg, sec)
        for f in fields(cls):
            buf.write(f"{f.name} = {_fmt(getattr(obj, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()
