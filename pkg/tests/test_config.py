import pytest
from hypothesis import given, strategies as st

from edge_offload import config


def test_defaults_round_trip():
    cfg = config.ScenarioConfig()
    assert config.parse(config.dumps(cfg)) == cfg


@given(st.floats(0.01, 1.0), st.floats(0.001, 1.0), st.integers(1, 9), st.floats(0.0001, 0.999),
       st.floats(0.5, 0.9999), st.lists(st.integers(0, 1000), min_size=1, max_size=5))
def test_round_trip_property(sp, rprob, I2, tprob, gamma, seeds):
    cfg = config.ScenarioConfig().with_overrides({
        "selection.sp": sp, "selection.rprob": rprob, "arrival.I2": I2, "arrival.tprob1": tprob,
        "experiment.gamma": gamma, "experiment.seeds": seeds})
    assert config.parse(config.dumps(cfg)) == cfg


def test_partial_file_keeps_defaults():
    cfg = config.parse("[bucket]\nr_num = 1\nr_den = 4\n[experiment]\nseeds = 3, 4\n")
    p = cfg.bucket_params()
    assert (p.N, p.P, p.M) == (1, 4, 16)
    assert cfg.experiment.seeds == [3, 4]
    assert cfg.selection == config.SelectionSection()


@pytest.mark.parametrize("text, match", [
    ("[bucket]\nr_nm = 1\n", "unknown key"),
    ("[buckets]\nr_num = 1\n", "unknown section"),
    ("[arrival]\nI1 = one\n", "cannot parse"),
    ("[bucket]\nr_num = 3\nr_den = 2\n", "rate"),
    ("[selection]\nsp = 2\n", "spread"),
    ("[experiment]\ngamma = 1.0\n", "gamma"),
    ("no section header\n", "malformed"),
])
def test_strict_parsing(text, match):
    with pytest.raises(config.ConfigError, match=match):
        config.parse(text)


def test_sweep_expansion():
    base, sweeps = config.parse_grid("[selection]\nsp = 0.1\nrprob = 0.001, 0.01, 0.1, 1\n"
                                     "[arrival]\ntprob1 = 0.001, 0.01\n")
    assert sweeps == {"selection.rprob": [0.001, 0.01, 0.1, 1.0], "arrival.tprob1": [0.001, 0.01]}
    points = config.expand(base, sweeps)
    assert len(points) == 8
    assert points[0][0] == {"arrival.tprob1": 0.001, "selection.rprob": 0.001}
    assert points[-1][1].selection.rprob == 1.0 and points[-1][1].arrival.tprob1 == 0.01
    # overrides never leak into the base scenario
    assert base.selection.rprob == 0.001
    with pytest.raises(config.ConfigError, match="sweep"):
        config.parse("[selection]\nrprob = 0.1, 0.2\n")


def test_presets_and_derived_configs():
    cfg = config.ScenarioConfig().with_overrides(config.PRESETS["paper"])
    assert cfg.experiment.train_length == 10 ** 8
    assert cfg.trainer.segments_per_sync == 2 ** 14 and cfg.trainer.sync_count == 4000
    t = cfg.trainer_config(5)
    assert t.seed == 5 and t.hidden == (64,) * 5 and t.T == 97
    assert cfg.arrival_config().mean_gap == 1.0
