import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edge_offload import metric_map as mm


def naive_map(anchors, lam, h):
    num = den = 0.0
    for hk, rk in anchors:
        w = math.exp(-lam * (h - hk) ** 2)
        num += w * rk
        den += w
    return num / den


def test_entropy_examples():
    one_hot = np.zeros(1000)
    one_hot[3] = 1
    assert mm.entropy(one_hot) == 0.0
    assert mm.entropy(np.full(1000, 1e-3)) == pytest.approx(math.log(1000), abs=1e-12)
    expected = -(0.5 * math.log(0.5) + 2 * 0.25 * math.log(0.25))
    assert mm.entropy([0.5, 0.25, 0.25]) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(1.0397, abs=1e-4)


@pytest.mark.parametrize("bad", [[0.5, 0.4], [1.2, -0.2], []])
def test_entropy_rejects(bad):
    with pytest.raises(ValueError):
        mm.entropy(bad)


def test_fit_examples():
    assert mm.fit([(2.0, 1.0)], 1.0)(np.array([0.0, 3.0, 6.9])).tolist() == [1.0, 1.0, 1.0]
    assert mm.fit([(1.0, -1.0), (3.0, 1.0)], 0.7)(2.0) == pytest.approx(0.0, abs=1e-15)
    got = mm.fit([(1.0, 0.0), (2.0, 1.0)], 1.0)(1.0)
    assert got == pytest.approx(math.exp(-1) / (1 + math.exp(-1)), abs=1e-15)
    assert got == pytest.approx(0.2689, abs=1e-4)
    with pytest.raises(ValueError):
        mm.fit([], 1.0)
    with pytest.raises(ValueError):
        mm.fit([(1.0, 1.0)], 0.0)


def test_kernel_locality_limit():
    m = mm.fit([(0.5, 0.0), (2.0, 1.0), (4.0, -1.0)], 1e6)
    assert m(2.0) == pytest.approx(1.0, abs=1e-6)
    assert m(4.0) == pytest.approx(-1.0, abs=1e-6)
    # far from every anchor the shifted weights still normalise
    assert np.isfinite(m(6.9))


def test_constant_rewards():
    rng = np.random.default_rng(0)
    m = mm.fit(np.column_stack([rng.uniform(0, 6, 50), np.full(50, 0.3)]), 2.0)
    assert np.allclose(m(np.linspace(0, 6.9, 40)), 0.3, rtol=0, atol=1e-15)


def test_matches_naive_oracle():
    rng = np.random.default_rng(1)
    anchors = np.column_stack([rng.uniform(0, 6.9, 200), rng.integers(0, 2, 200)])
    lam = 0.8
    q = rng.uniform(0, 6.9, 30)
    got = mm.evaluate(mm.fit(anchors, lam), q)
    want = [naive_map(anchors, lam, h) for h in q]
    assert np.allclose(got, want, rtol=1e-12, atol=0)


@given(st.lists(st.tuples(st.floats(0, 6.9), st.sampled_from([-1.0, 0.0, 1.0])), min_size=1, max_size=30),
       st.floats(0.01, 20), st.floats(0, 6.9), st.floats(-3, 3))
def test_range_and_shift_equivariance(anchors, lam, h, shift):
    m = mm.fit(anchors, lam)
    r = np.array([a[1] for a in anchors])
    v = m(h)
    assert r.min() - 1e-12 <= v <= r.max() + 1e-12
    shifted = mm.fit([(a + shift, b) for a, b in anchors], lam)
    assert shifted(h + shift) == pytest.approx(v, abs=1e-9)


def test_grid_mode_close_to_exact():
    rng = np.random.default_rng(2)
    m = mm.fit(np.column_stack([rng.uniform(0, 6.9, 500), rng.integers(0, 2, 500)]), 0.8)
    q = rng.uniform(0, math.log(1000), 2000)
    assert np.max(np.abs(m(q, grid=True) - m(q))) < 1e-3


def test_median_heuristic():
    h = np.array([0.0, 1.0, 3.0])
    # pairwise distances 1, 3, 2 -> median 2
    assert mm.median_heuristic(h) == pytest.approx(1 / 8)
    assert mm.median_heuristic(np.ones(5)) == 1.0


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    m = mm.fit(np.column_stack([rng.uniform(0, 6.9, 40), rng.integers(0, 2, 40)]), 0.123456789)
    path = tmp_path / "map.csv"
    mm.save(m, path)
    back = mm.load(path)
    assert back.lam == m.lam
    assert np.array_equal(back.entropies, m.entropies)
    assert np.array_equal(back.rewards, m.rewards)
