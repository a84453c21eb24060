import numpy as np
import pytest
from hypothesis import given, strategies as st

from edge_offload import dqn, trace_gen as tg
from edge_offload.token_bucket import BucketParams, from_rational


def constant_net(T, params, out):
    """Network whose output is exactly ``out`` for every input."""
    width = 2 * (T - 1)
    size = len(out)
    return dqn.QNetwork([np.zeros((width, 4)), np.zeros((4, size))],
                        [np.zeros(4), np.asarray(out, dtype=float)], T, params)


def small_trace(n=400, seed=0):
    rng = np.random.default_rng(seed)
    return tg.Trace(rng.integers(1, 4, n), rng.uniform(0, 1, n), rng.integers(0, 2, n), np.ones(n))


def test_layout_size_default_bucket():
    lay = dqn.OutputLayout(from_rational(1, 10, 4, 1))
    assert len(lay) == 2 * 40 - 10 - 1 + 2 == 71


@given(st.integers(1, 8), st.integers(0, 8), st.integers(0, 16))
def test_layout_bijection(N, dp, dm):
    P = N + dp
    M = P + dm
    lay = dqn.OutputLayout(BucketParams(N, P, M))
    pairs = [(n, 0) for n in range(N, M + 1)] + [(n, 1) for n in range(P, M + 1)]
    assert len(lay) == len(pairs) == 2 * M - P - N + 2
    seen = {lay.index(n, a) for n, a in pairs}
    assert seen == set(range(len(lay)))
    for i in range(len(lay)):
        assert lay.index(*lay.pair(i)) == i


def test_layout_rejects_infeasible_pairs():
    lay = dqn.OutputLayout(BucketParams(1, 2, 4))
    for n, a in [(1, 1), (0, 0), (5, 0)]:
        with pytest.raises(KeyError):
            lay.index(n, a)


def test_q_target_hand_table():
    params = BucketParams(1, 2, 4)
    lay = dqn.OutputLayout(params)
    T = 4
    # target outputs per (n_bar, a)
    q = {(1, 0): 0.5, (2, 0): 1.0, (3, 0): 2.0, (4, 0): 3.0, (2, 1): 1.5, (3, 1): 1.0, (4, 1): 4.0}
    out = np.zeros(len(lay))
    for k, v in q.items():
        out[lay.index(*k)] = v
    target = constant_net(T, params, out)
    win = dqn.HistoryWindow(np.ones(T - 1, dtype=int), np.zeros(T - 1))
    got = dqn.q_target_update(win, win, 1.0, 1, target, params, 0.9)
    # best next value: V(1)=0.5, V(2)=1.5, V(3)=2.0, V(4)=4.0
    # n' = min(4, n - 2a + 1)
    expected = {
        (1, 0): 0.9 * 1.5,        # n'=2
        (2, 0): 0.9 * 2.0,        # n'=3
        (3, 0): 0.9 * 4.0,        # n'=4
        (4, 0): 0.9 * 4.0,        # n'=min(4, 5)
        (2, 1): 1.0 + 0.9 * 0.5,  # n'=1
        (3, 1): 1.0 + 0.9 * 1.5,  # n'=2
        (4, 1): 1.0 + 0.9 * 2.0,  # n'=3
    }
    for k, v in expected.items():
        assert got[lay.index(*k)] == v, k
    assert np.allclose(list(expected.values()),
                       [1.35, 1.8, 3.6, 3.6, 1.45, 2.35, 2.8], atol=1e-15)


def test_q_target_gamma_zero():
    params = BucketParams(1, 10, 40)
    lay = dqn.OutputLayout(params)
    net = dqn.init_network(5, params, (8,), seed=1)
    win = dqn.HistoryWindow.empty(5)
    got = dqn.q_target_update(win, win, 0.75, 3, net, params, 0.0)
    assert np.array_equal(got, 0.75 * lay.action)


def test_q_targets_batch_matches_single():
    params = BucketParams(1, 3, 7)
    net = dqn.init_network(6, params, (16, 16), seed=2)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (5, 10))
    R = rng.integers(0, 2, 5)
    I = rng.integers(1, 5, 5)
    batch = dqn.q_targets(x, R, I, net, params, 0.95)
    for i in range(5):
        win = dqn.HistoryWindow(x[i, :5] * 255, x[i, 5:])
        single = dqn.q_target_update(win, win, R[i], I[i], net, params, 0.95)
        assert np.allclose(batch[i], single, rtol=0, atol=1e-12)


def numeric_grads(net, x, y, eps=1e-5):
    out = []
    for t in net.tensors():
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = t[i]
            t[i] = old + eps
            lp, _ = dqn.mse_loss(net, x, y)
            t[i] = old - eps
            lm, _ = dqn.mse_loss(net, x, y)
            t[i] = old
            g[i] = (lp - lm) / (2 * eps)
        out.append(g)
    return out


def gradient_check(trial):
    rng = np.random.default_rng(trial)
    params = BucketParams(1, 2, 4)
    net = dqn.init_network(4, params, (16, 16, 16), seed=trial)
    for b in net.biases:
        b[:] = rng.uniform(-0.1, 0.1, b.shape)
    x = rng.uniform(0, 1, (8, 6))
    y = rng.normal(size=(8, 7))
    _, analytic = dqn.mse_loss(net, x, y)
    numeric = numeric_grads(net, x, y)
    return max(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
               for a, n in zip(analytic, numeric))


@pytest.mark.parametrize("trial", range(3))
def test_gradient_check(trial):
    assert gradient_check(trial) < 1e-4


def test_zero_padding_at_trace_start():
    tr = small_trace(20)
    x = dqn.trace_windows(tr, 6)
    assert x.shape == (20, 10)
    # first arrival: four leading pad entries, then the arrival itself
    assert np.all(x[0, :4] == 0) and np.all(x[0, 5:9] == 0)
    assert x[0, 4] == tr.gap[0] / 255 and x[0, 9] == tr.metric[0]
    buf = dqn.ReplayBuffer(tr, 6)
    seg = buf.segments(np.array([1]))
    assert np.array_equal(seg.x[0], x[0])
    assert np.array_equal(seg.x_next[0], x[1])
    assert seg.reward[0] == tr.reward[0] and seg.next_gap[0] == tr.gap[1]


def test_segments_overlap():
    tr = small_trace(50)
    seg = dqn.ReplayBuffer(tr, 8).segments(np.arange(1, 50))
    T1 = 7
    # X and X' share T-2 entries in both halves
    assert np.array_equal(seg.x[:, 1:T1], seg.x_next[:, :T1 - 1])
    assert np.array_equal(seg.x[:, T1 + 1:], seg.x_next[:, T1:-1])


def test_gap_clipping():
    x = dqn.encode([1, 255, 1000], [0.3, -0.2, 0.9])
    assert np.array_equal(x, [1 / 255, 1.0, 1.0, 0.3, -0.2, 0.9])


def test_forward_trace_matches_windows():
    params = BucketParams(1, 10, 40)
    net = dqn.init_network(9, params, (16, 16), seed=4)
    tr = small_trace(300)
    assert np.allclose(dqn.forward_trace(net, tr), dqn.forward(net, dqn.trace_windows(tr, 9)),
                       rtol=0, atol=1e-12)


def test_forward_validates_window():
    net = dqn.init_network(5, BucketParams(1, 2, 4), (8,))
    with pytest.raises(ValueError):
        dqn.forward(net, dqn.HistoryWindow.empty(6))


def test_greedy_ties_and_feasibility():
    params = BucketParams(1, 2, 4)
    lay = dqn.OutputLayout(params)
    q = np.zeros(len(lay))
    assert not dqn.greedy(q, lay, 3)          # tie keeps the image local
    q[lay.index(3, 1)] = 1.0
    assert dqn.greedy(q, lay, 3)
    q[lay.index(1, 0)] = -5.0
    assert not dqn.greedy(q, lay, 1)          # infeasible


def test_sync_zero_returns_initial_weights():
    params = BucketParams(1, 2, 4)
    cfg = dqn.TrainerConfig(sync_count=0, T=5, hidden=(8,), seed=3)
    net, losses = dqn.train(small_trace(), params, cfg)
    ref = dqn.init_network(5, params, (8,), seed=np.random.default_rng(3).integers(2 ** 63))
    assert losses == []
    assert all(np.array_equal(a, b) for a, b in zip(net.tensors(), ref.tensors()))


def test_zero_learning_rate_keeps_weights():
    params = BucketParams(1, 2, 4)
    cfg = dqn.TrainerConfig(sync_count=2, segments_per_sync=64, learning_rate=0.0, T=5, hidden=(8,))
    init = dqn.train(small_trace(), params, dqn.TrainerConfig(sync_count=0, T=5, hidden=(8,)))[0]
    net, losses = dqn.train(small_trace(), params, cfg)
    assert len(losses) == 2
    assert all(np.array_equal(a, b) for a, b in zip(net.tensors(), init.tensors()))


def test_training_is_deterministic_and_reduces_loss():
    params = BucketParams(1, 2, 4)
    cfg = dqn.TrainerConfig(sync_count=6, segments_per_sync=512, T=5, hidden=(16, 16), seed=7, gamma=0.5)
    a, la = dqn.train(small_trace(2000), params, cfg)
    b, lb = dqn.train(small_trace(2000), params, cfg)
    assert la == lb
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors(), b.tensors()))
    assert la[-1] < la[0]


def test_divergence_is_reported():
    params = BucketParams(1, 2, 4)
    tr = small_trace()
    tr.metric[:] = np.nan
    cfg = dqn.TrainerConfig(sync_count=1, segments_per_sync=64, T=5, hidden=(8,))
    with pytest.raises(dqn.DivergenceError):
        dqn.train(tr, params, cfg)


def test_checkpoint_round_trip(tmp_path):
    params = from_rational(1, 10, 4, 1)
    net = dqn.init_network(97, params, seed=5)
    path = tmp_path / "net.ckpt"
    dqn.save_checkpoint(net, path)
    back = dqn.load_checkpoint(path)
    probe = np.random.default_rng(0).uniform(0, 1, (3, 192))
    assert np.array_equal(dqn.forward(net, probe), dqn.forward(back, probe))
    assert back.T == 97 and back.params == params


def test_checkpoint_validation(tmp_path):
    net = dqn.init_network(5, BucketParams(1, 2, 4), (8,))
    path = tmp_path / "net.ckpt"
    dqn.save_checkpoint(net, path)
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        dqn.load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "wrong.ckpt").write_bytes(raw.replace(b"M=4", b"M=5", 1))
    with pytest.raises(ValueError):
        dqn.load_checkpoint(tmp_path / "wrong.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        dqn.load_checkpoint(tmp_path / "junk.ckpt")


def test_network_shape_validation():
    params = BucketParams(1, 2, 4)
    with pytest.raises(ValueError):
        dqn.QNetwork([np.zeros((6, 3)), np.zeros((3, 6))], [np.zeros(3), np.zeros(6)], 4, params)
