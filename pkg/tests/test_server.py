import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagefgl.errors import InvalidArgument, ParseError
from stagefgl.numcore import ParamStore, finite_diff_grad
from stagefgl.semantics import AnchorStats, GlobalAnchorPrototypes
from stagefgl.server import (MetaController, MetaReport, ServerState, aggregate_fedavg,
                             controller_forward, decode_server, encode_server, meta_update,
                             update_gap)


def stats(ids, means, counts):
    return AnchorStats(np.array(ids), np.array(means, dtype=float), np.array(counts))


def unit_rows(rng, M, d):
    X = rng.standard_normal((M, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def test_ema_fixed_point():
    H = unit_rows(np.random.default_rng(0), 5, 3)
    out = update_gap(GlobalAnchorPrototypes(H), [stats(range(5), H, [3] * 5)], 0.9)
    np.testing.assert_allclose(out.H, H, atol=1e-12)
    assert out.round == 1


def test_ema_without_momentum_is_normalized_aggregate():
    H = np.eye(2)
    out = update_gap(GlobalAnchorPrototypes(H), [stats([0], [[3.0, 4.0]], [2])], 0.0)
    np.testing.assert_allclose(out.H, [[0.6, 0.8], [0.0, 1.0]])


def test_ema_hand_computed_step():
    out = update_gap(GlobalAnchorPrototypes(np.array([[1.0, 0.0]])),
                     [stats([0], [[0.0, 1.0]], [1])], 0.9)
    # (0.9, 0.1) / sqrt(0.82)
    np.testing.assert_allclose(out.H[0], [0.993884, 0.110432], atol=1e-6)


def test_ema_count_weighted_pooling_and_silent_anchors():
    H = np.eye(3)
    ups = [stats([1], [[1.0, 0.0, 0.0]], [1]), stats([1], [[0.0, 0.0, 1.0]], [3])]
    out = update_gap(GlobalAnchorPrototypes(H), ups, 0.0)
    np.testing.assert_allclose(out.H[1], np.array([1, 0, 3]) / np.sqrt(10))
    np.testing.assert_array_equal(out.H[[0, 2]], H[[0, 2]])


def test_ema_preconditions():
    gap = GlobalAnchorPrototypes(np.eye(2))
    with pytest.raises(InvalidArgument):
        update_gap(gap, [], 0.9)
    with pytest.raises(InvalidArgument):
        update_gap(gap, [stats([0], [[1.0, 0]], [1])], 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 0.99))
def test_ema_row_norms_after_update_sequence(seed, m):
    rng = np.random.default_rng(seed)
    gap = GlobalAnchorPrototypes(unit_rows(rng, 6, 4))
    for _ in range(5):
        ups = []
        for _ in range(int(rng.integers(1, 4))):
            ids = np.sort(rng.choice(6, size=int(rng.integers(0, 7)), replace=False))
            ups.append(stats(ids, rng.standard_normal((len(ids), 4)).reshape(-1, 4),
                             rng.integers(1, 9, size=len(ids))))
        gap = update_gap(gap, ups, m)
        np.testing.assert_allclose(np.linalg.norm(gap.H, axis=1), 1.0, atol=1e-9)


def test_ema_contraction_toward_constant_target():
    rng = np.random.default_rng(4)
    gap = GlobalAnchorPrototypes(unit_rows(rng, 4, 3))
    target = rng.standard_normal((4, 3))
    goal = target / np.linalg.norm(target, axis=1, keepdims=True)
    prev = np.linalg.norm(gap.H - goal, axis=1)
    for _ in range(30):
        gap = update_gap(gap, [stats(range(4), target, [1] * 4)], 0.8)
        dist = np.linalg.norm(gap.H - goal, axis=1)
        assert np.all(dist <= prev + 1e-12)
        prev = dist


def test_controller_shape_and_initial_temperature():
    c = MetaController(seed=3, tau_min=0.1, tau_init=1.0)
    assert c.parameter_count == 65
    rng = np.random.default_rng(0)
    for D in rng.uniform(0, 1, size=(20, 2)):
        assert c.tau(D) == pytest.approx(1.0, abs=1e-12)


def test_controller_lower_bound_fuzz():
    rng = np.random.default_rng(1)
    c = MetaController()
    for _ in range(10 ** 4 // 50):
        c.set_flat(rng.standard_normal(65) * 5)
        for D in rng.uniform(0, 1, size=(50, 2)):
            assert c.tau(D) >= 0.1


@pytest.mark.parametrize("seed", range(3))
def test_controller_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    c = MetaController(seed)
    theta = rng.standard_normal(65) * 0.5
    c.set_flat(theta)
    D = rng.uniform(0, 0.7, size=2)
    g = c.tau_grad(D)

    def f(t):
        c.set_flat(t)
        return c.tau(D)

    num = finite_diff_grad(f, theta.copy())
    assert np.max(np.abs(num - g)) < 1e-5


def test_controller_forward_rejects_bad_sketch():
    with pytest.raises(InvalidArgument):
        controller_forward(MetaController(), [np.nan, 0.0])
    with pytest.raises(InvalidArgument):
        controller_forward(MetaController(), [-0.1, 0.0])


def test_meta_update_zero_gradient_noop():
    c = MetaController(2)
    out = meta_update(c, [MetaReport(np.array([0.2, 0.1]), 0.0, 0)], 0.01)
    np.testing.assert_array_equal(out.flat(), c.flat())


def test_meta_update_linear_in_step_size():
    c = MetaController(2)
    c.set_flat(np.random.default_rng(0).standard_normal(65) * 0.3)
    r = [MetaReport(np.array([0.3, 0.05]), 0.7, 0)]
    d1 = meta_update(c, r, 0.01).flat() - c.flat()
    d2 = meta_update(c, r, 0.02).flat() - c.flat()
    np.testing.assert_allclose(d2, 2 * d1, rtol=1e-9, atol=1e-15)


def test_meta_update_bias_only_controller():
    c = MetaController(0)
    theta = np.zeros(65)
    theta[-1] = 0.5
    c.set_flat(theta)
    out = meta_update(c, [MetaReport(np.array([0.4, 0.2]), 1.0, 0)], 0.1)
    # only the output bias has nonzero sensitivity: dtau/db2 = sigmoid(b2)
    expect = theta.copy()
    expect[-1] -= 0.1 / (1 + np.exp(-0.5))
    np.testing.assert_allclose(out.flat(), expect, atol=1e-15)


def test_meta_update_permutation_invariant():
    rng = np.random.default_rng(5)
    c = MetaController(1)
    c.set_flat(rng.standard_normal(65) * 0.4)
    reports = [MetaReport(rng.uniform(0, 0.6, 2), float(rng.normal()), k) for k in range(6)]
    base = meta_update(c, reports, 0.05).flat()
    for _ in range(5):
        order = rng.permutation(6)
        assert np.array_equal(meta_update(c, [reports[i] for i in order], 0.05).flat(), base)


def test_meta_update_clips_and_drops():
    c = MetaController(0)
    c.set_flat(np.random.default_rng(2).standard_normal(65) * 0.3)
    D = np.array([0.2, 0.2])
    big = meta_update(c, [MetaReport(D, 1e6, 0)], 0.01, g_max=10.0).flat()
    ten = meta_update(c, [MetaReport(D, 10.0, 0)], 0.01, g_max=10.0).flat()
    np.testing.assert_array_equal(big, ten)
    nan = meta_update(c, [MetaReport(D, float("nan"), 0), MetaReport(D, 0.0, 1)], 0.01)
    np.testing.assert_array_equal(nan.flat(), c.flat())


def test_meta_update_preconditions():
    with pytest.raises(InvalidArgument):
        meta_update(MetaController(), [], 0.01)
    with pytest.raises(InvalidArgument):
        meta_update(MetaController(), [MetaReport(np.zeros(2), 0.0)], 0.0)


def store(**entries):
    ps = ParamStore()
    for k, v in entries.items():
        ps.add(k, np.asarray(v, dtype=float))
    return ps


def test_fedavg_examples():
    a = store(w=[1.0, 2.0])
    np.testing.assert_array_equal(aggregate_fedavg([a, a.copy()], [0.5, 0.5]).value("w"), [1, 2])
    out = aggregate_fedavg([store(w=0.0), store(w=2.0)], [0.5, 0.5])
    assert out.value("w") == pytest.approx(1.0)
    out = aggregate_fedavg([store(w=1.0), store(w=2.0), store(w=3.0)], [0.5, 0.3, 0.2])
    assert out.value("w") == pytest.approx(1.7, abs=1e-12)


def test_fedavg_skips_client_local_and_rejects_shape_mismatch():
    out = aggregate_fedavg([store(w=1.0, p=[1, 2]), store(w=3.0, q=[0.0])], [0.5, 0.5])
    assert list(out) == ["w"]
    with pytest.raises(InvalidArgument, match="w"):
        aggregate_fedavg([store(w=[1.0]), store(w=[1.0, 2.0])], [0.5, 0.5])
    with pytest.raises(InvalidArgument):
        aggregate_fedavg([store(w=1.0), store(w=1.0)], [0.5, 0.6])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_fedavg_convex_envelope(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 6))
    vals = rng.standard_normal((K, 3, 2))
    w = rng.dirichlet(np.ones(K))
    out = aggregate_fedavg([store(m=v) for v in vals], w).value("m")
    assert np.all(out >= vals.min(axis=0) - 1e-12)
    assert np.all(out <= vals.max(axis=0) + 1e-12)


def test_server_checkpoint_roundtrip():
    rng = np.random.default_rng(6)
    c = MetaController(4)
    c.set_flat(rng.standard_normal(65))
    state = ServerState(GlobalAnchorPrototypes(unit_rows(rng, 8, 4), 3), c, 3, 0.85, 0.02, "abc",
                        store(**{"gnn.0.W": rng.standard_normal((2, 2))}))
    buf = encode_server(state)
    assert buf[:4] == b"SRV1"
    back = decode_server(buf)
    assert encode_server(back) == buf
    assert back.round == 3 and back.config_hash == "abc"
    np.testing.assert_array_equal(back.gap.H, state.gap.H)
    np.testing.assert_array_equal(back.controller.flat(), c.flat())
    with pytest.raises(ParseError) as err:
        decode_server(buf[:-3])
    assert err.value.offset > 0
