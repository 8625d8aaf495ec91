import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treelearn.averaging import average_state, uniform_average, weighted_average_g, weighted_average_w
from treelearn.comm import LocalCollective
from treelearn.local import run_threads
from treelearn.model import LossKind, pointwise
from treelearn.online import ModelState


def tree_sum_scalar(values):
    """Per-coordinate reference: recursive sum in heap order, (left + right) + self."""
    m = len(values)

    def node(r):
        acc = None
        for c in (2 * r + 1, 2 * r + 2):
            if c < m:
                v = node(c)
                acc = v if acc is None else acc + v
        return values[r] if acc is None else acc + values[r]

    return node(0)


def oracle(ws, gs):
    d = len(ws[0])
    w_bar, g_bar = [], []
    for j in range(d):
        den = tree_sum_scalar([float(g[j]) for g in gs])
        w_bar.append(tree_sum_scalar([float(g[j]) * float(w[j]) for w, g in zip(ws, gs)]) / den)
        g_bar.append(tree_sum_scalar([float(g[j]) ** 2 for g in gs]) / den)
    return np.array(w_bar), np.array(g_bar)


def _avg(sess, ws, gs):
    state = average_state(ModelState(ws[sess.rank], gs[sess.rank]), sess)
    return state.w, state.g2, sess.stats.vector_calls


def test_uniform_example():
    out = run_threads(2, _avg, [np.array([0.0, 2.0]), np.array([2.0, 0.0])], [np.ones(2), np.ones(2)])
    assert all(o[0].tolist() == [1.0, 1.0] for o in out)


def test_weighted_example():
    out = run_threads(2, _avg, [np.array([1.0, 0.0]), np.array([0.0, 4.0])],
                      [np.array([3.0, 1.0]), np.array([1.0, 1.0])])
    assert out[0][0].tolist() == [0.75, 2.0]


def test_g_examples():
    g = np.array([2.0, 7.0])
    out = run_threads(3, _avg, [np.zeros(2)] * 3, [g] * 3)
    assert out[0][1].tolist() == g.tolist()
    out = run_threads(2, _avg, [np.zeros(1)] * 2, [np.array([1.0]), np.array([3.0])])
    assert out[0][1].tolist() == [2.5]


def test_two_collectives_each():
    out = run_threads(3, _avg, [np.zeros(4)] * 3, [np.ones(4)] * 3)
    assert all(o[2] == 4 for o in out)


def test_single_node_identity():
    w, g = np.array([1.5, -2.0]), np.array([1.0, 9.0])
    c = LocalCollective()
    assert weighted_average_w(w, g, c).tolist() == w.tolist()
    assert weighted_average_g(g, c).tolist() == g.tolist()


def test_nonpositive_scaling_rejected():
    with pytest.raises(ValueError):
        weighted_average_w(np.zeros(2), np.array([1.0, 0.0]), LocalCollective())


@pytest.mark.parametrize("case", range(50))
def test_matches_scalar_oracle(case):
    rng = np.random.default_rng(case)
    m = int(rng.integers(1, 9))
    d = int(rng.integers(1, 1001))
    ws = [rng.normal(size=d) * 10 for _ in range(m)]
    gs = [1 + rng.exponential(5, size=d) * (rng.random(d) < 0.7) for _ in range(m)]
    w_want, g_want = oracle(ws, gs)
    out = run_threads(m, _avg, ws, gs)
    for w, g, _ in out:
        assert w.tobytes() == out[0][0].tobytes()
        np.testing.assert_allclose(w, w_want, rtol=1e-15, atol=0)
        np.testing.assert_allclose(g, g_want, rtol=1e-15, atol=0)
    lo_w, hi_w = np.min(ws, axis=0), np.max(ws, axis=0)
    lo_g, hi_g = np.min(gs, axis=0), np.max(gs, axis=0)
    w, g, _ = out[0]
    eps = 1e-12 * (np.abs(lo_w) + np.abs(hi_w) + 1)
    assert np.all(w >= lo_w - eps) and np.all(w <= hi_w + eps)
    assert np.all(g >= lo_g * (1 - 1e-15)) and np.all(g <= hi_g * (1 + 1e-15)) and np.all(g >= 1)


@settings(max_examples=25)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(0, 2**32 - 1), st.integers(-20, 20))
def test_average_is_a_convex_combination_and_scale_free(m, d, seed, k):
    rng = np.random.default_rng(seed)
    ws = [rng.normal(scale=5, size=d) for _ in range(m)]
    gs = [rng.uniform(1, 100, size=d) for _ in range(m)]
    w, g, _ = run_threads(m, _avg, ws, gs)[0]
    lo, hi = np.min(ws, axis=0), np.max(ws, axis=0)
    tol = 1e-12 * (np.abs(lo) + np.abs(hi))
    assert np.all(w >= lo - tol) and np.all(w <= hi + tol)
    # a common power-of-two scale on every G cancels exactly in the weighted mean of w
    w2, g2, _ = run_threads(m, _avg, ws, [np.ldexp(x, k) for x in gs])[0]
    assert w2.tobytes() == w.tobytes() and g2.tobytes() == np.ldexp(g, k).tobytes()


def jensen_gap(rng):
    m = int(rng.integers(1, 9))
    d = int(rng.integers(1, 20))
    ws = rng.normal(scale=3, size=(m, d))
    x = rng.normal(size=d) * (rng.random(d) < 0.6)
    y = float(rng.integers(0, 2))
    w_bar = ws.mean(axis=0)
    lhs = pointwise(np.array([w_bar @ x]), np.array([y]), LossKind.LOGISTIC)[0][0]
    rhs = pointwise(ws @ x, np.full(m, y), LossKind.LOGISTIC)[0].mean()
    return lhs, rhs


def test_jensen_for_uniform_average():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        lhs, rhs = jensen_gap(rng)
        assert lhs <= rhs + 1e-12


def _uni(sess, ws):
    return uniform_average(ws[sess.rank], sess)


def test_uniform_average_collective():
    ws = [np.array([1.0, 4.0]), np.array([3.0, 0.0]), np.array([2.0, 2.0]), np.array([2.0, 2.0])]
    out = run_threads(4, _uni, ws)
    assert out[0].tolist() == [2.0, 2.0]
