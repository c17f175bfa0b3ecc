import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emocircuit.errors import ShapeError
from emocircuit.gwr import GwrNetwork, GwrParams, export_csv, export_dot, habituate

from oracles import brute_bmu


def _net(weights, params=None):
    net = GwrNetwork(len(weights[0]), params or GwrParams())
    for w in weights:
        net.add_neuron(np.asarray(w, dtype=float))
    return net


def _random_net(rng, n, dim, k=2):
    params = GwrParams(alphas=tuple(rng.dirichlet(np.ones(k + 1))))
    net = GwrNetwork(dim, params)
    for _ in range(n):
        net.add_neuron(rng.normal(size=dim), rng.normal(size=(k, dim)))
    net.global_contexts = rng.normal(size=(k, dim))
    return net


# --- find_bmu


def test_single_neuron_is_bmu():
    net = _net([[3.0, 4.0]])
    assert net.find_bmu(np.array([-10.0, 2.0]))[0] == 0


def test_bmu_hand_case():
    net = _net([[0.0], [10.0]], GwrParams(alphas=(1.0,)))
    b, d, s = net.find_bmu(np.array([1.0]))
    assert (b, d, s) == (0, 1.0, 1)
    assert net.distances(np.array([1.0]))[1] == 81.0


def test_bmu_ties_go_to_lowest_index():
    net = _net([[1.0], [1.0], [1.0]])
    assert net.find_bmu(np.array([0.0]))[:1] == (0,)
    assert net.find_bmu(np.array([0.0]))[2] == 1


def test_bmu_matches_brute_force(rng):
    for _ in range(300):
        n = int(rng.integers(1, 51))
        dim = int(rng.integers(1, 6))
        net = _random_net(rng, n, dim)
        x = rng.normal(size=dim)
        want, want_d = brute_bmu(x, net.weights, net.contexts, net.global_contexts, net.params.alphas)
        b, d, _ = net.find_bmu(x)
        assert b == want
        assert abs(d - want_d) < 1e-9


def test_bmu_dimension_mismatch():
    with pytest.raises(ShapeError):
        _net([[0.0, 0.0]]).find_bmu(np.zeros(3))


# --- global context


def _two_neuron_with_prev(beta):
    net = _net([[1.0, 2.0], [5.0, -1.0]], GwrParams(beta=beta))
    w_prev = np.array([1.0, 2.0])
    c_prev = np.array([[0.5, 0.25], [-2.0, 4.0]])
    net._prev = (w_prev, c_prev)
    return net, w_prev, c_prev


def test_context_zero_before_first_step():
    net = _net([[1.0], [2.0]])
    np.testing.assert_array_equal(net.update_global_context(), 0.0)


def test_context_beta_one():
    net, w, _ = _two_neuron_with_prev(1.0)
    c = net.update_global_context()
    np.testing.assert_array_equal(c, [w, w])


def test_context_beta_zero():
    net, w, c_prev = _two_neuron_with_prev(0.0)
    c = net.update_global_context()
    np.testing.assert_array_equal(c[0], w)  # c_0 is the weight itself
    np.testing.assert_array_equal(c[1], c_prev[0])


def test_context_hand_evaluation():
    net, w, c_prev = _two_neuron_with_prev(0.7)
    c = net.update_global_context()
    # C_1 = 0.7*w + 0.3*w ; C_2 = 0.7*w + 0.3*c_1
    np.testing.assert_allclose(c[0], [1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(c[1], [0.7 * 1.0 + 0.3 * 0.5, 0.7 * 2.0 + 0.3 * 0.25], atol=1e-12)


def test_context_follows_previous_winner():
    net = _net([[0.0, 0.0], [4.0, 4.0]])
    net.step(np.array([4.0, 4.1]))
    w1 = net.weights[1].copy()
    net.step(np.array([0.0, 0.1]))
    np.testing.assert_array_equal(net.global_contexts[0], w1)


# --- habituation


def test_habituation_formula():
    assert habituate(1.0, 0.3, 1.05) == pytest.approx(0.7, abs=1e-15)


def test_habituation_zero_tau():
    assert habituate(0.42, 0.0, 1.05) == 0.42


def test_habituation_decreases_to_fixed_point():
    h, prev = 1.0, 1.0
    for _ in range(200):
        h = float(habituate(h, 0.3, 1.05))
        assert 0 < h <= prev
        prev = h
    assert h == pytest.approx(1 - 1 / 1.05, abs=1e-9)


@given(st.floats(1e-6, 1.0), st.floats(0.0, 1.0), st.floats(0.5, 2.0))
def test_habituation_stays_in_range(h, tau, kappa):
    out = float(habituate(h, tau, kappa))
    assert 0 < out <= 1


# --- step


def test_exact_match_adapts_only():
    net = _net([[0.0, 0.0], [3.0, 3.0]], GwrParams(insertion_threshold=0.9))
    o = net.step(np.array([3.0, 3.0]))
    # contexts are zero on the first step, so the distance is zero as well
    assert o.activity == 1.0
    assert o.event == "adapted"
    assert net.n_neurons == 2


def test_insertion_after_habituation():
    p = GwrParams(insertion_threshold=1.0 + 1e-9, firing_threshold=0.5)
    net = _net([[0.0], [10.0]], p)
    net.habituation[:] = 0.2  # forced below h_T by prior wins
    o = net.step(np.array([3.0]))
    assert o.event == "inserted"
    assert net.n_neurons == 3
    np.testing.assert_allclose(net.weights[o.inserted], [1.5])
    assert (0, 2) in net.edges and (1, 2) in net.edges and (0, 1) not in net.edges


def test_fresh_neurons_do_not_insert():
    net = _net([[0.0], [10.0]], GwrParams(insertion_threshold=1.0 + 1e-9))
    assert net.step(np.array([3.0])).event == "adapted"


def test_max_edge_age_zero_keeps_only_refreshed_edge():
    net = _net([[0.0], [1.0], [2.0], [3.0]], GwrParams(max_edge_age=0))
    net.steps = 10
    net.edges = {(0, 1): 2, (1, 2): 1, (2, 3): 5, (0, 3): 1}
    o = net.step(np.array([0.1]))
    assert o.event == "adapted"
    assert net.edges == {(0, 1): 0}
    assert net.n_neurons == 2
    net.check_well_formed()


def test_single_repeated_point_keeps_two_neurons():
    # contexts stay in the hull of {0, x}, so d <= (a1 + a2)|x|^2 = 0.5 and exp(-0.5) > a_T
    x = np.full(4, 0.5)
    net = GwrNetwork.from_samples([x] * 50)
    rep = net.train(np.tile(x, (50, 1)), epochs=1)
    assert rep["neurons"] == [2]


def _clusters(rng, n_per=40):
    centres = rng.normal(size=(7, 4)) * 6
    labels = np.repeat(np.arange(7), n_per)
    return centres, labels, centres[labels] + rng.normal(size=(len(labels), 4)) * 0.3


def _purity(net, data, labels):
    owner = np.array([np.argmin(np.sum((net.weights - x) ** 2, axis=1)) for x in data])
    return np.mean(net.neuron_concepts()[owner] == labels)


def test_clustered_iid_data_grows_and_is_pure(rng):
    # shuffled i.i.d. samples carry no temporal order, so contexts are switched off
    _, labels, data = _clusters(rng)
    p = GwrParams(insertion_threshold=0.5, max_edge_age=50, alphas=(1.0,))
    net = GwrNetwork.from_samples(data[rng.permutation(len(data))], p)
    rep = net.train(data, epochs=5, seed=3, annotations=[(0.5, 0.0, int(c)) for c in labels])
    assert rep["neurons"][-1] >= 7
    assert _purity(net, data, labels) >= 0.95
    q = rep["quantization_error"]
    for a, b in zip(q, q[1:]):
        assert b <= a * 1.05


def test_clustered_sequence_with_contexts(rng):
    centres, _, _ = _clusters(rng)
    labels = np.tile(np.repeat(np.arange(7), 5), 8)
    data = centres[labels] + rng.normal(size=(len(labels), 4)) * 0.3
    net = GwrNetwork.from_samples(data, GwrParams(insertion_threshold=0.1, max_edge_age=50))
    rep = net.train(data, epochs=5, shuffle=False, annotations=[(0.5, 0.0, int(c)) for c in labels])
    assert rep["neurons"][-1] >= 7
    assert _purity(net, data, labels) >= 0.95


def test_annotation_running_mean():
    net = _net([[0.0], [5.0]])
    net.step(np.array([0.0]), (0.2, 0.5, 3))
    net.step(np.array([0.0]), (0.4, -0.5, 3))
    np.testing.assert_allclose(net.ann_av[0], [0.3, 0.0])
    assert net.ann_tally[0, 3] == 2


def test_learn_false_leaves_state():
    net = _net([[0.0], [5.0]])
    before = export_csv(net)
    net.step(np.array([1.0]), learn=False)
    assert export_csv(net) == before and net.steps == 0


def test_rule_conformance_instrumented(rng):
    p = GwrParams(insertion_threshold=0.3, max_edge_age=20)
    data = np.concatenate([rng.normal(size=(500, 3)) + c for c in rng.normal(size=(6, 3)) * 4])
    net = GwrNetwork.from_samples(data[:2], p)
    for x in data[rng.permutation(len(data))]:
        n0 = net.n_neurons
        o = net.step(x)
        should = o.activity < p.insertion_threshold and o.bmu_habituation < p.firing_threshold
        assert (o.event == "inserted") == should
        assert net.n_neurons == n0 + should - len(o.removed_neurons)
        net.check_well_formed()


def test_determinism_and_state_roundtrip(rng):
    data = rng.normal(size=(200, 3)) * 3

    def run():
        net = GwrNetwork.from_samples(data, GwrParams(insertion_threshold=0.4))
        net.train(data, epochs=2, seed=5)
        return net

    a, b = run(), run()
    assert export_csv(a) == export_csv(b)
    c = GwrNetwork.from_state(a.state_dict())
    assert export_csv(c) == export_csv(a)
    x = rng.normal(size=3)
    assert a.step(x).bmu == c.step(x).bmu
    assert export_csv(a) == export_csv(c)


def test_exports():
    net = _net([[0.0, 1.0], [2.0, 3.0]])
    net.step(np.array([0.0, 1.0]), (0.5, 0.25, 3))
    csv = export_csv(net).splitlines()
    assert csv[0] == "id,habituation,age,n_annotations,arousal,valence,concept,w0,w1"
    assert csv[1].split(",")[6] == "Happiness"
    dot = export_dot(net)
    assert dot.startswith("graph gwr {") and "n0 -- n1 [age=0];" in dot


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9), st.integers(0, 30))
def test_well_formed_under_random_streams(seed, a_t, max_age):
    r = np.random.default_rng(seed)
    data = r.normal(size=(120, 2)) * r.uniform(0.5, 5)
    net = GwrNetwork.from_samples(data, GwrParams(insertion_threshold=a_t, max_edge_age=max_age))
    for x in data:
        net.step(x)
        net.check_well_formed()
    assert math.isfinite(float(net.weights.sum()))
