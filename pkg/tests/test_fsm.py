from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import brute_force_fsm_loglik
from zigzag_tree.engine import HybridState
from zigzag_tree.fsm import (
    FSMDataset,
    FSMTarget,
    read_fsm,
    simulate_fsm_data,
    transition,
    transition_derivatives,
    write_fsm,
)
from zigzag_tree.ism import DataError
from zigzag_tree.targets import FlatPrior, GammaPrior
from zigzag_tree.tau import RankedTopology, enumerate_topologies, simulate_coalescent


def random_state(model, rng):
    topo, t = simulate_coalescent(model.n, rng)
    t = np.maximum(t, 0.02)
    vels = rng.choice((-1.0, 1.0), size=model.n) * model.speeds
    return HybridState(topo, np.append(t, rng.uniform(0.3, 6.0)), vels)


@pytest.fixture
def data8():
    topo, t = simulate_coalescent(8, 11)
    return simulate_fsm_data(topo, t, 4.0, 10, 12)


def test_transition_kernel():
    assert transition(0, 0, 0.0, 2.0) == 1.0
    assert transition(0, 1, 0.0, 2.0) == 0.0
    assert transition(1, 0, 1e6, 2.0) == pytest.approx(0.5)
    for h in (0, 1):
        assert transition(h, 0, 0.7, 1.3) + transition(h, 1, 0.7, 1.3) == pytest.approx(1.0)
    t, th, eps = 0.4, 1.7, 1e-6
    for h, g in ((0, 0), (0, 1)):
        dt, dth = transition_derivatives(h, g, t, th)
        assert dt == pytest.approx((transition(h, g, t + eps, th) - transition(h, g, t - eps, th)) / (2 * eps), rel=1e-8)
        assert dth == pytest.approx((transition(h, g, t, th + eps) - transition(h, g, t, th - eps)) / (2 * eps), rel=1e-8)


def test_two_leaf_closed_form():
    topo = RankedTopology.from_pairs(2, [(1, 2)])
    for th, t in ((0.5, 1.0), (2.0, 0.3)):
        same = FSMTarget(FSMDataset([[0], [0]])).log_likelihood(topo, [t], th)
        diff = FSMTarget(FSMDataset([[0], [1]])).log_likelihood(topo, [t], th)
        assert same == pytest.approx(math.log((1 + math.exp(-2 * th * t)) / 4), rel=1e-13)
        assert diff == pytest.approx(math.log((1 - math.exp(-2 * th * t)) / 4), rel=1e-13)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_pruning_matches_enumeration(n):
    rng = np.random.default_rng(n)
    tops = list(enumerate_topologies(n))
    for _ in range(12):
        topo = tops[rng.integers(len(tops))]
        sites = int(rng.integers(1, 4))
        data = FSMDataset(rng.integers(0, 2, size=(n, sites)))
        m = FSMTarget(data)
        t = rng.exponential(0.5, size=n - 1)
        th = rng.uniform(0.1, 5.0)
        ref = brute_force_fsm_loglik(topo, t, th, data.types)
        assert m.log_likelihood(topo, t, th) == pytest.approx(ref, rel=1e-12)


def test_batch_likelihood_matches_rows(data8):
    m = FSMTarget(data8)
    rng = np.random.default_rng(0)
    topo, _ = simulate_coalescent(8, rng)
    t = rng.exponential(0.3, size=(5, 7))
    th = rng.uniform(0.5, 4.0, size=5)
    batch = m.site_log_likelihoods(topo, t, th).sum(-1)
    for b in range(5):
        assert batch[b] == pytest.approx(m.log_likelihood(topo, t[b], th[b]), rel=1e-13)


def test_gradient_and_rates_match_finite_differences(data8):
    m = FSMTarget(data8, prior=GammaPrior(2.0, 0.3))
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = random_state(m, rng)
        g = m.grad_log_density(s.mode, s.coords)
        for i in range(m.n):
            h = 1e-6 * max(1.0, s.coords[i])
            e = np.zeros(m.n)
            e[i] = h
            fd = (m.log_density(s.mode, s.coords + e) - m.log_density(s.mode, s.coords - e)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-6, abs=1e-7)
            assert m.flip_rate(s, i) == pytest.approx(max(-s.vels[i] * g[i], 0.0), rel=1e-12, abs=1e-12)


def test_no_data_reduces_to_prior_rates():
    # at theta = 0 the kernel is the identity, so a monomorphic site adds nothing
    m = FSMTarget(FSMDataset(np.zeros((4, 1))), prior=FlatPrior())
    topo, t = simulate_coalescent(4, 0)
    s = HybridState(topo, np.append(t, 0.0), m.speeds.copy())
    k = np.array([6.0, 3.0, 1.0])
    np.testing.assert_allclose(m.flip_rates(s)[:-1], k * m.speeds[:-1], rtol=1e-12)


def test_constant_columns_keep_theta_rate_finite():
    m = FSMTarget(FSMDataset(np.zeros((5, 3))), prior=FlatPrior())
    topo, t = simulate_coalescent(5, 1)
    s = HybridState(topo, np.append(t, 2.0), -m.speeds)
    assert np.all(np.isfinite(m.flip_rates(s)))
    assert np.all(np.isfinite(m.flip_bounds(s, m.localization(s)[0])))


def test_guards_and_localization():
    data = FSMDataset([[0, 1], [1, 1], [0, 0]])
    m = FSMTarget(data, c=4.0, K=10.0)
    diff_first = RankedTopology.from_pairs(3, [(1, 2), ([1, 2], 3)])
    same_first = RankedTopology.from_pairs(3, [(1, 3), ([1, 3], 2)])
    assert m.guards(diff_first)[0]
    assert m.guards(same_first)[0] == bool(np.any(data.types[0] != data.types[2]))
    s = HybridState(diff_first, np.array([1.0, 3.0, 2.0]), np.array([-1.0, 1.0, 1.0]))
    assert m.localization(s) == (pytest.approx(0.2), None)
    s = HybridState(diff_first, np.array([1.0, 3.0, 2.0]), np.ones(3))
    assert m.localization(s) == (10.0, None)


def test_bounds_converge_and_dominate(data8):
    m = FSMTarget(data8)
    rng = np.random.default_rng(2)
    for _ in range(10):
        s = random_state(m, rng)
        np.testing.assert_allclose(m.flip_bounds(s, 1e-10), m.flip_rates(s), rtol=1e-6, atol=1e-6)
    for _ in range(30):
        s = random_state(m, rng)
        T, _ = m.localization(s)
        b = m.flip_bounds(s, T)
        for u in np.linspace(0.0, T, 40, endpoint=False):
            r = m.flip_rates(s.moved(u))
            assert np.all(r <= b * (1 + 1e-12) + 1e-12)


def test_bound_cost_is_linear_in_sites_and_leaves():
    costs = {}
    for n, sites in ((6, 5), (12, 5), (6, 20)):
        data = FSMDataset(np.random.default_rng(0).integers(0, 2, size=(n, sites)))
        m = FSMTarget(data)
        s = m.initial_state(0)
        m.counters.clear()
        m.flip_bounds(s, 0.1)
        costs[(n, sites)] = m.counters["site_ops"]
    per_unit = {k: c / (k[0] * k[1]) for k, c in costs.items()}
    ref = per_unit[(6, 5)]
    assert all(0.5 <= u / ref <= 2.0 for u in per_unit.values())


def test_simulated_two_leaf_difference_rate():
    rng = np.random.default_rng(3)
    topo = RankedTopology.from_pairs(2, [(1, 2)])
    t1, th, sites = 0.4, 3.0, 4
    draws = [simulate_fsm_data(topo, [t1], th, sites, rng).types for _ in range(20000)]
    diff = np.mean([d[0, 0] != d[1, 0] for d in draws])
    p = (1 - math.exp(-th * 2 * t1 / sites)) / 2
    assert abs(diff - p) < 4 * math.sqrt(p * (1 - p) / 20000)


def test_simulated_data_edge_cases():
    rng = np.random.default_rng(4)
    topo, t = simulate_coalescent(6, rng)
    d = simulate_fsm_data(topo, t, 0.0, 7, rng)
    assert d.polymorphic_sites() == 0
    d = simulate_fsm_data(topo, t, 1e4, 4000, rng)
    assert d.types.mean() == pytest.approx(0.5, abs=0.02)
    d = simulate_fsm_data(simulate_coalescent(4, 0)[0], [0.1, 0.2, 0.3], 1.0, 2, rng)
    assert d.types.shape == (4, 2)


def test_io_round_trip(tmp_path, data8):
    write_fsm(data8, tmp_path / "f.txt")
    assert read_fsm(tmp_path / "f.txt") == data8
    (tmp_path / "bad.txt").write_text("n=2 sites=2 model=fsm alphabet=01\n01\n0x\n")
    with pytest.raises(DataError):
        read_fsm(tmp_path / "bad.txt")
    (tmp_path / "short.txt").write_text("n=3 sites=2 model=fsm\n01\n00\n")
    with pytest.raises(DataError):
        read_fsm(tmp_path / "short.txt")
    with pytest.raises(DataError):
        FSMDataset([[0, 2], [1, 1]])
