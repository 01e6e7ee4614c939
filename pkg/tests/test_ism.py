from __future__ import annotations

import math

import numpy as np
import pytest

from zigzag_tree.engine import HybridState, simulate
from zigzag_tree.ism import (
    DataError,
    ISMDataset,
    ISMTarget,
    assign_mutations,
    consistent_tree,
    read_ism,
    simulate_ism_data,
    watterson,
    write_ism,
)
from zigzag_tree.targets import GammaPrior
from zigzag_tree.tau import RankedTopology, build_edge_table, simulate_coalescent, swap


def fd_gradient(model, mode, x, h=1e-6):
    g = np.empty(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h * max(1.0, abs(x[i]))
        g[i] = (model.log_density(mode, x + e) - model.log_density(mode, x - e)) / (2 * e[i])
    return g


def random_interior_state(model, rng):
    """Consistent state with every coordinate bounded away from zero."""
    topo, t = model.initial_tree(rng)
    t = np.maximum(t, 0.02)
    theta = rng.uniform(0.5, 8.0)
    vels = rng.choice((-1.0, 1.0), size=model.n) * model.speeds
    return HybridState(topo, np.append(t, theta), vels)


@pytest.fixture
def data10():
    topo, t = simulate_coalescent(10, 4)
    return simulate_ism_data(topo, t, 6.0, 5)


def test_figure_dataset_mutation_placement(caterpillar4):
    data = ISMDataset(((0.7,), (0.7,), (), (0.2,)))
    asg = assign_mutations(caterpillar4, data)
    tab = build_edge_table(caterpillar4, [1.0, 1.0, 1.0])
    assert asg.consistent
    assert asg.counts[tab.child.index(0b0011)] == 1
    assert asg.counts[tab.child.index(0b1000)] == 1
    assert asg.counts.sum() == 2
    assert asg.first_merger == 0


def test_carrier_not_a_clade_is_inconsistent(caterpillar4):
    data = ISMDataset(((0.5,), (), (0.5,), ()))
    assert not assign_mutations(caterpillar4, data).consistent
    m = ISMTarget(data)
    assert m.log_density(caterpillar4, np.array([0.5, 0.5, 0.5, 1.0])) == -math.inf


def test_dataset_validation():
    with pytest.raises(DataError):
        ISMDataset(((0.1, 0.2), (0.2, 0.3), (0.3,)))  # carriers {1,2} and {2,3} cross
    with pytest.raises(DataError):
        ISMDataset(((0.1,), (0.1,)))  # carried by every leaf
    with pytest.raises(DataError):
        ISMDataset(((1.5,), ()))
    with pytest.raises(DataError):
        ISMDataset(((),))


def test_log_density_values():
    m = ISMTarget(ISMDataset(((), ())))
    topo = RankedTopology.from_pairs(2, [(1, 2)])
    assert m.log_density(topo, np.array([1.0, 1.0])) == pytest.approx(-2.0)
    # hand evaluation for the figure data under a Gamma(2, 1) prior
    data = ISMDataset(((0.7,), (0.7,), (), (0.2,)))
    m = ISMTarget(data, prior=GammaPrior(2.0, 1.0))
    topo = RankedTopology.from_pairs(4, [(1, 2), ([1, 2], 3), ([1, 2, 3], 4)])
    t, th = np.array([0.3, 0.4, 0.5]), 2.0
    l12, l4 = 0.4, 1.2
    expect = math.log(th * l12 / 2) + math.log(th * l4 / 2)
    expect -= 4 * (3 + th) / 2 * 0.3 + 3 * (2 + th) / 2 * 0.4 + 2 * (1 + th) / 2 * 0.5
    expect += math.log(th) - th
    assert m.log_density(topo, np.append(t, th)) == pytest.approx(expect, rel=1e-13)


def test_zero_length_mutated_edge_is_impossible(caterpillar4):
    m = ISMTarget(ISMDataset(((0.7,), (0.7,), (), ())))
    assert m.log_density(caterpillar4, np.array([0.3, 0.0, 0.5, 1.0])) == -math.inf


def test_gradient_and_rates_match_finite_differences(data10):
    m = ISMTarget(data10, prior=GammaPrior(2.0, 0.5))
    rng = np.random.default_rng(0)
    for _ in range(30):
        s = random_interior_state(m, rng)
        fd = fd_gradient(m, s.mode, s.coords)
        g = m.grad_log_density(s.mode, s.coords)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-6)
        for i in range(m.n):
            assert m.flip_rate(s, i) == pytest.approx(max(-s.vels[i] * g[i], 0.0), rel=1e-12, abs=1e-12)


def test_log_density_continuous_across_swap():
    data = ISMDataset(((0.1,), (0.1,), (0.3, 0.4), (0.3,)))
    m = ISMTarget(data)
    e = RankedTopology.from_pairs(4, [(3, 4), (1, 2), ([1, 2], [3, 4])])
    assert not e.nested(2)
    x = np.array([0.3, 0.0, 0.6, 2.0])
    assert m.log_density(e, x) == pytest.approx(m.log_density(swap(e, 2), x), abs=1e-9)


def test_localization_respects_guard_divisor():
    data = ISMDataset(((0.1,), (0.2,), ()))
    m = ISMTarget(data, c=4.0, K=10.0)
    topo = RankedTopology.from_pairs(3, [(1, 2), ([1, 2], 3)])
    # theta is guarded (mutations present); it may shrink by at most 1/5
    s = HybridState(topo, np.array([5.0, 5.0, 2.0]), np.array([1.0, 1.0, -1.0]))
    T, hit = m.localization(s)
    assert hit is None
    assert T == pytest.approx(2.0 / 5.0)
    # t_1 is guarded: the first merger's children carry mutations
    s = HybridState(topo, np.array([1.0, 5.0, 2.0]), np.array([-1.0, 1.0, 1.0]))
    assert m.localization(s) == (pytest.approx(0.2), None)
    # unguarded t_2 can be hit exactly
    s = HybridState(topo, np.array([5.0, 0.5, 2.0]), np.array([1.0, -1.0, 1.0]))
    assert m.localization(s) == (pytest.approx(0.5), 1)
    s = HybridState(topo, np.array([5.0, 0.5, 2.0]), np.ones(3))
    assert m.localization(s) == (10.0, None)


def test_bounds_without_mutations_match_closed_form():
    n = 5
    m = ISMTarget(ISMDataset(((),) * n))
    rng = np.random.default_rng(1)
    topo, t = simulate_coalescent(n, rng)
    th, T = 1.7, 0.3
    v = m.speeds.copy()
    s = HybridState(topo, np.append(t, th), v)
    b = m.flip_bounds(s, T)
    for i in range(1, n):
        k = n + 1 - i
        assert b[i - 1] == pytest.approx(v[i - 1] * k * (n + th + v[-1] * T - i) / 2, rel=1e-13)


def test_bounds_converge_to_rates_as_window_shrinks(data10):
    m = ISMTarget(data10)
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = random_interior_state(m, rng)
        np.testing.assert_allclose(m.flip_bounds(s, 1e-9), m.flip_rates(s), rtol=1e-6, atol=1e-6)


def test_bounds_dominate_on_grid(data10):
    m = ISMTarget(data10, prior=GammaPrior(2.0, 0.5))
    rng = np.random.default_rng(4)
    for _ in range(50):
        s = random_interior_state(m, rng)
        T, _ = m.localization(s)
        b = m.flip_bounds(s, T)
        for u in np.linspace(0.0, T, 60, endpoint=False):
            r = m.flip_rates(s.moved(u))
            assert np.all(r <= b * (1 + 1e-12) + 1e-12)


def test_simulated_data_properties():
    rng = np.random.default_rng(7)
    topo, t = simulate_coalescent(6, rng)
    assert simulate_ism_data(topo, t, 0.0, rng).n_mutations == 0
    total_len = build_edge_table(topo, t).lengths.sum()
    counts = [simulate_ism_data(topo, t, 3.0, rng).n_mutations for _ in range(4000)]
    mean = 3.0 * total_len / 2
    assert abs(np.mean(counts) - mean) < 4 * math.sqrt(mean / len(counts))
    for _ in range(50):
        e, s = simulate_coalescent(8, rng)
        data = simulate_ism_data(e, s, 5.0, rng)
        assert assign_mutations(e, data).consistent


def test_large_regime_dataset_size():
    # 550 leaves at theta = 5.5 gives a few tens of mutations
    rng = np.random.default_rng(550)
    topo, t = simulate_coalescent(550, rng)
    data = simulate_ism_data(topo, t, 5.5, rng)
    assert 10 <= data.n_mutations <= 100
    assert watterson(data) == pytest.approx(data.n_mutations / sum(1 / k for k in range(1, 550)))


def test_initial_state_is_consistent(data10):
    m = ISMTarget(data10)
    for seed in range(5):
        s = m.initial_state(seed)
        assert np.isfinite(m.log_density(s.mode, s.coords))
    for seed in range(20):
        topo, t = consistent_tree(data10, np.random.default_rng(seed))
        assert m.is_consistent(topo) and np.all(t > 0)


def test_io_round_trip(tmp_path, data10):
    path = tmp_path / "d.txt"
    write_ism(data10, path)
    assert read_ism(path) == data10
    (tmp_path / "bad.txt").write_text("n=3 model=ism\n0.1\n")
    with pytest.raises(DataError):
        read_ism(tmp_path / "bad.txt")
    (tmp_path / "cross.txt").write_text("n=3 model=ism\n0.1 0.2\n0.2 0.3\n0.3\n")
    with pytest.raises(DataError):
        read_ism(tmp_path / "cross.txt")


def test_short_run_never_leaves_consistent_topologies(data10):
    m = ISMTarget(data10)
    tr = simulate(m, m.initial_state(1), 100.0, 1)
    assert all(m.is_consistent(e) for e in tr.modes)
    assert tr.kind_counts().get("BoundaryCross", 0) > 0
