"""Independent reference computations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.signal import lfilter


def brute_force_fsm_loglik(topo, t, theta, types) -> float:
    """Sum over every assignment of types to internal nodes, product over edges."""
    n = topo.n
    node = {1 << j: j for j in range(n)}
    height = np.zeros(2 * n - 1)
    edges = []
    clock = 0.0
    for i, (a, b) in enumerate(topo.mergers):
        clock += t[i]
        v = n + i
        node[a | b] = v
        height[v] = clock
        edges += [(v, node[a]), (v, node[b])]
    types = np.asarray(types)
    assign = np.array(list(itertools.product((0, 1), repeat=n - 1)))  # (A, n - 1)
    total = 0.0
    for site in range(types.shape[1]):
        ty = np.concatenate((np.broadcast_to(types[:, site], (len(assign), n)), assign), axis=1)
        p = np.full(len(assign), 0.5)
        for parent, child in edges:
            x = -theta * (height[parent] - height[child])
            same = 0.5 + 0.5 * math.exp(x)
            diff = -0.5 * math.expm1(x)
            p = p * np.where(ty[:, parent] == ty[:, child], same, diff)
        total += math.log(p.sum())
    return total


def ar1(n: int, rho: float, rng) -> np.ndarray:
    """Stationary Gaussian AR(1) chain with unit marginal variance."""
    eps = rng.standard_normal(n) * math.sqrt(1 - rho * rho)
    eps[0] = rng.standard_normal()
    return lfilter([1.0], [1.0, -rho], eps)
