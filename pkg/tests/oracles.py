"""Independent reference computations used by the tests.

Nothing here imports the package under test except for plain data types, so a
shared bug cannot make both sides agree.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def central_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``fn`` by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = fn(x)
        flat[k] = old - h
        down = fn(x)
        flat[k] = old
        out.reshape(-1)[k] = (up - down) / (2 * h)
    return out


def kl_by_summation(p, q) -> float:
    """Plain loop over atoms; math.inf when q misses mass of p."""
    total = 0.0
    for a, b in zip(p, q):
        if a == 0:
            continue
        if b == 0:
            return math.inf
        total += a * math.log(a / b)
    return total


def brute_force_err(mu, mu_prime, n, m, loss=None) -> float:
    """Expected target-population minus source-empirical risk for the uniform-ties
    ERM learner, by nested Python loops over samples and hypotheses."""
    n_x, n_y = len(mu), len(mu[0])
    if loss is None:
        loss = [[0.0 if a == b else 1.0 for b in range(n_y)] for a in range(n_y)]
    hyps = list(itertools.product(range(n_y), repeat=n_x))
    points = [(x, y) for x in range(n_x) for y in range(n_y)]

    def risk(h, table):
        return sum(table[x][y] * loss[h[x]][y] for x in range(n_x) for y in range(n_y))

    p_xp = [sum(row) for row in mu_prime]
    total = 0.0
    for sample in itertools.product(points, repeat=n):
        ps = 1.0
        for (x, y) in sample:
            ps *= mu[x][y]
        if ps == 0.0:
            continue
        emp = {h: sum(loss[h[x]][y] for (x, y) in sample) for h in hyps}
        best = min(emp.values())
        winners = [h for h in hyps if abs(emp[h] - best) <= 1e-12]
        # the learner ignores the target sample, but we still sum over it
        for tgt in itertools.product(range(n_x), repeat=m):
            pt = 1.0
            for x in tgt:
                pt *= p_xp[x]
            if pt == 0.0:
                continue
            for h in winners:
                total += ps * pt / len(winners) * (risk(h, mu_prime) - emp[h] / n)
    return total


def gaussian_tv_1d(shift: float, sigma: float) -> float:
    """TV between N(0, s^2) and N(shift, s^2) by numerical integration of |p - q| / 2."""
    grid = np.linspace(-12 * sigma - abs(shift), 12 * sigma + abs(shift), 200_001)
    p = np.exp(-0.5 * (grid / sigma) ** 2)
    q = np.exp(-0.5 * ((grid - shift) / sigma) ** 2)
    norm_c = sigma * math.sqrt(2 * math.pi)
    return 0.5 * float(np.trapezoid(np.abs(p - q), grid)) / norm_c


def mean_and_std(values) -> tuple[float, float]:
    """Population standard deviation, spelled out."""
    vals = list(values)
    mu = sum(vals) / len(vals)
    return mu, math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
