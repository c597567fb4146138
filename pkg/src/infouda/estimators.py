"""Divergence estimators from samples and exact small-support transport."""
from __future__ import annotations

import collections
import functools
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, add, as_tensor, gaussian_log_density, logsumexp, mean, mul, no_grad, reshape, sub
from .distributions import Categorical, kl

MAX_SIMPLEX_SUPPORT = 64
MAX_VERTEX_SUPPORT = 4


@dataclass(frozen=True)
class SampleBatch:
    """A batch of points, optionally with a per-point Gaussian and/or weights.

    ``means``/``stds`` describe P_{T_k|X_k} for representation batches.
    ``weights`` turns the batch into a weighted (e.g. exact categorical) measure.
    """

    points: np.ndarray
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError(f"SampleBatch needs a nonempty (n, d) array, got shape {pts.shape}")
        object.__setattr__(self, "points", pts)
        if (self.means is None) != (self.stds is None):
            raise ValueError("means and stds must be given together")
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            s = np.asarray(self.stds, dtype=np.float64)
            if m.shape != pts.shape or s.shape != pts.shape:
                raise ValueError(f"per-point Gaussians must match points shape {pts.shape}")
            if np.any(s <= 0):
                raise ValueError("per-point stddevs must be positive")
            object.__setattr__(self, "means", m)
            object.__setattr__(self, "stds", s)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (pts.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("weights must be a probability vector over the batch")
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def gaussian(cls, means, stds) -> "SampleBatch":
        means = np.asarray(means, dtype=np.float64)
        return cls(points=means, means=means, stds=np.broadcast_to(stds, means.shape))

    @classmethod
    def from_categorical(cls, p: Categorical) -> "SampleBatch":
        return cls(points=np.arange(p.size, dtype=np.float64), weights=p.probs)


# ----------------------------------------------------------------------------
# mixture-based mini-batch KL


def mixture_log_density(t: Tensor, means, stds) -> Tensor:
    """log (1/b) sum_k N(t; means_k, stds_k) for every row of ``t``."""
    t, means, stds = as_tensor(t), as_tensor(means), as_tensor(stds)
    b, d = means.shape
    pair = gaussian_log_density(reshape(t, (t.shape[0], 1, d)), reshape(means, (1, b, d)),
                                reshape(stds, (1, b, d)))
    return sub(logsumexp(pair, axis=1), math.log(b))


def mixture_kl_terms(mu_s, sd_s, mu_t, sd_t, eps_s, eps_t) -> tuple[Tensor, Tensor]:
    """Mini-batch estimates of D(P_T' || P_T) and D(P_T || P_T').

    Each batch point contributes one reparameterized draw, scored against both
    batch mixtures.  Works on tape-attached Tensors, so it doubles as the
    alignment loss during training.
    """
    mu_s, sd_s, mu_t, sd_t = (as_tensor(x) for x in (mu_s, sd_s, mu_t, sd_t))
    if mu_s.shape[0] < 2 or mu_t.shape[0] < 2:
        raise ValueError(
            f"mixture KL needs batch size >= 2, got {mu_s.shape[0]} and {mu_t.shape[0]}")
    t_s = add(mu_s, mul(sd_s, eps_s))
    t_t = add(mu_t, mul(sd_t, eps_t))
    fwd = mean(sub(mixture_log_density(t_t, mu_t, sd_t), mixture_log_density(t_t, mu_s, sd_s)))
    rev = mean(sub(mixture_log_density(t_s, mu_s, sd_s), mixture_log_density(t_s, mu_t, sd_t)))
    return fwd, rev


def minibatch_kl(src: SampleBatch, tgt: SampleBatch, rng: np.random.Generator | None = None,
                 draws: int = 1, noise: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[float, float]:
    """(kl_fwd, kl_rev) = estimates of D(P_T'||P_T) and D(P_T||P_T').

    Either pass ``noise`` (standard-normal arrays shaped like each batch) or an
    ``rng``; with ``draws > 1`` the estimate is averaged over fresh draws.
    """
    for name, batch in (("src", src), ("tgt", tgt)):
        if batch.means is None:
            raise ValueError(f"{name} batch carries no per-point Gaussians")
        if len(batch) < 2:
            raise ValueError(f"{name} batch size {len(batch)} < 2: mixture is degenerate")
    if src.dim != tgt.dim:
        raise ValueError(f"dimension mismatch: {src.dim} vs {tgt.dim}")
    if noise is None and rng is None:
        raise ValueError("need either rng or noise")
    fwd_total = rev_total = 0.0
    n_draws = 1 if noise is not None else draws
    with no_grad():
        for _ in range(n_draws):
            if noise is not None:
                eps_s, eps_t = noise
            else:
                eps_s = rng.standard_normal(src.means.shape)
                eps_t = rng.standard_normal(tgt.means.shape)
            fwd, rev = mixture_kl_terms(src.means, src.stds, tgt.means, tgt.stds, eps_s, eps_t)
            fwd_total += fwd.item()
            rev_total += rev.item()
    return fwd_total / n_draws, rev_total / n_draws


def scott_bandwidth(points: np.ndarray) -> np.ndarray:
    """Per-dimension Scott's-rule kernel width, std * n^(-1/(d+4))."""
    pts = np.asarray(points, dtype=np.float64)
    n, d = pts.shape
    return pts.std(axis=0, ddof=1) * n ** (-1.0 / (d + 4))


def raw_input_kl(src_points: np.ndarray, tgt_points: np.ndarray, rng: np.random.Generator,
                 draws: int = 1) -> tuple[float, float]:
    """Mixture mini-batch KL on raw inputs.

    Every point gets an isotropic-per-dimension Gaussian kernel whose width is
    the Scott bandwidth of the pooled batches, so the two mixtures are smoothed
    identically.
    """
    src_points = np.asarray(src_points, dtype=np.float64)
    tgt_points = np.asarray(tgt_points, dtype=np.float64)
    width = scott_bandwidth(np.concatenate([src_points, tgt_points]))
    src = SampleBatch.gaussian(src_points, width)
    tgt = SampleBatch.gaussian(tgt_points, width)
    return minibatch_kl(src, tgt, rng, draws=draws)


# ----------------------------------------------------------------------------
# Wasserstein distances


def wasserstein1_1d(a, b) -> float:
    """W1 between two equal-size uniform empirical measures on the line."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.shape != b.shape:
        raise ValueError(f"sample counts differ: {a.size} vs {b.size}")
    return float(np.mean(np.abs(a - b)))


def discrete_metric(k: int) -> np.ndarray:
    return 1.0 - np.eye(k)


@functools.lru_cache(maxsize=None)
def _spanning_trees(r: int, c: int):
    """All spanning trees of K_{r,c} as (cells, pinv-of-incidence) pairs."""
    cells_all = [(i, j) for i in range(r) for j in range(c)]
    trees, solvers = [], []
    for combo in itertools.combinations(range(r * c), r + c - 1):
        parent = list(range(r + c))

        def find(u):
            while parent[u] != u:
                parent[u] = parent[parent[u]]
                u = parent[u]
            return u

        ok = True
        for k in combo:
            i, j = cells_all[k]
            a, b = find(i), find(r + j)
            if a == b:
                ok = False
                break
            parent[a] = b
        if not ok:
            continue
        inc = np.zeros((r + c, r + c - 1))
        for col, k in enumerate(combo):
            i, j = cells_all[k]
            inc[i, col] = 1.0
            inc[r + j, col] = 1.0
        trees.append(combo)
        solvers.append(np.linalg.pinv(inc))
    return np.array(trees), np.stack(solvers)


def _ot_vertex(p, q, cost) -> float:
    r, c = len(p), len(q)
    trees, solvers = _spanning_trees(r, c)
    flows = solvers @ np.concatenate([p, q])
    feasible = np.all(flows >= -1e-12, axis=1)
    costs = np.sum(flows * cost.reshape(-1)[trees], axis=1)
    return float(np.min(costs[feasible]))


def _tree_path(adj_rows, adj_cols, start_col: int, end_row: int):
    """Cells on the tree path from column node ``start_col`` to row node ``end_row``."""
    # nodes: ("r", i) or ("c", j); BFS keeps parents
    start = ("c", start_col)
    prev = {start: None}
    queue = collections.deque([start])
    while queue:
        node = queue.popleft()
        if node == ("r", end_row):
            break
        kind, idx = node
        nbrs = [("c", j) for j in adj_rows[idx]] if kind == "r" else [("r", i) for i in adj_cols[idx]]
        for nb in nbrs:
            if nb not in prev:
                prev[nb] = node
                queue.append(nb)
    path = []
    node = ("r", end_row)
    while prev[node] is not None:
        p = prev[node]
        cell = (node[1], p[1]) if node[0] == "r" else (p[1], node[1])
        path.append(cell)
        node = p
    path.reverse()
    return path


def _ot_simplex(p, q, cost, max_iter: int = 100_000) -> float:
    """Transportation simplex (network simplex on the bipartite graph).

    Entering cells are chosen by most negative reduced cost; after a run of
    degenerate pivots the rule switches to Bland's (first eligible cell), which
    cannot cycle.
    """
    r, c = len(p), len(q)
    x = np.zeros((r, c))
    sp, dq = p.copy(), q.copy()
    basis = []
    i = j = 0
    while True:
        f = min(sp[i], dq[j])
        x[i, j] = f
        basis.append((i, j))
        sp[i] -= f
        dq[j] -= f
        if i == r - 1 and j == c - 1:
            break
        if i == r - 1:
            j += 1
        elif j == c - 1:
            i += 1
        elif sp[i] <= dq[j]:
            i += 1
        else:
            j += 1
    basis_set = set(basis)
    tol = 1e-12 * (1.0 + float(np.max(np.abs(cost))))
    degenerate_run = 0
    for _ in range(max_iter):
        adj_rows = [[] for _ in range(r)]
        adj_cols = [[] for _ in range(c)]
        for (a, b) in basis_set:
            adj_rows[a].append(b)
            adj_cols[b].append(a)
        u = np.full(r, np.nan)
        v = np.full(c, np.nan)
        u[0] = 0.0
        stack = [("r", 0)]
        while stack:
            kind, idx = stack.pop()
            if kind == "r":
                for b in adj_rows[idx]:
                    if np.isnan(v[b]):
                        v[b] = cost[idx, b] - u[idx]
                        stack.append(("c", b))
            else:
                for a in adj_cols[idx]:
                    if np.isnan(u[a]):
                        u[a] = cost[a, idx] - v[idx]
                        stack.append(("r", a))
        reduced = cost - u[:, None] - v[None, :]
        for (a, b) in basis_set:
            reduced[a, b] = 0.0
        flat = int(np.argmin(reduced))
        if reduced.flat[flat] >= -tol:
            return float(np.sum(x * cost))
        if degenerate_run > r + c:
            flat = int(np.flatnonzero(reduced.reshape(-1) < -tol)[0])
        i0, j0 = divmod(flat, c)
        path = _tree_path(adj_rows, adj_cols, j0, i0)
        minus = path[0::2]
        theta = min(x[cell] for cell in minus)
        degenerate_run = degenerate_run + 1 if theta == 0.0 else 0
        leaving = min(cell for cell in minus if x[cell] == theta)
        x[i0, j0] += theta
        for k, cell in enumerate(path):
            x[cell] += -theta if k % 2 == 0 else theta
        x[leaving] = 0.0
        basis_set.remove(leaving)
        basis_set.add((i0, j0))
    raise RuntimeError("transportation simplex did not converge")


def wasserstein_discrete(p: Categorical, q: Categorical, cost, method: str = "auto") -> float:
    """Exact optimal-transport cost between two categoricals.

    ``method`` is "vertex" (exhaustive basic-solution search), "simplex", or
    "auto" (vertex up to support 4, simplex up to 64).
    """
    cost = np.asarray(cost, dtype=np.float64)
    k = p.size
    if q.size != k or cost.shape != (k, k):
        raise ValueError(f"cost must be {k}x{k} for supports {p.size}, {q.size}; got {cost.shape}")
    if np.any(cost < 0):
        raise ValueError("transport cost must be nonnegative")
    if k > MAX_SIMPLEX_SUPPORT:
        raise ValueError(f"support {k} exceeds the exact-solver cap {MAX_SIMPLEX_SUPPORT}")
    if method == "auto":
        method = "vertex" if k <= MAX_VERTEX_SUPPORT else "simplex"
    if method == "vertex":
        if k > MAX_VERTEX_SUPPORT:
            raise ValueError(f"vertex enumeration limited to support {MAX_VERTEX_SUPPORT}")
        return max(_ot_vertex(p.probs, q.probs, cost), 0.0)
    if method == "simplex":
        # pivoting can leave a -1e-15 residue on a zero-cost plan
        return max(_ot_simplex(np.array(p.probs), np.array(q.probs), cost), 0.0)
    raise ValueError(f"unknown method {method!r}")


# ----------------------------------------------------------------------------
# Donsker-Varadhan and empirical KL


def _weighted_mean(vals, w):
    return float(np.mean(vals)) if w is None else float(np.dot(w, vals))


def dv_lower_bound(f: Callable[[np.ndarray], np.ndarray], samples_q: SampleBatch,
                   samples_p: SampleBatch) -> float:
    """E_Q f - log E_P exp(f), the Donsker-Varadhan lower bound on D(Q||P)."""
    fq = np.asarray(f(samples_q.points), dtype=np.float64).reshape(-1)
    fp = np.asarray(f(samples_p.points), dtype=np.float64).reshape(-1)
    w = samples_p.weights
    m = float(np.max(fp))
    if w is None:
        lme = m + math.log(float(np.mean(np.exp(fp - m))))
    else:
        lme = m + math.log(float(np.dot(w, np.exp(fp - m))))
    return _weighted_mean(fq, samples_q.weights) - lme


def plugin_kl(counts: np.ndarray, mu: Categorical) -> float:
    """D(mu_hat || mu) for an empirical histogram given by ``counts``."""
    counts = np.asarray(counts, dtype=np.float64)
    return float(kl(Categorical(counts / counts.sum()), mu))


def kl_envelope(support: int, n: int, delta: float) -> float:
    """(|Z|/n) ln(n+1) + 1/(n ln(1/delta))."""
    return support / n * math.log(n + 1) + 1.0 / (n * math.log(1.0 / delta))


def kl_envelope_method_of_types(support: int, n: int, delta: float) -> float:
    """(|Z| ln(n+1) + ln(1/delta)) / n, the method-of-types deviation bound."""
    return (support * math.log(n + 1) + math.log(1.0 / delta)) / n


@dataclass(frozen=True)
class ConvergenceResult:
    n: int
    support: int
    values: np.ndarray
    quantiles: dict[float, float]
    envelopes: dict[float, float]


def empirical_kl_convergence(mu: Categorical, n: int, trials: int, seed: int = 0,
                             deltas=(0.1, 0.05)) -> ConvergenceResult:
    """Plug-in KL(mu_hat || mu) over ``trials`` independent size-``n`` samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    children = np.random.SeedSequence(seed).spawn(trials)
    values = np.empty(trials)
    for k, child in enumerate(children):
        counts = np.random.default_rng(child).multinomial(n, mu.probs)
        values[k] = plugin_kl(counts, mu)
    quantiles = {d: float(np.quantile(values, 1.0 - d)) for d in deltas}
    envelopes = {d: kl_envelope(mu.size, n, d) for d in deltas}
    return ConvergenceResult(n, mu.size, values, quantiles, envelopes)
