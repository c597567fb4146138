"""Exact enumeration of tiny domain-adaptation worlds.

A :class:`MicroWorld` has a finite input set X (at most 4 points), a finite
label set Y (at most 3), a source joint ``mu`` and a target joint ``mu_prime``
over X x Y, i.i.d. samples S (n labelled source points) and S'_X (m unlabelled
target inputs), and a learning kernel P(W | S, S'_X) over the hypothesis set of
all deterministic maps X -> Y.  :func:`enumerate_world` sums over every sample
pair and hypothesis, so every information quantity it reports is exact up to
float64 rounding.

Index conventions: a labelled point z = (x, y) has flat index ``x * n_y + y``;
hypothesis ``w`` is row ``w`` of :func:`hypothesis_table`, in
``itertools.product`` order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import textconf
from .distributions import Categorical
from .estimators import wasserstein_discrete

MAX_ENUMERATION = 10 ** 7
MAX_INPUTS = 4
MAX_LABELS = 3
MAX_SOURCE = 3
MAX_TARGET = 2
NORM_TOL = 1e-12
BOUND_TOL = 1e-9
IDENTITY_TOL = 1e-9

KernelFn = Callable[["MicroWorld", np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class EnumerationTooLarge(ValueError):
    def __init__(self, cardinality: int):
        self.cardinality = cardinality
        super().__init__(f"enumeration size {cardinality} exceeds the limit {MAX_ENUMERATION}")


class DecompositionError(ArithmeticError):
    pass


def _normalized_table(name: str, table, shape) -> np.ndarray:
    arr = np.array(table, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError(f"{name}: entries must be finite and nonnegative")
    if abs(arr.sum() - 1.0) > NORM_TOL:
        raise ValueError(f"{name}: total mass {arr.sum()!r} is not 1 within {NORM_TOL}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MicroWorld:
    """A finite UDA instance.

    ``mu`` and ``mu_prime`` are (n_x, n_y) joint tables.  ``algorithm`` is
    ``"erm"`` (uniform over empirical-risk minimizers, target sample ignored)
    or ``"gibbs"``, whose kernel is proportional to
    ``exp(-gamma * (source loss sum + target_weight * pseudo-label loss sum))``.
    A callable ``kernel`` overrides both.
    """

    mu: np.ndarray
    mu_prime: np.ndarray
    n: int = 1
    m: int = 1
    algorithm: str = "erm"
    gamma: float = 1.0
    target_weight: float = 0.0
    loss: np.ndarray | None = None
    kernel: KernelFn | None = field(default=None, compare=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 2:
            raise ValueError(f"mu must be an (n_x, n_y) table, got shape {mu.shape}")
        n_x, n_y = mu.shape
        if not (1 <= n_x <= MAX_INPUTS) or not (2 <= n_y <= MAX_LABELS):
            raise ValueError(f"need 1 <= |X| <= {MAX_INPUTS} and 2 <= |Y| <= {MAX_LABELS}, got {mu.shape}")
        object.__setattr__(self, "mu", _normalized_table("mu", mu, (n_x, n_y)))
        object.__setattr__(self, "mu_prime", _normalized_table("mu_prime", self.mu_prime, (n_x, n_y)))
        if not (1 <= self.n <= MAX_SOURCE) or not (1 <= self.m <= MAX_TARGET):
            raise ValueError(f"need 1 <= n <= {MAX_SOURCE} and 1 <= m <= {MAX_TARGET}")
        if self.algorithm not in ("erm", "gibbs"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.gamma < 0:
            raise ValueError("gibbs temperature must be nonnegative")
        loss = np.ones((n_y, n_y)) - np.eye(n_y) if self.loss is None else np.array(self.loss, dtype=np.float64)
        if loss.shape != (n_y, n_y) or np.any(loss < 0) or np.any(~np.isfinite(loss)):
            raise ValueError(f"loss must be a finite nonnegative ({n_y}, {n_y}) table")
        loss.setflags(write=False)
        object.__setattr__(self, "loss", loss)
        size = self.enumeration_size
        if size > MAX_ENUMERATION:
            raise EnumerationTooLarge(size)

    @property
    def n_x(self) -> int:
        return self.mu.shape[0]

    @property
    def n_y(self) -> int:
        return self.mu.shape[1]

    @property
    def n_z(self) -> int:
        return self.n_x * self.n_y

    @property
    def n_w(self) -> int:
        return self.n_y ** self.n_x

    @property
    def loss_bound(self) -> float:
        """M, the largest loss value."""
        return float(self.loss.max())

    @property
    def enumeration_size(self) -> int:
        return (self.n_z ** self.n) * (self.n_x ** self.m) * self.n_w

    @property
    def p_x(self) -> np.ndarray:
        return self.mu.sum(axis=1)

    @property
    def p_x_prime(self) -> np.ndarray:
        return self.mu_prime.sum(axis=1)


def hypothesis_table(n_x: int, n_y: int) -> np.ndarray:
    """Row w lists the label hypothesis w assigns to each input."""
    return np.array(list(itertools.product(range(n_y), repeat=n_x)), dtype=np.int64).reshape(-1, n_x)


def hamming_metric(hyps: np.ndarray, normalized: bool = True) -> np.ndarray:
    d = (hyps[:, None, :] != hyps[None, :, :]).sum(axis=2).astype(np.float64)
    return d / hyps.shape[1] if normalized else d


def population_risk(world: MicroWorld, joint: np.ndarray) -> np.ndarray:
    """R(w) for every hypothesis under the (n_x, n_y) joint table."""
    hyps = hypothesis_table(world.n_x, world.n_y)
    # loss[h(x), y] for all w, x, y
    per = world.loss[hyps[:, :, None], np.arange(world.n_y)[None, None, :]]
    return np.einsum("wxy,xy->w", per, joint)


# ----------------------------------------------------------------------------
# kernels


def _sample_losses(world: MicroWorld, src: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    """Summed source loss, shape (num source samples, num hypotheses)."""
    xs, ys = src // world.n_y, src % world.n_y
    pred = hyps[:, xs]  # (W, S, n)
    return world.loss[pred, ys[None]].sum(axis=2).T


def pseudo_labels(world: MicroWorld, src: np.ndarray) -> np.ndarray:
    """Per source sample, a label for each input: the majority source label at
    that input, falling back to the overall majority label, ties to the smallest."""
    xs, ys = src // world.n_y, src % world.n_y
    out = np.empty((src.shape[0], world.n_x), dtype=np.int64)
    for s in range(src.shape[0]):
        overall = np.bincount(ys[s], minlength=world.n_y)
        fallback = int(np.argmax(overall))
        for x in range(world.n_x):
            mask = xs[s] == x
            out[s, x] = int(np.argmax(np.bincount(ys[s][mask], minlength=world.n_y))) if mask.any() else fallback
    return out


def erm_kernel(world: MicroWorld, src: np.ndarray, tgt: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    losses = _sample_losses(world, src, hyps)
    best = losses.min(axis=1, keepdims=True)
    ties = np.abs(losses - best) <= 1e-12 * max(1.0, world.loss_bound * world.n)
    probs = ties / ties.sum(axis=1, keepdims=True)
    return np.broadcast_to(probs[:, None, :], (src.shape[0], tgt.shape[0], hyps.shape[0]))


def gibbs_kernel(world: MicroWorld, src: np.ndarray, tgt: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    energy = _sample_losses(world, src, hyps)[:, None, :]
    if world.target_weight != 0.0:
        pl = pseudo_labels(world, src)  # (S, X)
        pred = hyps[:, tgt]  # (W, T, m)
        truth = pl[:, tgt]  # (S, T, m)
        energy = energy + world.target_weight * _target_loss(world, pred, truth)
    logits = -world.gamma * energy
    logits = logits - logits.max(axis=2, keepdims=True)
    weights = np.exp(logits)
    probs = weights / weights.sum(axis=2, keepdims=True)
    return np.broadcast_to(probs, (src.shape[0], tgt.shape[0], hyps.shape[0]))


def _target_loss(world: MicroWorld, pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    # pred (W, T, m), truth (S, T, m) -> (S, T, W)
    vals = world.loss[pred[None, :, :, :], truth[:, None, :, :]]  # (S, W, T, m)
    return vals.sum(axis=3).transpose(0, 2, 1)


def kernel_table(world: MicroWorld, src: np.ndarray, tgt: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    if world.kernel is not None:
        k = np.asarray(world.kernel(world, src, tgt, hyps), dtype=np.float64)
    elif world.algorithm == "erm":
        k = erm_kernel(world, src, tgt, hyps)
    else:
        k = gibbs_kernel(world, src, tgt, hyps)
    expected = (src.shape[0], tgt.shape[0], hyps.shape[0])
    if k.shape != expected:
        raise ValueError(f"kernel returned shape {k.shape}, expected {expected}")
    if np.any(k < 0) or np.any(np.abs(k.sum(axis=2) - 1.0) > 1e-9):
        raise ValueError("kernel rows must be probability vectors over hypotheses")
    return k


# ----------------------------------------------------------------------------
# information helpers on dense tables


def _kl_dense(p: np.ndarray, q: np.ndarray) -> float:
    """KL of two nonnegative arrays with equal total mass; inf when unsupported."""
    p = p.reshape(-1)
    q = q.reshape(-1)
    s = p > 0
    if np.any(q[s] <= 0):
        return math.inf
    return max(float(np.sum(p[s] * (np.log(p[s]) - np.log(q[s])))), 0.0)


def _mutual_info(joint: np.ndarray) -> float:
    """I(A;B) for a 2-D joint table."""
    return _kl_dense(joint, np.outer(joint.sum(axis=1), joint.sum(axis=0)))


def _lautum(joint: np.ndarray) -> float:
    return _kl_dense(np.outer(joint.sum(axis=1), joint.sum(axis=0)), joint)


def _tv(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


# ----------------------------------------------------------------------------
# enumeration


@dataclass
class ExactQuantities:
    """Everything :func:`enumerate_world` computes.

    Tables indexed ``[i][j][x']`` (source index, target index, target input)
    and ``[i][j][x'][z]``; cells whose conditioning event has probability 0 are
    NaN.  ``posterior_w`` is None when the hypothesis set is too large for the
    exact transport solver.
    """

    err: float
    err_pp: np.ndarray
    risk_src: np.ndarray
    risk_tgt: np.ndarray
    p_w: np.ndarray
    mi_disint: np.ndarray
    lautum_disint: np.ndarray
    posterior_tv: np.ndarray
    posterior_kl: np.ndarray
    posterior_w: np.ndarray | None
    mi_cond: np.ndarray
    mi_plain: np.ndarray
    mi_target_given_w: np.ndarray
    lambda_star: float
    dis_value: float
    kl_src_tgt: float
    kl_tgt_src: float
    tv_src_tgt: float
    kl_inputs_tgt_src: float
    joint_wz: np.ndarray = field(repr=False, default=None)

    def chain_rule_gap(self) -> float:
        """max |I(W;Z_i|X'_j) - I(W;Z_i) - I(X'_j;Z_i|W)| over all i, j."""
        return float(np.max(np.abs(self.mi_cond - self.mi_plain[:, None] - self.mi_target_given_w)))


def _one_hot_positions(samples: np.ndarray, position: int, size: int) -> np.ndarray:
    out = np.zeros((samples.shape[0], size))
    out[np.arange(samples.shape[0]), samples[:, position]] = 1.0
    return out


def _sample_space(probs: np.ndarray, length: int) -> tuple[np.ndarray, np.ndarray]:
    """All i.i.d. sequences of ``length`` atoms and their probabilities."""
    k = probs.size
    seqs = np.array(list(itertools.product(range(k), repeat=length)), dtype=np.int64).reshape(-1, length)
    return seqs, np.prod(probs[seqs], axis=1)


def lambda_star(world: MicroWorld) -> float:
    """min over hypotheses of target risk plus source risk."""
    return float(np.min(population_risk(world, world.mu_prime) + population_risk(world, world.mu)))


def dis_exact(world: MicroWorld, prior: np.ndarray) -> float:
    """Disagreement gap between the target and source input marginals under a
    prior over hypothesis pairs, shape (|W|, |W|)."""
    prior = np.asarray(prior, dtype=np.float64)
    n_w = world.n_w
    if prior.shape != (n_w, n_w):
        raise ValueError(f"prior over hypothesis pairs must have shape {(n_w, n_w)}, got {prior.shape}")
    if abs(prior.sum() - 1.0) > 1e-9 or np.any(prior < 0):
        raise ValueError("prior over hypothesis pairs must be a probability table")
    hyps = hypothesis_table(world.n_x, world.n_y)
    # pairwise loss at each input: loss[h_w(x), h_v(x)]
    pair = world.loss[hyps[:, None, :], hyps[None, :, :]]  # (W, W, X)
    tgt = np.einsum("wv,wvx,x->", prior, pair, world.p_x_prime)
    src = np.einsum("wv,wvx,x->", prior, pair, world.p_x)
    return float(abs(tgt - src))


def enumerate_world(world: MicroWorld, hypothesis_metric: np.ndarray | None = None,
                    dis_prior: np.ndarray | None = None) -> ExactQuantities:
    """Exact joint over (S, S'_X, W) and every derived quantity.

    ``hypothesis_metric`` defaults to the normalized Hamming distance between
    label tables; ``dis_prior`` defaults to the product of the algorithm's
    hypothesis marginal with itself.
    """
    size = world.enumeration_size
    if size > MAX_ENUMERATION:
        raise EnumerationTooLarge(size)
    n, m, n_x, n_y, n_z = world.n, world.m, world.n_x, world.n_y, world.n_z
    hyps = hypothesis_table(n_x, n_y)
    n_w = hyps.shape[0]
    mu_flat = world.mu.reshape(-1)
    p_xp = world.p_x_prime
    src, p_src = _sample_space(mu_flat, n)
    tgt, p_tgt = _sample_space(p_xp, m)

    kernel = kernel_table(world, src, tgt, hyps)
    joint = p_src[:, None, None] * p_tgt[None, :, None] * kernel  # (S, T, W)

    risk_src = population_risk(world, world.mu)
    risk_tgt = population_risk(world, world.mu_prime)
    emp = _sample_losses(world, src, hyps) / n  # (S, W)
    p_w = joint.sum(axis=(0, 1))
    err = float(np.dot(p_w, risk_tgt) - np.einsum("stw,sw->", joint, emp))

    metric = hamming_metric(hyps) if hypothesis_metric is None else np.asarray(hypothesis_metric, dtype=np.float64)
    do_transport = n_w <= 64

    shape3 = (n, m, n_x)
    mi = np.full(shape3, np.nan)
    lautum = np.full(shape3, np.nan)
    post_tv = np.full(shape3 + (n_z,), np.nan)
    post_kl = np.full(shape3 + (n_z,), np.nan)
    post_w = np.full(shape3 + (n_z,), np.nan) if do_transport else None
    mi_cond = np.zeros((n, m))
    mi_plain = np.zeros(n)
    mi_tgw = np.zeros((n, m))
    joint_wz = np.zeros((n, n_z, n_w))
    transport_cache: dict[tuple[bytes, bytes], float] = {}

    flat = joint.reshape(src.shape[0], -1)
    for i in range(n):
        a_i = _one_hot_positions(src, i, n_z)
        by_z = (a_i.T @ flat).reshape(n_z, tgt.shape[0], n_w)  # P(Z_i = z, S'_X = t, W = w)
        p_zw = by_z.sum(axis=1)
        joint_wz[i] = p_zw
        mi_plain[i] = _mutual_info(p_zw)
        for j in range(m):
            b_j = _one_hot_positions(tgt, j, n_x)
            p_zxw = np.einsum("ztw,tx->zxw", by_z, b_j)
            for x in range(n_x):
                px = p_xp[x]
                if px <= 0:
                    continue
                cond = p_zxw[:, x, :] / px  # P(Z_i, W | X'_j = x)
                mi[i, j, x] = _mutual_info(cond)
                lautum[i, j, x] = _lautum(cond)
                p_w_x = cond.sum(axis=0)
                p_z_x = cond.sum(axis=1)
                for z in range(n_z):
                    if p_z_x[z] <= 0:
                        continue
                    post = cond[z] / p_z_x[z]
                    post_tv[i, j, x, z] = _tv(post, p_w_x)
                    post_kl[i, j, x, z] = _kl_dense(post, p_w_x)
                    if do_transport:
                        key = (post.tobytes(), p_w_x.tobytes())
                        if key not in transport_cache:
                            transport_cache[key] = _transport(post, p_w_x, metric)
                        post_w[i, j, x, z] = transport_cache[key]
            mi_cond[i, j] = float(np.dot(p_xp, np.nan_to_num(mi[i, j], nan=0.0)))
            p_w_marg = p_zxw.sum(axis=(0, 1))
            total = 0.0
            for w in range(n_w):
                if p_w_marg[w] <= 0:
                    continue
                total += p_w_marg[w] * _mutual_info(p_zxw[:, :, w] / p_w_marg[w])
            mi_tgw[i, j] = total

    prior = np.outer(p_w, p_w) if dis_prior is None else dis_prior
    kl_st = _kl_dense(world.mu, world.mu_prime)
    kl_ts = _kl_dense(world.mu_prime, world.mu)
    return ExactQuantities(
        err=err,
        err_pp=risk_tgt - risk_src,
        risk_src=risk_src,
        risk_tgt=risk_tgt,
        p_w=p_w,
        mi_disint=mi,
        lautum_disint=lautum,
        posterior_tv=post_tv,
        posterior_kl=post_kl,
        posterior_w=post_w,
        mi_cond=mi_cond,
        mi_plain=mi_plain,
        mi_target_given_w=mi_tgw,
        lambda_star=lambda_star(world),
        dis_value=dis_exact(world, prior),
        kl_src_tgt=kl_st,
        kl_tgt_src=kl_ts,
        tv_src_tgt=_tv(world.mu, world.mu_prime),
        kl_inputs_tgt_src=_kl_dense(world.p_x_prime, world.p_x),
        joint_wz=joint_wz,
    )


def _transport(p: np.ndarray, q: np.ndarray, metric: np.ndarray) -> float:
    keep = (p > 0) | (q > 0)
    if keep.sum() <= 1:
        return 0.0
    idx = np.flatnonzero(keep)
    pp, qq = p[idx], q[idx]
    return wasserstein_discrete(Categorical(pp / pp.sum()), Categorical(qq / qq.sum()), metric[np.ix_(idx, idx)])


# ----------------------------------------------------------------------------
# expectation bounds


def _disintegrated_average(world: MicroWorld, table: np.ndarray, fn=lambda v: v) -> float:
    """(1/nm) sum_ij E_{X'_j} fn(table[i, j, X'_j])."""
    p = world.p_x_prime
    total = 0.0
    for i in range(world.n):
        for j in range(world.m):
            for x in range(world.n_x):
                if p[x] > 0:
                    total += p[x] * fn(table[i, j, x])
    return total / (world.n * world.m)


def _posterior_average(world: MicroWorld, table: np.ndarray, fn=lambda v: v) -> float:
    """(1/nm) sum_ij E_{X'_j, Z_i} fn(table[i, j, X'_j, Z_i]) with Z_i independent of X'_j."""
    p_x = world.p_x_prime
    p_z = world.mu.reshape(-1)
    total = 0.0
    for i in range(world.n):
        for j in range(world.m):
            for x in range(world.n_x):
                for z in range(world.n_z):
                    wgt = p_x[x] * p_z[z]
                    if wgt > 0:
                        total += wgt * fn(table[i, j, x, z])
    return total / (world.n * world.m)


def verify_ep_bounds(q: ExactQuantities, world: MicroWorld):
    """Exact left- and right-hand sides of the four expectation bounds.

    Returns a list of :class:`~infouda.bounds.BoundReport`.  The Wasserstein
    bound uses the normalized Hamming metric on hypotheses (the 0-1 style loss
    is then ``M * |X|``-Lipschitz) and the discrete metric on labelled points
    (``M``-Lipschitz); a second report with the discrete metric on hypotheses is
    the total-variation form.  The ``ordering`` flag of the last report checks
    TV form <= posterior-KL form <= mutual-information form.
    """
    from .bounds import BoundReport

    big_m = world.loss_bound
    r = big_m / 2.0
    lhs = abs(q.err)
    sq = lambda v: math.sqrt(v) if math.isfinite(v) else math.inf

    mi_term = _disintegrated_average(world, q.mi_disint, lambda v: sq(2 * r * r * v))
    rhs51 = mi_term + sq(2 * r * r * q.kl_src_tgt)

    min_info = np.fmin(q.mi_disint, q.lautum_disint)
    rhs52 = big_m / math.sqrt(2) * (_disintegrated_average(world, min_info, sq)
                                    + sq(min(q.kl_src_tgt, q.kl_tgt_src)))

    tv_form = big_m * (_posterior_average(world, q.posterior_tv) + q.tv_src_tgt)
    kl_form = _posterior_average(world, q.posterior_kl, lambda v: sq(big_m ** 2 / 2 * v)) \
        + sq(big_m ** 2 / 2 * q.kl_src_tgt)

    common = {"M": big_m, "R": r, "kl_src_tgt": q.kl_src_tgt, "kl_tgt_src": q.kl_tgt_src}
    reports = [
        BoundReport.make("ep_mutual_information", lhs, rhs51,
                         dict(common, mi_average=_disintegrated_average(world, q.mi_disint))),
        BoundReport.make("ep_min_mi_lautum", lhs, rhs52, dict(common)),
    ]
    if q.posterior_w is not None:
        beta_w = big_m * world.n_x
        rhs53 = beta_w * _posterior_average(world, q.posterior_w) + big_m * q.tv_src_tgt
        reports.append(BoundReport.make("ep_wasserstein_hamming", lhs, rhs53,
                                        dict(common, beta_hyp=beta_w, beta_point=big_m)))
    reports.append(BoundReport.make("ep_total_variation", lhs, tv_form, dict(common)))
    ordered = tv_form <= kl_form + BOUND_TOL and kl_form <= rhs51 + BOUND_TOL
    reports.append(BoundReport.make("ep_posterior_kl", lhs, kl_form, dict(common, tv_form=tv_form,
                                    mi_form=rhs51), flags=() if ordered else ("ordering-violated",)))
    return reports


def verify_pp_bounds(world: MicroWorld, q: ExactQuantities | None = None):
    """Population-to-population bounds checked against the worst hypothesis."""
    from .bounds import pp_bounds

    if q is None:
        q = enumerate_world(world)
    worst_abs = float(np.max(np.abs(q.err_pp)))
    worst_signed = float(np.max(q.err_pp))
    inputs_tv = _tv(world.p_x, world.p_x_prime)
    # the joint-optimal-risk forms need a symmetric loss obeying the triangle inequality
    lam = q.lambda_star if is_metric_loss(world.loss) else None
    return pp_bounds(
        lhs_abs=worst_abs,
        lhs_signed=worst_signed,
        kl_tgt_src=q.kl_tgt_src,
        kl_src_tgt=q.kl_src_tgt,
        kl_inputs_tgt_src=q.kl_inputs_tgt_src,
        kl_labels_tgt_src=_conditional_label_kl(world),
        tv=q.tv_src_tgt,
        wasserstein=q.tv_src_tgt,
        beta=world.loss_bound,
        wasserstein_inputs=inputs_tv,
        lipschitz=world.loss_bound,
        lambda_star=lam,
        dis=q.dis_value,
        loss_bound=world.loss_bound,
        subgaussian=world.loss_bound / 2.0,
        evidence="bounded-loss",
    )


def is_metric_loss(loss: np.ndarray, tol: float = 1e-12) -> bool:
    """Symmetric, zero on the diagonal and obeying the triangle inequality."""
    loss = np.asarray(loss, dtype=np.float64)
    if np.any(np.abs(np.diag(loss)) > tol) or np.any(np.abs(loss - loss.T) > tol):
        return False
    via = loss[:, :, None] + loss[None, :, :]  # l(a,b) + l(b,c) indexed [a,b,c]
    return bool(np.all(loss[:, None, :] <= via + tol))


def _conditional_label_kl(world: MicroWorld) -> float:
    """E_{X'} KL(P_{Y'|X'} || P_{Y|X})."""
    total = 0.0
    for x in range(world.n_x):
        px = world.p_x_prime[x]
        if px <= 0:
            continue
        if world.p_x[x] <= 0:
            return math.inf
        d = _kl_dense(world.mu_prime[x] / px, world.mu[x] / world.p_x[x])
        if math.isinf(d):
            return math.inf
        total += px * d
    return total


# ----------------------------------------------------------------------------
# cross-entropy decomposition and pseudo-label diagnostic


@dataclass(frozen=True)
class CEDecomposition:
    ce: float
    h_y_given_t: float
    kl_term: float
    mi_term: float
    infinite: bool
    residual: float


def _entropy_cond(joint: np.ndarray) -> float:
    """H(B|A) for a 2-D joint table over (A, B)."""
    marg = joint.sum(axis=1, keepdims=True)
    s = joint > 0
    return float(-np.sum(joint[s] * np.log((joint / np.where(marg > 0, marg, 1.0))[s])))


def ce_decomposition(world: MicroWorld, representation, classifier: np.ndarray,
                     source_index: int = 0, q: ExactQuantities | None = None) -> CEDecomposition:
    """Expected cross-entropy of a stochastic classifier Q[w, t, y] and its split
    into H(Y|T) + E KL(P_{Y|T,W} || Q) - I(W;Y|T).

    ``representation`` maps each input index to a representation index.
    """
    if q is None:
        q = enumerate_world(world)
    rep = np.asarray(representation, dtype=np.int64)
    if rep.shape != (world.n_x,):
        raise ValueError(f"representation must map all {world.n_x} inputs")
    n_t = int(rep.max()) + 1
    cls = np.asarray(classifier, dtype=np.float64)
    if cls.shape != (world.n_w, n_t, world.n_y):
        raise ValueError(f"classifier must have shape {(world.n_w, n_t, world.n_y)}, got {cls.shape}")
    if np.any(cls < 0) or np.any(np.abs(cls.sum(axis=2) - 1.0) > 1e-9):
        raise ValueError("classifier rows must be probability vectors over labels")

    p_zw = q.joint_wz[source_index].reshape(world.n_x, world.n_y, world.n_w)
    p_wty = np.zeros((world.n_w, n_t, world.n_y))
    for x in range(world.n_x):
        p_wty[:, rep[x], :] += p_zw[x].T

    support = p_wty > 0
    if np.any(cls[support] <= 0):
        inf = math.inf
        return CEDecomposition(inf, _entropy_cond(p_wty.sum(axis=0)), inf, _cond_mi(p_wty), True, 0.0)
    ce = float(-np.sum(p_wty[support] * np.log(cls[support])))
    h = _entropy_cond(p_wty.sum(axis=0))
    p_tw = p_wty.sum(axis=2)
    kl_term = 0.0
    for w in range(world.n_w):
        for t in range(n_t):
            if p_tw[w, t] > 0:
                kl_term += p_tw[w, t] * _kl_dense(p_wty[w, t] / p_tw[w, t], cls[w, t])
    mi_term = _cond_mi(p_wty)
    residual = ce - (h + kl_term - mi_term)
    if abs(residual) > IDENTITY_TOL:
        raise DecompositionError(f"cross-entropy identity off by {residual:.3e}")
    return CEDecomposition(ce, h, kl_term, mi_term, False, residual)


def _cond_mi(p_wty: np.ndarray) -> float:
    """I(W;Y|T) from a (W, T, Y) joint."""
    total = 0.0
    for t in range(p_wty.shape[1]):
        block = p_wty[:, t, :]
        pt = block.sum()
        if pt > 0:
            total += pt * _mutual_info(block / pt)
    return total


def posterior_label_classifier(world: MicroWorld, representation, q: ExactQuantities | None = None,
                               source_index: int = 0) -> np.ndarray:
    """Q[w, t, y] = P(Y | T, W) under the enumerated joint; unvisited cells uniform."""
    if q is None:
        q = enumerate_world(world)
    rep = np.asarray(representation, dtype=np.int64)
    n_t = int(rep.max()) + 1
    p_zw = q.joint_wz[source_index].reshape(world.n_x, world.n_y, world.n_w)
    p_wty = np.zeros((world.n_w, n_t, world.n_y))
    for x in range(world.n_x):
        p_wty[:, rep[x], :] += p_zw[x].T
    tot = p_wty.sum(axis=2, keepdims=True)
    return np.where(tot > 0, p_wty / np.where(tot > 0, tot, 1.0), 1.0 / world.n_y)


def label_given_representation(world: MicroWorld, representation, target: bool = False) -> np.ndarray:
    """P(Y | T) as an (n_t, n_y) table; rows with P(T = t) = 0 are uniform."""
    joint = _pushforward(world.mu_prime if target else world.mu, representation)
    tot = joint.sum(axis=1, keepdims=True)
    return np.where(tot > 0, joint / np.where(tot > 0, tot, 1.0), 1.0 / world.n_y)


def _pushforward(joint: np.ndarray, representation) -> np.ndarray:
    rep = np.asarray(representation, dtype=np.int64)
    n_t = int(rep.max()) + 1
    out = np.zeros((n_t, joint.shape[1]))
    np.add.at(out, rep, joint)
    return out


@dataclass(frozen=True)
class PseudoLabelDiagnostic:
    kl_joint: float
    kl_marginal: float
    kl_conditional: float

    @property
    def conditional_infinite(self) -> bool:
        return math.isinf(self.kl_conditional)


def pseudo_label_diagnostic(world: MicroWorld, representation,
                            classifier: np.ndarray | None = None) -> PseudoLabelDiagnostic:
    """Joint, marginal and conditional KL between target and source in
    representation space; ``classifier`` is Q(y | t), default the source P(Y|T).

    When the classifier equals the source P(Y|T) the joint KL must equal the
    sum of the other two; a mismatch raises :class:`DecompositionError`.
    """
    src = _pushforward(world.mu, representation)
    tgt = _pushforward(world.mu_prime, representation)
    if src.shape[0] < tgt.shape[0]:
        src = np.vstack([src, np.zeros((tgt.shape[0] - src.shape[0], src.shape[1]))])
    p_y_t = label_given_representation(world, representation)
    cls = p_y_t if classifier is None else np.asarray(classifier, dtype=np.float64)
    if cls.shape != p_y_t.shape:
        raise ValueError(f"classifier must have shape {p_y_t.shape}, got {cls.shape}")
    kl_joint = _kl_dense(tgt, src)
    p_t_tgt, p_t_src = tgt.sum(axis=1), src.sum(axis=1)
    kl_marg = _kl_dense(p_t_tgt, p_t_src)
    kl_cond = 0.0
    for t in range(tgt.shape[0]):
        if p_t_tgt[t] <= 0:
            continue
        d = _kl_dense(tgt[t] / p_t_tgt[t], cls[t])
        if math.isinf(d):
            kl_cond = math.inf
            break
        kl_cond += p_t_tgt[t] * d
    if classifier is None or np.allclose(cls, p_y_t, atol=0, rtol=0):
        rhs = kl_marg + kl_cond
        both_inf = math.isinf(kl_joint) and math.isinf(rhs)
        if not both_inf and not abs(kl_joint - rhs) <= IDENTITY_TOL:
            raise DecompositionError(f"joint KL {kl_joint} differs from marginal + conditional {rhs}")
    return PseudoLabelDiagnostic(kl_joint, kl_marg, kl_cond)


# ----------------------------------------------------------------------------
# random worlds and text serialization


def random_world(rng: np.random.Generator, n_x: int | None = None, n_y: int | None = None,
                 algorithm: str | None = None, max_hypotheses: int = 64) -> MicroWorld:
    """A random world small enough for every exact quantity, including transport."""
    while True:
        nx = int(rng.integers(1, MAX_INPUTS + 1)) if n_x is None else n_x
        ny = int(rng.integers(2, MAX_LABELS + 1)) if n_y is None else n_y
        if ny ** nx <= max_hypotheses:
            break
    mu = _sparse_dirichlet(rng, nx * ny).reshape(nx, ny)
    mu_p = _sparse_dirichlet(rng, nx * ny).reshape(nx, ny)
    algo = algorithm or ("erm" if rng.random() < 0.5 else "gibbs")
    n = int(rng.integers(1, MAX_SOURCE + 1))
    m = int(rng.integers(1, MAX_TARGET + 1))
    # keep the enumeration cheap for property runs
    while (nx * ny) ** n * nx ** m * ny ** nx > 200_000 and n > 1:
        n -= 1
    return MicroWorld(mu, mu_p, n=n, m=m, algorithm=algo,
                      gamma=float(rng.choice([0.5, 1.0, 3.0])),
                      target_weight=float(rng.choice([0.0, 0.5])) if algo == "gibbs" else 0.0)


def _sparse_dirichlet(rng: np.random.Generator, k: int) -> np.ndarray:
    p = rng.dirichlet(np.ones(k))
    if k > 2 and rng.random() < 0.3:
        p[rng.integers(k)] = 0.0
    return p / p.sum()


WORLD_FORMAT = "microworld/1"


def world_to_text(world: MicroWorld) -> str:
    """Serialize with the sectioned key = value grammar of :mod:`infouda.textconf`.

    ``[world]`` holds the sizes and algorithm; ``[mu]``, ``[mu_prime]`` and
    ``[loss]`` hold one row per key ``row<k>``.
    """
    if world.kernel is not None:
        raise ValueError("worlds with custom kernels cannot be serialized")
    sections = {
        "world": {"format": WORLD_FORMAT, "n_x": world.n_x, "n_y": world.n_y, "n": world.n,
                  "m": world.m, "algorithm": world.algorithm, "gamma": float(world.gamma),
                  "target_weight": float(world.target_weight)},
        "mu": {f"row{k}": [float(v) for v in row] for k, row in enumerate(world.mu)},
        "mu_prime": {f"row{k}": [float(v) for v in row] for k, row in enumerate(world.mu_prime)},
        "loss": {f"row{k}": [float(v) for v in row] for k, row in enumerate(world.loss)},
    }
    return textconf.dump(sections)


def world_from_text(text: str) -> MicroWorld:
    doc = textconf.parse(text)
    head = doc.section("world")
    fmt = head.str("format")
    if fmt != WORLD_FORMAT:
        raise textconf.ConfigError(f"unsupported format {fmt!r}", "world.format")
    n_x, n_y = head.int("n_x"), head.int("n_y")

    def table(name, rows, cols):
        sec = doc.section(name)
        out = np.array([sec.floats(f"row{k}") for k in range(rows)])
        if out.shape != (rows, cols):
            raise textconf.ConfigError(f"expected {rows}x{cols} table", name)
        return out

    world = MicroWorld(
        mu=table("mu", n_x, n_y),
        mu_prime=table("mu_prime", n_x, n_y),
        n=head.int("n"),
        m=head.int("m"),
        algorithm=head.str("algorithm"),
        gamma=head.float("gamma", 1.0),
        target_weight=head.float("target_weight", 0.0),
        loss=table("loss", n_y, n_y) if doc.has("loss") else None,
    )
    doc.check_unused({"world", "mu", "mu_prime", "loss"})
    return world
