"""Parametric distributions with closed-form divergences.

KL values come back as :class:`Divergence`, which carries an explicit
``infinite`` flag for absolute-continuity failures instead of a float sentinel.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, as_tensor, gaussian_log_density, mul

NORM_TOL = 1e-12
RENORM_TOL = 1e-9


@functools.total_ordering
@dataclass(frozen=True)
class Divergence:
    value: float = 0.0
    infinite: bool = False

    @classmethod
    def inf(cls) -> "Divergence":
        return cls(math.inf, True)

    def __float__(self) -> float:
        return math.inf if self.infinite else float(self.value)

    def __add__(self, other) -> "Divergence":
        o = other if isinstance(other, Divergence) else Divergence(float(other))
        if self.infinite or o.infinite:
            return Divergence.inf()
        return Divergence(self.value + o.value)

    __radd__ = __add__

    def __eq__(self, other):
        return float(self) == float(other)

    def __lt__(self, other):
        return float(self) < float(other)

    def __hash__(self):
        return hash(float(self))

    def __repr__(self):
        return "Divergence(inf)" if self.infinite else f"Divergence({self.value!r})"


@dataclass(frozen=True)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64).reshape(-1)
        if p.size == 0:
            raise ValueError("Categorical needs at least one atom")
        if np.any(~np.isfinite(p)) or np.any(p < -NORM_TOL):
            raise ValueError(f"Categorical probabilities must be finite and nonnegative: {p}")
        p = np.clip(p, 0.0, None)
        total = p.sum()
        if abs(total - 1.0) > RENORM_TOL:
            raise ValueError(f"Categorical probabilities sum to {total!r}, not 1")
        if abs(total - 1.0) > 0.0:
            p = p / total
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def size(self) -> int:
        return self.probs.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.size, size=n, p=self.probs)


def bernoulli(p: float) -> Categorical:
    """Two-atom categorical with P(atom 0) = p."""
    return Categorical(np.array([p, 1.0 - p]))


@dataclass(frozen=True)
class DiagGaussian:
    """N(mean, diag(std**2)); fields may be arrays or tape-attached Tensors."""

    mean: object
    std: object

    def __post_init__(self):
        m = self.mean.data if isinstance(self.mean, Tensor) else np.asarray(self.mean, dtype=np.float64)
        s = self.std.data if isinstance(self.std, Tensor) else np.asarray(self.std, dtype=np.float64)
        if m.shape != s.shape:
            raise ValueError(f"mean shape {m.shape} and std shape {s.shape} differ")
        if np.any(s <= 0):
            raise ValueError("DiagGaussian stddev components must be strictly positive")
        if not isinstance(self.mean, Tensor):
            object.__setattr__(self, "mean", m)
        if not isinstance(self.std, Tensor):
            object.__setattr__(self, "std", s)

    @property
    def dim(self) -> int:
        return int(np.shape(_raw(self.mean))[-1])


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _same_kind(p, q):
    if type(p) is not type(q):
        raise TypeError(f"cannot compare {type(p).__name__} with {type(q).__name__}")
    if isinstance(p, Categorical) and p.size != q.size:
        raise ValueError(f"support sizes differ: {p.size} vs {q.size}")
    if isinstance(p, DiagGaussian) and np.shape(_raw(p.mean)) != np.shape(_raw(q.mean)):
        raise ValueError(f"dimensions differ: {np.shape(_raw(p.mean))} vs {np.shape(_raw(q.mean))}")


def kl(p, q) -> Divergence:
    """D_KL(p || q) in nats."""
    _same_kind(p, q)
    if isinstance(p, Categorical):
        pp, qq = p.probs, q.probs
        support = pp > 0
        if np.any(qq[support] == 0):
            return Divergence.inf()
        val = float(np.sum(pp[support] * (np.log(pp[support]) - np.log(qq[support]))))
        return Divergence(max(val, 0.0))
    mp, sp = _raw(p.mean), _raw(p.std)
    mq, sq = _raw(q.mean), _raw(q.std)
    val = float(np.sum(np.log(sq / sp) + (sp ** 2 + (mp - mq) ** 2) / (2.0 * sq ** 2) - 0.5))
    return Divergence(max(val, 0.0))


def jeffrey(p, q) -> Divergence:
    return kl(p, q) + kl(q, p)


def tv(p: Categorical, q: Categorical) -> float:
    _same_kind(p, q)
    return 0.5 * float(np.abs(p.probs - q.probs).sum())


def sample_reparam(g: DiagGaussian, noise) -> Tensor:
    """mean + std * noise, differentiable through mean and std."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1:] != np.shape(_raw(g.mean))[-1:]:
        raise ValueError(f"noise dimension {noise.shape} does not match mean {np.shape(_raw(g.mean))}")
    return add(as_tensor(g.mean), mul(as_tensor(g.std), noise))


def log_pdf(g: DiagGaussian, x):
    """Exact log density; a batch of points (last axis = dim) gives an array."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != np.shape(_raw(g.mean))[-1:]:
        raise ValueError(f"point dimension {x.shape} does not match mean {np.shape(_raw(g.mean))}")
    out = gaussian_log_density(x, _raw(g.mean), _raw(g.std)).data
    return float(out) if out.ndim == 0 else out


def joint_categorical(p_x: np.ndarray, p_y_given_x: np.ndarray) -> Categorical:
    """Flatten P_X * P_{Y|X} into a categorical over (x, y) pairs, row-major."""
    p_x = np.asarray(p_x, dtype=np.float64)
    cond = np.asarray(p_y_given_x, dtype=np.float64)
    return Categorical((p_x[:, None] * cond).reshape(-1))


def conditional_kl(p_x: np.ndarray, p_cond: np.ndarray, q_cond: np.ndarray) -> Divergence:
    """E_{x ~ p_x} D_KL(p_cond[x] || q_cond[x]); rows with p_x = 0 are skipped."""
    total = Divergence(0.0)
    for px, pr, qr in zip(np.asarray(p_x), np.asarray(p_cond), np.asarray(q_cond)):
        if px <= 0:
            continue
        d = kl(Categorical(pr), Categorical(qr))
        if d.infinite:
            return Divergence.inf()
        total = total + Divergence(px * d.value)
    return total
