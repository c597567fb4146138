"""Synthetic domain-adaptation tasks, micro-world presets and IDX file I/O.

Every generator returns a :class:`DomainPair`.  Drawing data from it yields a
:class:`TaskData` whose target side is split in two: ``target_inputs`` (a plain
array a trainer may consume) and ``target_eval`` (a :class:`TargetEvaluation`
that keeps the labels private and only answers scoring queries).
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .oracle import MicroWorld

SamplerFn = Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.x.shape[0]} inputs but {self.y.shape[0]} labels")

    def __len__(self):
        return self.x.shape[0]


class TargetEvaluation:
    """Scoring access to held-out target labels.

    The labels are not exposed as an attribute; callers pass a prediction
    function and receive aggregate metrics.
    """

    __slots__ = ("_x", "_y")

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self._x = x
        self._y = y

    def __len__(self):
        return self._x.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        return self._x

    def error(self, predict: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.mean(np.asarray(predict(self._x)) != self._y))

    def accuracy(self, predict: Callable[[np.ndarray], np.ndarray]) -> float:
        return 1.0 - self.error(predict)

    def cross_entropy(self, log_probs: Callable[[np.ndarray], np.ndarray]) -> float:
        lp = np.asarray(log_probs(self._x))
        return float(-np.mean(lp[np.arange(self._y.size), self._y]))


@dataclass(frozen=True)
class TaskData:
    source: LabeledSample
    target_inputs: np.ndarray
    target_eval: TargetEvaluation
    source_test: LabeledSample | None = None


@dataclass(frozen=True)
class DomainPair:
    """Source and target samplers plus whatever divergences are known in closed form.

    ``true_kl_tgt_src`` is D(target joint || source joint); ``true_tv`` is the
    total variation between the joints.  ``class_means`` and ``sigma`` describe
    isotropic two-class Gaussian tasks for exact risk computation.
    """

    name: str
    sample_source: SamplerFn
    sample_target: SamplerFn
    dim: int
    num_classes: int
    true_kl_tgt_src: float | None = None
    true_kl_src_tgt: float | None = None
    true_kl_inputs_tgt_src: float | None = None
    true_tv: float | None = None
    metadata: dict = field(default_factory=dict)

    def draw(self, n_source: int, n_target: int, n_test: int, rng: np.random.Generator) -> TaskData:
        """Labelled source set, unlabelled target inputs, and a held-out target
        evaluation set, in that RNG order."""
        xs, ys = self.sample_source(n_source, rng)
        xt, _ = self.sample_target(n_target, rng)
        xe, ye = self.sample_target(n_test, rng)
        return TaskData(LabeledSample(xs, ys), xt, TargetEvaluation(xe, ye))


def _gaussian_sampler(means: np.ndarray, sigma: float, priors: np.ndarray,
                      flip_prob: float = 0.0, transform: np.ndarray | None = None) -> SamplerFn:
    means = np.array(means, dtype=np.float64)
    priors = np.array(priors, dtype=np.float64)

    def sample(k: int, rng: np.random.Generator):
        y = rng.choice(priors.size, size=k, p=priors)
        x = means[y] + sigma * rng.standard_normal((k, means.shape[1]))
        if transform is not None:
            x = x @ transform.T
        if flip_prob > 0:
            flips = rng.random(k) < flip_prob
            y = np.where(flips, (y + 1) % priors.size, y)
        return x, y.astype(np.int64)

    return sample


def _check_priors(priors, k=2) -> np.ndarray:
    p = np.asarray(priors, dtype=np.float64)
    if p.shape != (k,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"class priors must be a probability vector of length {k}")
    return p


def _shift_kl(priors, shifts, sigma) -> float:
    return float(sum(p * np.dot(s, s) for p, s in zip(priors, shifts)) / (2 * sigma ** 2))


def _shift_tv(priors, shifts, sigma) -> float:
    # TV between two isotropic Gaussians with equal covariance: 2 Phi(|d| / 2 sigma) - 1
    return float(sum(p * (2 * norm.cdf(np.linalg.norm(s) / (2 * sigma)) - 1) for p, s in zip(priors, shifts)))


def gaussian_shift_task(d: int = 2, delta=1.0, sigma: float = 1.0, class_priors=(0.5, 0.5),
                        separation: float = 1.0) -> DomainPair:
    """Two classes N(+-separation * e1, sigma^2 I); the target moves both means by ``delta``.

    A scalar ``delta`` is a shift of that length along e2 (orthogonal to the
    class axis, so the input marginals are exact translates and their KL equals
    the joint KL).  A vector ``delta`` is used as given.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    priors = _check_priors(class_priors)
    if np.ndim(delta) == 0:
        if d < 2 and delta != 0:
            raise ValueError("a scalar shift needs d >= 2 (it is applied along the second axis)")
        shift = np.zeros(d)
        if d >= 2:
            shift[1] = float(delta)
    else:
        shift = np.asarray(delta, dtype=np.float64)
        if shift.shape != (d,):
            raise ValueError(f"shift vector must have length {d}")
    means = np.zeros((2, d))
    means[0, 0], means[1, 0] = -separation, separation
    kl_val = _shift_kl(priors, [shift, shift], sigma)
    orthogonal = abs(shift[0]) == 0.0
    return DomainPair(
        name="gaussian_shift",
        sample_source=_gaussian_sampler(means, sigma, priors),
        sample_target=_gaussian_sampler(means + shift, sigma, priors),
        dim=d,
        num_classes=2,
        true_kl_tgt_src=kl_val,
        true_kl_src_tgt=kl_val,
        true_kl_inputs_tgt_src=kl_val if orthogonal else None,
        true_tv=_shift_tv(priors, [shift, shift], sigma),
        metadata={"sigma": sigma, "priors": priors, "source_means": means, "target_means": means + shift,
                  "shift": shift},
    )


def rotation_matrix(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def rotated_gaussians_task(angle: float, sigma: float = 1.0, separation: float = 1.0,
                           class_priors=(0.5, 0.5)) -> DomainPair:
    """Two classes N(+-(separation, 0), sigma^2 I); target inputs rotated by ``angle`` degrees."""
    if not 0.0 <= angle <= 90.0:
        raise ValueError("angle must lie in [0, 90] degrees")
    return label_flip_task(angle, 0.0, sigma=sigma, separation=separation, class_priors=class_priors)


def label_flip_task(angle: float, flip_prob: float, flip_domain: str = "target", sigma: float = 1.0,
                    separation: float = 1.0, class_priors=(0.5, 0.5)) -> DomainPair:
    """Rotated Gaussians whose labels in one domain are flipped with probability ``flip_prob``.

    Flipping target labels makes the joint optimal risk positive; flipping
    source labels produces noisy supervision.  Closed-form divergences are
    reported only when no flip is applied.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip probability must lie in [0, 1]")
    if flip_domain not in ("source", "target"):
        raise ValueError("flip_domain is 'source' or 'target'")
    priors = _check_priors(class_priors)
    means = np.array([[-separation, 0.0], [separation, 0.0]])
    rot = rotation_matrix(angle)
    tgt_means = means @ rot.T
    shifts = list(tgt_means - means)
    exact = flip_prob == 0.0
    kl_val = _shift_kl(priors, shifts, sigma) if exact else None
    src_flip = flip_prob if flip_domain == "source" else 0.0
    tgt_flip = flip_prob if flip_domain == "target" else 0.0
    return DomainPair(
        name="rotated_gaussians" if exact else "label_flip",
        sample_source=_gaussian_sampler(means, sigma, priors, src_flip),
        sample_target=_gaussian_sampler(means, sigma, priors, tgt_flip, transform=rot),
        dim=2,
        num_classes=2,
        true_kl_tgt_src=kl_val,
        true_kl_src_tgt=kl_val,
        true_tv=_shift_tv(priors, shifts, sigma) if exact else None,
        metadata={"sigma": sigma, "priors": priors, "source_means": means, "target_means": tgt_means,
                  "angle": angle, "flip_prob": flip_prob, "flip_domain": flip_domain},
    )


def linear_classifier_risk(pair: DomainPair, weight, bias: float, domain: str = "source") -> float:
    """Exact 0-1 risk of ``predict = 1[w.x + b > 0]`` on an isotropic two-class
    Gaussian task, including any label flipping in that domain."""
    if "source_means" not in pair.metadata:
        raise ValueError(f"task {pair.name!r} has no closed-form class conditionals")
    w = np.asarray(weight, dtype=np.float64)
    scale = pair.metadata["sigma"] * np.linalg.norm(w)
    means = pair.metadata["source_means" if domain == "source" else "target_means"]
    priors = pair.metadata["priors"]
    flip = pair.metadata.get("flip_prob", 0.0) if pair.metadata.get("flip_domain") == domain else 0.0
    risk = 0.0
    for y, (p, m) in enumerate(zip(priors, means)):
        score = float(w @ m + bias)
        p_one = norm.cdf(score / scale) if scale > 0 else float(score > 0)
        wrong_clean = p_one if y == 0 else 1.0 - p_one
        risk += p * ((1 - flip) * wrong_clean + flip * (1 - wrong_clean))
    return float(risk)


def projected_kl(pair: DomainPair, weight) -> float:
    """D(target || source) after pushing both joints through t = w.x."""
    w = np.asarray(weight, dtype=np.float64)
    if pair.true_kl_tgt_src is None:
        raise ValueError("projected KL needs an unflipped Gaussian task")
    sigma = pair.metadata["sigma"]
    shifts = pair.metadata["target_means"] - pair.metadata["source_means"]
    return float(sum(p * float(w @ s) ** 2 for p, s in zip(pair.metadata["priors"], shifts))
                 / (2 * sigma ** 2 * float(w @ w)))


# ----------------------------------------------------------------------------
# micro-world presets


def preset_world(name: str, **overrides) -> MicroWorld:
    """Named finite worlds used in tests and the ``oracle`` subcommand."""
    half = np.array([[0.5, 0.0], [0.0, 0.5]])
    presets = {
        # data-ignoring uniform kernel with identical domains
        "independence": dict(mu=np.full((2, 2), 0.25), mu_prime=np.full((2, 2), 0.25), n=1, m=1,
                             algorithm="gibbs", gamma=0.0),
        # labels y = x, same domain, ERM
        "realizable": dict(mu=half, mu_prime=half, n=1, m=1, algorithm="erm"),
        # target flips the label of x = 1 with probability 0.5
        "half_flip": dict(mu=half, mu_prime=np.array([[0.5, 0.0], [0.25, 0.25]]), n=1, m=1, algorithm="erm"),
        # shifted input marginal, Gibbs learner that also sees the target inputs
        "shifted_gibbs": dict(mu=np.array([[0.3, 0.1], [0.1, 0.2], [0.05, 0.25]]),
                              mu_prime=np.array([[0.1, 0.05], [0.15, 0.2], [0.1, 0.4]]),
                              n=2, m=2, algorithm="gibbs", gamma=1.0, target_weight=0.5),
    }
    if name not in presets:
        raise KeyError(f"unknown world preset {name!r}; choose from {sorted(presets)}")
    cfg = dict(presets[name])
    cfg.update(overrides)
    return MicroWorld(**cfg)


# ----------------------------------------------------------------------------
# IDX files


IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
             0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


def idx_decode(raw: bytes, rescale: bool | None = None) -> np.ndarray:
    """Parse IDX bytes.  Only unsigned-byte payloads are accepted.

    ``rescale`` maps pixels to [0, 1]; by default it applies to arrays with
    more than one dimension (images) and not to 1-D label files.
    """
    if len(raw) < 4:
        raise IdxFormatError(f"file has {len(raw)} bytes, header needs 4", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"bad magic bytes {raw[0]:#04x} {raw[1]:#04x}, expected 0x00 0x00", 0)
    code, ndim = raw[2], raw[3]
    if code not in IDX_TYPES:
        raise IdxFormatError(f"unknown element type {code:#04x}", 2)
    if code != 0x08:
        raise IdxFormatError(f"element type {code:#04x} is not unsigned byte (0x08)", 2)
    if ndim == 0:
        raise IdxFormatError("zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"header needs {header} bytes for {ndim} dimensions, file has {len(raw)}",
                             len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        kind = "truncated payload" if len(raw) < expected else "trailing bytes after payload"
        raise IdxFormatError(f"{kind}: dimensions {dims} need {expected} bytes, file has {len(raw)}",
                             min(len(raw), expected))
    arr = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    if rescale is None:
        rescale = ndim > 1
    return arr.astype(np.float64) / 255.0 if rescale else arr.copy()


def idx_read(path: str | os.PathLike, rescale: bool | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        return idx_decode(fh.read(), rescale)


def idx_encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"IDX writer accepts uint8 arrays only, got {arr.dtype}")
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError("IDX arrays need between 1 and 255 dimensions")
    head = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def idx_write(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(idx_encode(arr))
