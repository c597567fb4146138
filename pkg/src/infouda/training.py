"""Trainers: ERM, KL-guided marginal alignment, gradient penalty, controlling
label information, and SGLD with gradient-deviation logging.

All trainable weights of the main model live in one flat float64 vector
(encoder first, classifier last) so that Hessian-vector products and SGLD
noise act on a single array.  The auxiliary classifier is a second flat vector
shaped like the classifier block.

Per-step random draws happen in a fixed order, whatever the configuration:
source batch indices, target batch indices, representation noise for the
whole source set, representation noise for the target batch, then SGLD noise
(only when the noise scale is positive).  That ordering is what makes the
reduction properties exact: switching a term's weight to zero never shifts
the random stream.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import (Tensor, as_tensor, getitem, grad, hessian_vector_product, l2_norm_sq, matmul,
                       mul, no_grad, relu, reshape, softmax, softmax_cross_entropy, softplus, sub, tsum, add,
                       logsumexp)
from .estimators import mixture_kl_terms
from .tasks import LabeledSample, TargetEvaluation

SIGMA_FLOOR = 1e-4
LOG_EVERY_STEP_LIMIT = 5000


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"training diverged at step {step}: {what}")


# ----------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    repr_dim: int = 2
    num_classes: int = 2
    hidden: int = 0

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        feat = self.input_dim
        out: list[tuple[str, tuple[int, ...]]] = []
        if self.hidden > 0:
            out += [("enc_hidden_w", (self.input_dim, self.hidden)), ("enc_hidden_b", (self.hidden,))]
            feat = self.hidden
        out += [("enc_mean_w", (feat, self.repr_dim)), ("enc_mean_b", (self.repr_dim,)),
                ("enc_std_w", (feat, self.repr_dim)), ("enc_std_b", (self.repr_dim,)),
                ("cls_w", (self.repr_dim, self.num_classes)), ("cls_b", (self.num_classes,))]
        return out


class EncoderClassifier:
    """Stochastic encoder x -> N(mean(x), diag(std(x)^2)) followed by a linear classifier."""

    def __init__(self, spec: ModelSpec, params: np.ndarray, aux: np.ndarray | None = None):
        self.spec = spec
        self.offsets: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        pos = 0
        for name, shape in spec.layout():
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size, shape)
            pos += size
        self.size = pos
        params = np.array(params, dtype=np.float64)
        if params.shape != (pos,):
            raise ValueError(f"parameter vector must have length {pos}, got {params.shape}")
        self.params = params
        lo = self.offsets["cls_w"][0]
        self.classifier_slice = slice(lo, pos)
        self.aux = self.params[self.classifier_slice].copy() if aux is None else np.array(aux, dtype=np.float64)
        if self.aux.shape != (pos - lo,):
            raise ValueError("auxiliary classifier must match the classifier block")

    @classmethod
    def initialize(cls, spec: ModelSpec, rng: np.random.Generator) -> "EncoderClassifier":
        parts = []
        for name, shape in spec.layout():
            if name.endswith("_b"):
                parts.append(np.zeros(shape).reshape(-1))
            else:
                parts.append((rng.standard_normal(shape) * math.sqrt(1.0 / shape[0])).reshape(-1))
        return cls(spec, np.concatenate(parts))

    def copy(self) -> "EncoderClassifier":
        return EncoderClassifier(self.spec, self.params.copy(), self.aux.copy())

    # differentiable pieces -------------------------------------------------
    def block(self, params: Tensor, name: str) -> Tensor:
        lo, hi, shape = self.offsets[name]
        return reshape(getitem(params, slice(lo, hi)), shape)

    def encode(self, params: Tensor, x) -> tuple[Tensor, Tensor]:
        h = as_tensor(x)
        if self.spec.hidden > 0:
            h = relu(add(matmul(h, self.block(params, "enc_hidden_w")), self.block(params, "enc_hidden_b")))
        mean = add(matmul(h, self.block(params, "enc_mean_w")), self.block(params, "enc_mean_b"))
        pre = add(matmul(h, self.block(params, "enc_std_w")), self.block(params, "enc_std_b"))
        return mean, add(softplus(pre), SIGMA_FLOOR)

    def classifier_logits(self, classifier: Tensor, t) -> Tensor:
        """Logits from a flat classifier block (main or auxiliary)."""
        d, k = self.spec.repr_dim, self.spec.num_classes
        w = reshape(getitem(classifier, slice(0, d * k)), (d, k))
        b = getitem(classifier, slice(d * k, d * k + k))
        return add(matmul(as_tensor(t), w), b)

    def logits(self, params: Tensor, t) -> Tensor:
        return self.classifier_logits(getitem(params, self.classifier_slice), t)

    # numpy conveniences (posterior-mean representation) -----------------------
    def represent(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            mean, _ = self.encode(Tensor(self.params), x)
        return mean.data

    def log_probs(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            z = self.logits(Tensor(self.params), self.represent(x))
            return sub(z, logsumexp(z, axis=1, keepdims=True)).data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.log_probs(x), axis=1)

    def cl_distance(self) -> float:
        diff = self.params[self.classifier_slice] - self.aux
        return float(diff @ diff)


def evaluate(model: EncoderClassifier, sample: LabeledSample) -> tuple[float, float, float]:
    """(0-1 risk, cross-entropy risk, accuracy) with noise-free representations."""
    lp = model.log_probs(sample.x)
    pred = np.argmax(lp, axis=1)
    zero_one = float(np.mean(pred != sample.y))
    ce = float(-np.mean(lp[np.arange(sample.y.size), sample.y]))
    return zero_one, ce, 1.0 - zero_one


# ----------------------------------------------------------------------------
# configuration and logs


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters.  ``sgld_sigma`` is a constant or a per-step sequence
    (the last value repeats); 0 gives plain SGD."""

    lr: float = 0.05
    batch: int = 32
    target_batch: int | None = None
    epochs: int = 10
    gp_weight: float = 0.0
    cl_weight: float = 0.0
    align_fwd: float = 0.0
    align_rev: float = 0.0
    sgld_sigma: float | Sequence[float] = 0.0
    seed: int = 0
    repr_dim: int = 2
    hidden: int = 0
    hvp_mode: str = "fd"
    cl_lr: float | None = None
    soft_pseudo_labels: bool = False
    log_every: int | None = None
    eval_batch: int = 256

    def __post_init__(self):
        for name in ("lr", "gp_weight", "cl_weight", "align_fwd", "align_rev"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        sig = np.atleast_1d(np.asarray(self.sgld_sigma, dtype=np.float64))
        if sig.size == 0 or np.any(sig < 0):
            raise ValueError("sgld_sigma must be nonnegative")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")
        if self.aligning and (self.batch < 2 or (self.target_batch or self.batch) < 2):
            raise ValueError("alignment needs batch sizes >= 2 for the mixture estimator")
        if self.hvp_mode not in ("fd", "exact"):
            raise ValueError("hvp_mode is 'fd' or 'exact'")

    @property
    def aligning(self) -> bool:
        return self.align_fwd > 0 or self.align_rev > 0

    def sigma_at(self, step: int) -> float:
        sig = np.atleast_1d(np.asarray(self.sgld_sigma, dtype=np.float64))
        return float(sig[min(step, sig.size - 1)])


@dataclass
class TrajectoryLog:
    """Per-step learning rate, noise scale, gradient deviation (NaN when not
    logged) and squared norm of the update gradient."""

    lr: list[float] = field(default_factory=list)
    sigma: list[float] = field(default_factory=list)
    deviation: list[float] = field(default_factory=list)
    grad_norm_sq: list[float] = field(default_factory=list)
    base_deviation: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.lr)

    def append(self, lr, sigma, deviation, grad_norm_sq, base_deviation=math.nan):
        self.lr.append(lr)
        self.sigma.append(sigma)
        self.deviation.append(deviation)
        self.grad_norm_sq.append(grad_norm_sq)
        self.base_deviation.append(base_deviation)

    def trajectory_sum(self) -> float:
        """Sum of (lr^2 / sigma^2) * deviation of the applied update gradient."""
        from .bounds import trajectory_sum
        return trajectory_sum(self)[0]

    def base_view(self) -> "TrajectoryLog":
        """Same log with the deviation of the unpenalized loss gradient in place
        of the update gradient."""
        return TrajectoryLog(self.lr, self.sigma, self.base_deviation, self.grad_norm_sq, self.base_deviation)

    def base_trajectory_sum(self) -> float:
        return self.base_view().trajectory_sum()


@dataclass
class TrainResult:
    model: EncoderClassifier
    log: TrajectoryLog
    metrics: list[dict]
    trajectory: list[np.ndarray] | None = None


# ----------------------------------------------------------------------------
# losses and gradients


def cl_penalty(classifier: Tensor, aux) -> Tensor:
    """||W - W_aux||^2 with the auxiliary block treated as a constant."""
    aux_const = aux.data if isinstance(aux, Tensor) else np.asarray(aux, dtype=np.float64)
    return l2_norm_sq(sub(classifier, aux_const))


def penalized_gradient(loss_fn, w: np.ndarray, gp_weight: float, hvp_mode: str = "fd") -> tuple[float, np.ndarray, np.ndarray]:
    """(loss, g, g + 2 gp_weight H g) for the gradient-norm penalty gp_weight ||g||^2."""
    wt = Tensor(w, requires_grad=True)
    out = loss_fn(wt)
    (g,) = grad(out, [wt])
    g = g.data
    if gp_weight == 0.0:
        return out.item(), g, g
    hv = hessian_vector_product(loss_fn, w, g, mode=hvp_mode)
    return out.item(), g, g + 2.0 * gp_weight * hv


class _Objective:
    """Base loss (cross-entropy plus alignment) on a fixed batch and noise draw."""

    def __init__(self, model: EncoderClassifier, cfg: TrainConfig, xs, ys, eps_s, xt, eps_t):
        self.model, self.cfg = model, cfg
        self.xs, self.ys, self.eps_s = xs, ys, eps_s
        self.xt, self.eps_t = xt, eps_t

    def __call__(self, params: Tensor) -> Tensor:
        m, cfg = self.model, self.cfg
        mu_s, sd_s = m.encode(params, self.xs)
        t_s = add(mu_s, mul(sd_s, self.eps_s))
        loss = softmax_cross_entropy(m.logits(params, t_s), self.ys)
        if cfg.aligning:
            mu_t, sd_t = m.encode(params, self.xt)
            fwd, rev = mixture_kl_terms(mu_s, sd_s, mu_t, sd_t, self.eps_s, self.eps_t)
            if cfg.align_fwd > 0:
                loss = add(loss, mul(fwd, cfg.align_fwd))
            if cfg.align_rev > 0:
                loss = add(loss, mul(rev, cfg.align_rev))
        return loss


def update_gradient(model: EncoderClassifier, cfg: TrainConfig, params: np.ndarray, aux: np.ndarray,
                    xs, ys, eps_s, xt, eps_t) -> tuple[float, np.ndarray, np.ndarray]:
    """(loss, base gradient, update gradient).  The update adds the penalty
    curvature term and the pull toward the auxiliary classifier on the
    classifier block."""
    obj = _Objective(model, cfg, xs, ys, eps_s, xt, eps_t)
    loss, base, total = penalized_gradient(obj, params, cfg.gp_weight, cfg.hvp_mode)
    if cfg.cl_weight > 0:
        diff = params[model.classifier_slice] - aux
        total = total.copy()
        total[model.classifier_slice] += 2.0 * cfg.cl_weight * diff
        loss += cfg.cl_weight * float(diff @ diff)
    return loss, base, total


def pseudo_labels(model: EncoderClassifier, params: np.ndarray, t_prime: np.ndarray, soft: bool = False) -> np.ndarray:
    """Hard argmax labels (or soft probabilities) from the main classifier, off tape."""
    with no_grad():
        z = model.logits(Tensor(params), t_prime)
        return softmax(z, axis=1).data if soft else np.argmax(z.data, axis=1)


def cl_update(model: EncoderClassifier, aux: np.ndarray, t_prime: np.ndarray, labels: np.ndarray,
              lr: float) -> tuple[np.ndarray, float]:
    """One gradient step of the auxiliary classifier on target pseudo labels.

    ``labels`` are integer classes or rows of class probabilities.  Only the
    auxiliary block is differentiated; representations are constants.
    Returns the new block and the loss before the step.
    """
    a = Tensor(aux, requires_grad=True)
    z = model.classifier_logits(a, np.asarray(t_prime))
    labels = np.asarray(labels)
    if labels.ndim == 1:
        loss = softmax_cross_entropy(z, labels)
    else:
        logp = sub(z, logsumexp(z, axis=1, keepdims=True))
        loss = mul(tsum(mul(logp, labels)), -1.0 / labels.shape[0])
    (g,) = grad(loss, [a])
    return aux - lr * g.data, loss.item()


# ----------------------------------------------------------------------------
# main loop


def _eval_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    train_seq, eval_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train_seq), np.random.default_rng(eval_seq)


def _jeffrey_on_fixed(model: EncoderClassifier, xs, xt, eps_s, eps_t) -> float:
    with no_grad():
        p = Tensor(model.params)
        mu_s, sd_s = model.encode(p, xs)
        mu_t, sd_t = model.encode(p, xt)
        fwd, rev = mixture_kl_terms(mu_s, sd_s, mu_t, sd_t, eps_s, eps_t)
    return fwd.item() + rev.item()


def train(model: EncoderClassifier, source: LabeledSample, target_inputs: np.ndarray, cfg: TrainConfig,
          target_eval: TargetEvaluation | None = None, record_trajectory: bool = False) -> TrainResult:
    """Run ``cfg.epochs`` epochs of minibatch training.  The model is copied, never mutated."""
    model = model.copy()
    xs_all = np.asarray(source.x, dtype=np.float64)
    ys_all = np.asarray(source.y, dtype=np.int64)
    xt_all = np.asarray(target_inputs, dtype=np.float64)
    n, m = xs_all.shape[0], xt_all.shape[0]
    b = min(cfg.batch, n)
    bt = min(cfg.target_batch or cfg.batch, m)
    if cfg.aligning and (b < 2 or bt < 2):
        raise ValueError("alignment needs at least two points in each batch")
    steps_per_epoch = math.ceil(n / b)
    total_steps = steps_per_epoch * cfg.epochs
    cadence = cfg.log_every or (1 if total_steps <= LOG_EVERY_STEP_LIMIT else 10)
    d = model.spec.repr_dim
    cl_lr = cfg.lr if cfg.cl_lr is None else cfg.cl_lr

    rng, eval_rng = _eval_streams(cfg.seed)
    ke_s, ke_t = min(cfg.eval_batch, n), min(cfg.eval_batch, m)
    ev_xs = xs_all[np.sort(eval_rng.choice(n, ke_s, replace=False))]
    ev_xt = xt_all[np.sort(eval_rng.choice(m, ke_t, replace=False))]
    ev_eps_s = eval_rng.standard_normal((ke_s, d))
    ev_eps_t = eval_rng.standard_normal((ke_t, d))

    log = TrajectoryLog()
    metrics: list[dict] = []
    traj = [model.params.copy()] if record_trajectory else None
    params, aux = model.params, model.aux

    def epoch_metrics(epoch: int, step: int):
        model.params, model.aux = params, aux
        err, ce, _ = evaluate(model, LabeledSample(xs_all, ys_all))
        row = {"epoch": epoch, "step": step, "source_loss": ce, "source_error": err,
               "jeffrey": _jeffrey_on_fixed(model, ev_xs, ev_xt, ev_eps_s, ev_eps_t) if ke_s >= 2 and ke_t >= 2
               else math.nan,
               "cl_distance": model.cl_distance(),
               "trajectory_sum": _partial_sum(log)}
        if target_eval is not None:
            row["target_error"] = target_eval.error(model.predict)
            row["target_accuracy"] = 1.0 - row["target_error"]
        metrics.append(row)

    epoch_metrics(0, 0)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(steps_per_epoch):
            src_idx = np.sort(rng.choice(n, b, replace=False))
            tgt_idx = np.sort(rng.choice(m, bt, replace=False))
            eps_full = rng.standard_normal((n, d))
            eps_t = rng.standard_normal((bt, d))
            xb, yb, eb = xs_all[src_idx], ys_all[src_idx], eps_full[src_idx]
            xtb = xt_all[tgt_idx]
            sigma = cfg.sigma_at(step)

            try:
                loss, g_base, g_update = update_gradient(model, cfg, params, aux, xb, yb, eb, xtb, eps_t)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            if not math.isfinite(loss) or not np.all(np.isfinite(g_update)):
                raise TrainingDiverged(step, f"loss {loss}")
            if step % cadence == 0:
                if b == n:
                    deviation = base_dev = 0.0
                else:
                    _, base_full, g_full = update_gradient(model, cfg, params, aux, xs_all, ys_all, eps_full,
                                                           xtb, eps_t)
                    deviation = float(np.sum((g_update - g_full) ** 2))
                    base_dev = float(np.sum((g_base - base_full) ** 2))
            else:
                deviation = base_dev = math.nan
            log.append(cfg.lr, sigma, deviation, float(g_update @ g_update), base_dev)

            new_params = params - cfg.lr * g_update
            if sigma > 0:
                new_params = new_params + sigma * rng.standard_normal(params.shape)
            if cfg.cl_weight > 0:
                with no_grad():
                    mu_t, sd_t = model.encode(Tensor(params), xtb)
                    t_prime = mu_t.data + sd_t.data * eps_t
                labels = pseudo_labels(model, params, t_prime, cfg.soft_pseudo_labels)
                aux, _ = cl_update(model, aux, t_prime, labels, cl_lr)
            params = new_params
            if not np.all(np.isfinite(params)):
                raise TrainingDiverged(step, "non-finite weights")
            step += 1
            if traj is not None:
                traj.append(params.copy())
        epoch_metrics(epoch, step)
    model.params, model.aux = params, aux
    return TrainResult(model, log, metrics, traj)


def _partial_sum(log: TrajectoryLog) -> float:
    if len(log) == 0:
        return 0.0
    lr = np.asarray(log.lr)
    sig = np.asarray(log.sigma)
    dev = np.asarray(log.deviation)
    ok = ~np.isnan(dev) & (sig > 0)
    if not ok.any():
        return math.nan
    return float(np.mean(lr[ok] ** 2 / sig[ok] ** 2 * dev[ok]) * len(log))


def method_config(method: str, base: TrainConfig, gp_weight: float = 0.1, cl_weight: float = 0.01,
                  align: float = 1.0) -> TrainConfig:
    """Named methods: erm, erm-gp, kl, kl-gp, kl-cl, erm-cl."""
    table = {
        "erm": dict(gp_weight=0.0, cl_weight=0.0, align_fwd=0.0, align_rev=0.0),
        "erm-gp": dict(gp_weight=gp_weight, cl_weight=0.0, align_fwd=0.0, align_rev=0.0),
        "erm-cl": dict(gp_weight=0.0, cl_weight=cl_weight, align_fwd=0.0, align_rev=0.0),
        "kl": dict(gp_weight=0.0, cl_weight=0.0, align_fwd=align, align_rev=align),
        "kl-gp": dict(gp_weight=gp_weight, cl_weight=0.0, align_fwd=align, align_rev=align),
        "kl-cl": dict(gp_weight=0.0, cl_weight=cl_weight, align_fwd=align, align_rev=align),
    }
    if method not in table:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(table)}")
    return replace(base, **table[method])


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = "infouda-checkpoint 1"


def save_checkpoint(path: str | os.PathLike, model: EncoderClassifier, seed: int, step: int) -> None:
    """Text header (magic, seed, step, spec, one line per block) then raw float64 weights."""
    s = model.spec
    lines = [CHECKPOINT_MAGIC, f"seed {seed}", f"step {step}",
             f"spec {s.input_dim} {s.repr_dim} {s.num_classes} {s.hidden}"]
    for name, (lo, hi, shape) in model.offsets.items():
        lines.append(f"param {name} {' '.join(map(str, shape))}")
    lines.append(f"param aux {model.aux.size}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(model.params.astype("<f8").tobytes())
        fh.write(model.aux.astype("<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[EncoderClassifier, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    split = raw.find(b"\n\n")
    if split < 0:
        raise ValueError("checkpoint header is not terminated by a blank line")
    lines = raw[:split].decode("ascii").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint: first line {lines[0]!r}")
    seed = int(lines[1].split()[1])
    step = int(lines[2].split()[1])
    spec = ModelSpec(*map(int, lines[3].split()[1:]))
    payload = np.frombuffer(raw[split + 2:], dtype="<f8")
    probe = EncoderClassifier.initialize(spec, np.random.default_rng(0))
    if payload.size != probe.size + probe.aux.size:
        raise ValueError(f"checkpoint payload has {payload.size} values, expected {probe.size + probe.aux.size}")
    model = EncoderClassifier(spec, payload[:probe.size].copy(), payload[probe.size:].copy())
    return model, seed, step
