"""Right-hand sides of the domain-adaptation generalization bounds.

Naming: ``kl_tgt_src`` is D(target || source) and ``kl_src_tgt`` is
D(source || target), always on the joint over (input, label) unless the name
says ``inputs``.  ``R`` is a subgaussian constant of the loss, ``M`` its upper
bound; with only ``M`` given, ``R = M / 2``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

EXACT_TOL = 1e-9

CSV_FIELDS = ("name", "lhs", "rhs", "slack", "valid", "flags", "ingredients")


@dataclass(frozen=True)
class BoundReport:
    """One inequality ``lhs <= rhs``.

    ``valid`` is None when no left-hand side was supplied.  The tolerance is
    ``EXACT_TOL`` for an exactly computed lhs and two standard errors for a
    sampled one.
    """

    name: str
    lhs: float
    rhs: float
    ingredients: dict = field(default_factory=dict)
    valid: bool | None = None
    slack: float = math.nan
    flags: tuple[str, ...] = ()
    tolerance: float = EXACT_TOL

    @classmethod
    def make(cls, name: str, lhs, rhs: float, ingredients=None, flags: Iterable[str] = (),
             stderr: float | None = None) -> "BoundReport":
        rhs = float(rhs)
        if math.isnan(rhs) or rhs < 0:
            raise ValueError(f"{name}: right-hand side must be a nonnegative number, got {rhs}")
        tol = EXACT_TOL if stderr is None else max(2.0 * float(stderr), EXACT_TOL)
        if lhs is None or (isinstance(lhs, float) and math.isnan(lhs)):
            return cls(name, math.nan, rhs, dict(ingredients or {}), None, math.nan, tuple(flags), tol)
        lhs = float(lhs)
        return cls(name, lhs, rhs, dict(ingredients or {}), bool(lhs <= rhs + tol), rhs - lhs,
                   tuple(flags), tol)

    def row(self) -> dict:
        ingredients = ";".join(f"{k}={_num(v)}" for k, v in self.ingredients.items())
        valid = "" if self.valid is None else str(self.valid).lower()
        return {"name": self.name, "lhs": _num(self.lhs), "rhs": _num(self.rhs), "slack": _num(self.slack),
                "valid": valid, "flags": "|".join(self.flags), "ingredients": ingredients}


def _num(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def reports_to_csv(reports: Iterable[BoundReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def reports_from_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def _check(name: str, value) -> float | None:
    if value is None:
        return None
    value = float(value)
    if math.isnan(value) or value < 0:
        raise ValueError(f"ingredient {name} must be nonnegative, got {value}")
    return value


def _sqrt(x: float) -> float:
    return math.sqrt(x) if math.isfinite(x) else math.inf


def resolve_subgaussian(subgaussian: float | None, loss_bound: float | None,
                        evidence: str | None) -> tuple[float | None, tuple[str, ...]]:
    """The subgaussian constant to use and any flags it earns."""
    if subgaussian is None:
        return (None if loss_bound is None else loss_bound / 2.0), ()
    if evidence is None and (loss_bound is None or subgaussian < loss_bound / 2.0):
        return subgaussian, ("unverified-R",)
    return subgaussian, ()


def tv_kl_cap(kl: float) -> float:
    """min(sqrt(kl / 2), sqrt(1 - exp(-kl))), the Pinsker and Bretagnolle-Huber caps on TV."""
    if math.isinf(kl):
        return 1.0
    return min(math.sqrt(kl / 2.0), math.sqrt(-math.expm1(-kl)))


def pp_bounds(*, lhs_abs: float | None = None, lhs_signed: float | None = None,
              subgaussian: float | None = None, loss_bound: float | None = None,
              kl_tgt_src: float | None = None, kl_src_tgt: float | None = None,
              kl_inputs_tgt_src: float | None = None, kl_labels_tgt_src: float | None = None,
              wasserstein: float | None = None, beta: float | None = None,
              tv: float | None = None, lambda_star: float | None = None,
              wasserstein_inputs: float | None = None, lipschitz: float | None = None,
              dis: float | None = None, evidence: str | None = None,
              heuristic_beta: bool = False, stderr: float | None = None) -> list[BoundReport]:
    """Every population-to-population bound whose ingredients are present.

    ``lhs_abs`` is max |R_target(w) - R_source(w)| (or the value for one w);
    ``lhs_signed`` is the signed gap, used by the one-sided bounds that add
    ``lambda_star``.  ``dis`` is the disagreement gap, checked against the
    input-marginal KL.
    """
    names = ("kl_tgt_src", "kl_src_tgt", "kl_inputs_tgt_src", "kl_labels_tgt_src", "wasserstein", "beta",
             "tv", "lambda_star", "wasserstein_inputs", "lipschitz", "dis", "loss_bound", "subgaussian")
    vals = dict(zip(names, (kl_tgt_src, kl_src_tgt, kl_inputs_tgt_src, kl_labels_tgt_src, wasserstein, beta,
                            tv, lambda_star, wasserstein_inputs, lipschitz, dis, loss_bound, subgaussian)))
    for k, v in vals.items():
        vals[k] = _check(k, v)
    r, r_flags = resolve_subgaussian(vals["subgaussian"], vals["loss_bound"], evidence)
    big_m = vals["loss_bound"]
    beta_flags = ("heuristic-β",) if heuristic_beta else ()
    out: list[BoundReport] = []

    def emit(name, lhs, rhs, ingredients, flags=()):
        out.append(BoundReport.make(name, lhs, rhs, ingredients, flags, stderr))

    kts, kst = vals["kl_tgt_src"], vals["kl_src_tgt"]
    kin = vals["kl_inputs_tgt_src"]
    if r is not None and kts is not None:
        emit("pp_subgaussian_kl", lhs_abs, _sqrt(2 * r * r * kts), {"R": r, "kl_tgt_src": kts}, r_flags)
    if big_m is not None and kin is not None and vals["kl_labels_tgt_src"] is not None:
        total = kin + vals["kl_labels_tgt_src"]
        emit("pp_bounded_chain_kl", lhs_abs, big_m / math.sqrt(2) * _sqrt(total),
             {"M": big_m, "kl_inputs_tgt_src": kin, "kl_labels_tgt_src": vals["kl_labels_tgt_src"]})
    if big_m is not None and kts is not None and kst is not None:
        ing = {"M": big_m, "kl_tgt_src": kts, "kl_src_tgt": kst}
        emit("pp_bounded_min_kl", lhs_abs, big_m / math.sqrt(2) * _sqrt(min(kts, kst)), ing)
        emit("pp_bounded_jeffrey", lhs_abs, big_m / 2 * _sqrt(kts + kst), ing)
    if r is not None and kin is not None and vals["lambda_star"] is not None:
        lam = vals["lambda_star"]
        emit("pp_inputs_kl_plus_lambda", lhs_signed, _sqrt(2 * r * r * kin) + lam,
             {"R": r, "kl_inputs_tgt_src": kin, "lambda_star": lam}, r_flags)
    if r is not None and kin is not None and vals["dis"] is not None:
        emit("pp_disagreement_kl", vals["dis"], _sqrt(2 * r * r * kin), {"R": r, "kl_inputs_tgt_src": kin},
             r_flags)
    if vals["beta"] is not None and vals["wasserstein"] is not None:
        emit("pp_wasserstein", lhs_abs, vals["beta"] * vals["wasserstein"],
             {"beta": vals["beta"], "wasserstein": vals["wasserstein"]}, beta_flags)
    if big_m is not None and vals["tv"] is not None:
        emit("pp_total_variation", lhs_abs, big_m * vals["tv"], {"M": big_m, "tv": vals["tv"]})
    if big_m is not None and kts is not None:
        emit("pp_tv_kl_caps", lhs_abs, big_m * tv_kl_cap(kts), {"M": big_m, "kl_tgt_src": kts})
    if vals["lipschitz"] is not None and vals["wasserstein_inputs"] is not None and vals["lambda_star"] is not None:
        lam = vals["lambda_star"]
        emit("pp_inputs_wasserstein_plus_lambda", lhs_signed,
             vals["lipschitz"] * vals["wasserstein_inputs"] + lam,
             {"lipschitz": vals["lipschitz"], "wasserstein_inputs": vals["wasserstein_inputs"],
              "lambda_star": lam}, beta_flags)
    return out


def pp_sandwich(subgaussian: float, kl_tgt_src_raw: float, kl_tgt_src_repr: float,
                source_risk: float) -> tuple[float, float]:
    """Lower and upper limits on the target risk of a hypothesis that factors
    through a representation.  The lower limit is not clamped at zero."""
    r = _check("subgaussian", subgaussian)
    raw = _check("kl_tgt_src_raw", kl_tgt_src_raw)
    rep = _check("kl_tgt_src_repr", kl_tgt_src_repr)
    return source_risk - _sqrt(2 * r * r * raw), source_risk + _sqrt(2 * r * r * rep)


def trajectory_sum(log) -> tuple[float, tuple[str, ...]]:
    """sum_t (lr_t^2 / sigma_t^2) v_t over the whole run.

    Steps whose deviation was not logged (NaN) are filled with the average of
    the logged terms, and the result carries a ``subsampled-v`` flag.
    """
    lr = np.asarray(log.lr, dtype=np.float64)
    sigma = np.asarray(log.sigma, dtype=np.float64)
    dev = np.asarray(log.deviation, dtype=np.float64)
    if not (lr.shape == sigma.shape == dev.shape):
        raise ValueError("trajectory log columns have different lengths")
    if lr.size == 0:
        return 0.0, ()
    if np.any(sigma <= 0):
        first = int(np.flatnonzero(sigma <= 0)[0])
        raise ValueError(f"trajectory bound undefined without noise: sigma is {sigma[first]} at step {first}")
    logged = ~np.isnan(dev)
    if not logged.any():
        raise ValueError("no gradient-deviation values were logged")
    terms = lr[logged] ** 2 / sigma[logged] ** 2 * dev[logged]
    if logged.all():
        return float(terms.sum()), ()
    return float(terms.mean() * lr.size), ("subsampled-v",)


def ep_trajectory_bound(subgaussian: float, n: int, kl_src_tgt: float, log,
                        lhs: float | None = None, stderr: float | None = None) -> BoundReport:
    """Bound on |Err| for a noisy iterative algorithm from its logged trajectory."""
    r = _check("subgaussian", subgaussian)
    kl = _check("kl_src_tgt", kl_src_tgt)
    if n < 1:
        raise ValueError("source sample size must be positive")
    total, flags = trajectory_sum(log)
    rhs = _sqrt(r * r / n * total) + _sqrt(2 * r * r * kl)
    return BoundReport.make("ep_trajectory", lhs, rhs,
                            {"R": r, "n": n, "kl_src_tgt": kl, "trajectory_sum": total}, flags, stderr)
