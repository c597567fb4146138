"""Acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line to ``RESULTS``; ``conftest.py`` prints them
at the end of the pytest run, and ``python3 tests/test_acceptance.py`` runs
them without pytest.
"""
import math
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from infouda import autodiff as ad
from infouda.autodiff import Tensor, grad, hessian_vector_product
from infouda.bounds import pp_bounds, pp_sandwich, tv_kl_cap
from infouda.distributions import Categorical, kl, tv
from infouda.estimators import (SampleBatch, discrete_metric, dv_lower_bound, empirical_kl_convergence,
                                raw_input_kl, wasserstein_discrete)
from infouda.harness import TaskSpec, TrainerSpec, analytic_pp_reports, draw_task, load_config, train_method
from infouda.oracle import (MicroWorld, ce_decomposition, enumerate_world, pseudo_label_diagnostic, random_world,
                            verify_ep_bounds)
from infouda.tasks import LabeledSample, gaussian_shift_task, linear_classifier_risk, projected_kl, \
    rotated_gaussians_task
from infouda.training import EncoderClassifier, ModelSpec, TrainConfig, method_config, train

sys.path.insert(0, str(Path(__file__).parent))
from oracles import brute_force_err, central_difference  # noqa: E402
from test_autodiff import random_graph  # noqa: E402

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
RESULTS: list[str] = []


def record(number: int, title: str, passed: bool, elapsed: float, limit: float | None, detail: str) -> bool:
    in_time = limit is None or elapsed < limit
    ok = bool(passed and in_time)
    budget = f" (limit {limit:.0f} s)" if limit is not None else ""
    RESULTS.append(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}; "
                   f"{elapsed:.1f} s{budget}")
    print(RESULTS[-1])
    return ok


def test_criterion_01_autodiff():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        size = int(rng.integers(2, 6))
        fn = random_graph(rng, size)
        x = rng.standard_normal(size)
        w = Tensor(x, requires_grad=True)
        (g,) = grad(fn(w), [w])
        ref = central_difference(lambda v: fn(Tensor(v)).item(), x)
        worst = max(worst, np.linalg.norm(g.data - ref) / max(np.linalg.norm(ref), 1e-8))
    hvp_worst = 0.0
    for _ in range(50):
        k = int(rng.integers(2, 7))
        a = rng.standard_normal((k, k))
        hess = a @ a.T
        lin = rng.standard_normal(k)

        def quad(p, hess=hess, lin=lin, k=k):
            hp = ad.reshape(ad.matmul(ad.reshape(p, (1, k)), Tensor(hess)), (k,))
            return ad.add(ad.mul(ad.tsum(ad.mul(p, hp)), 0.5), ad.tsum(ad.mul(p, lin)))

        x, v = rng.standard_normal(k), rng.standard_normal(k)
        exact = hessian_vector_product(quad, x, v, "exact")
        fd = hessian_vector_product(quad, x, v, "fd")
        hvp_worst = max(hvp_worst, np.linalg.norm(exact - fd) / max(np.linalg.norm(exact), 1e-12))
    ok = record(1, "autodiff", worst < 1e-4 and hvp_worst < 1e-3, time.perf_counter() - t0, 10,
                f"worst gradient rel err {worst:.2e} (< 1e-4), worst HVP exact-vs-fd {hvp_worst:.2e} (< 1e-3)")
    assert ok


def test_criterion_02_divergence_inequalities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    bad = {"pinsker": 0, "bretagnolle_huber": 0, "wasserstein_tv": 0, "dv": 0}
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        p_raw, q_raw = rng.dirichlet(np.ones(k) * 0.7), rng.dirichlet(np.ones(k) * 0.7)
        if rng.random() < 0.2:  # some pairs with missing support
            q_raw[rng.integers(k)] = 0.0
            q_raw /= q_raw.sum()
        p, q = Categorical(p_raw), Categorical(q_raw)
        d, t = float(kl(p, q)), tv(p, q)
        bad["pinsker"] += t > math.sqrt(d / 2) + 1e-10
        bad["bretagnolle_huber"] += t > math.sqrt(-math.expm1(-d)) + 1e-10 if math.isfinite(d) else 0
        bad["wasserstein_tv"] += abs(wasserstein_discrete(p, q, discrete_metric(k)) - t) > 1e-10
        f = rng.normal(0, 2, k)
        dv = dv_lower_bound(lambda x, f=f: f[x[:, 0].astype(int)], SampleBatch.from_categorical(p),
                            SampleBatch.from_categorical(q))
        bad["dv"] += dv > d + 1e-9
    ok = record(2, "divergence inequalities", sum(bad.values()) == 0, time.perf_counter() - t0, 30,
                "violations over 1000 pairs " + ", ".join(f"{k}={v}" for k, v in bad.items()))
    assert ok


def test_criterion_03_estimator_calibration():
    t0 = time.perf_counter()
    pair = gaussian_shift_task(d=2, delta=1.0, sigma=1.0)
    rng = np.random.default_rng(103)
    fwd, rev = [], []
    for _ in range(20):
        xs, _ = pair.sample_source(512, rng)
        xt, _ = pair.sample_target(512, rng)
        f, r = raw_input_kl(xs, xt, rng)
        fwd.append(f)
        rev.append(r)
    rel_f, rel_r = abs(np.mean(fwd) - 0.5) / 0.5, abs(np.mean(rev) - 0.5) / 0.5
    ok = record(3, "estimator calibration", rel_f < 0.25 and rel_r < 0.25, time.perf_counter() - t0, 60,
                f"batch 512 x 20 draws: fwd {np.mean(fwd):.4f} (rel {rel_f:.3f}), rev {np.mean(rev):.4f} "
                f"(rel {rel_r:.3f}), threshold 0.25")
    assert ok


def _acceptance_worlds():
    rng = np.random.default_rng(104)
    return [random_world(rng) for _ in range(200)]


def test_criterion_04_exact_ep_bounds():
    t0 = time.perf_counter()
    violations, worst_gap, names = 0, 0.0, set()
    for w in _acceptance_worlds():
        q = enumerate_world(w)
        for r in verify_ep_bounds(q, w):
            names.add(r.name)
            violations += not (r.lhs <= r.rhs + 1e-9)
        worst_gap = max(worst_gap, q.chain_rule_gap())
    rng = np.random.default_rng(1040)
    worst_err = 0.0
    for _ in range(20):
        w = random_world(rng, algorithm="erm")
        w = MicroWorld(w.mu, w.mu_prime, n=min(w.n, 2), m=w.m)
        ref = brute_force_err(w.mu.tolist(), w.mu_prime.tolist(), w.n, w.m)
        worst_err = max(worst_err, abs(enumerate_world(w).err - ref))
    ok = record(4, "exact EP bounds", violations == 0 and worst_gap < 1e-9 and worst_err < 1e-12,
                time.perf_counter() - t0, 300,
                f"200 worlds x {len(names)} bounds, {violations} violations; chain-rule gap {worst_gap:.1e}; "
                f"brute-force Err max diff {worst_err:.1e} on 20 worlds")
    assert ok


def test_criterion_05_decompositions():
    t0 = time.perf_counter()
    rng = np.random.default_rng(105)
    worst_ce, worst_pl = 0.0, 0.0
    for w in _acceptance_worlds():
        q = enumerate_world(w)
        rep = rng.integers(0, 2, size=w.n_x)
        rep[0] = 0
        cls = rng.dirichlet(np.ones(w.n_y), size=(w.n_w, int(rep.max()) + 1))
        worst_ce = max(worst_ce, abs(ce_decomposition(w, rep, cls, q=q).residual))
        d = pseudo_label_diagnostic(w, rep)
        if math.isfinite(d.kl_joint):
            worst_pl = max(worst_pl, abs(d.kl_joint - d.kl_marginal - d.kl_conditional))
    half = np.array([[0.5, 0.0], [0.0, 0.5]])
    flip = MicroWorld(half, np.array([[0.5, 0.0], [0.5, 0.0]]))
    inf_case = pseudo_label_diagnostic(flip, np.array([0, 1]), classifier=np.eye(2))
    certified = inf_case.conditional_infinite and math.isinf(inf_case.kl_joint)
    ok = record(5, "cross-entropy and pseudo-label identities", worst_ce < 1e-9 and worst_pl < 1e-9 and certified,
                time.perf_counter() - t0, None,
                f"CE residual {worst_ce:.1e}, joint-KL identity {worst_pl:.1e} over 200 worlds; "
                f"infinite conditional term certified: {certified}")
    assert ok


def test_criterion_06_pp_bounds_analytic():
    t0 = time.perf_counter()
    weight, bias = np.array([1.0, 0.4]), -0.1
    failures, checked = [], 0
    for angle in (15, 30, 45, 60, 75):
        pair = rotated_gaussians_task(angle)
        for r in analytic_pp_reports(pair, weight, bias):
            checked += 1
            if not r.valid:
                failures.append(f"{angle}:{r.name}")
        risk_s = linear_classifier_risk(pair, weight, bias, "source")
        risk_t = linear_classifier_risk(pair, weight, bias, "target")
        lo, hi = pp_sandwich(0.5, pair.true_kl_tgt_src, projected_kl(pair, weight), risk_s)
        checked += 1
        if not lo - 1e-12 <= risk_t <= hi + 1e-12:
            failures.append(f"{angle}:sandwich")
    grid = np.concatenate([np.linspace(0, 10, 2001), [20.0, 100.0, 1e4]])
    cap_ok = all(tv_kl_cap(v) <= math.sqrt(v / 2) + 1e-15 for v in grid)
    forms = {r.name for r in pp_bounds(subgaussian=0.5, loss_bound=1.0, kl_tgt_src=0.3, kl_src_tgt=0.3, tv=0.2)}
    ok = record(6, "PP bounds with analytic risks", not failures and cap_ok, time.perf_counter() - t0, 30,
                f"{checked} checks at 5 angles, failures {failures or 'none'}; capped form <= Pinsker form on "
                f"{grid.size} KL values: {cap_ok}; forms {sorted(forms)}")
    assert ok


def test_criterion_07_reduction_lattice():
    t0 = time.perf_counter()
    pair = gaussian_shift_task(2, 1.0, 1.0, separation=1.5)
    data = pair.draw(64, 48, 100, np.random.default_rng(107))
    model = EncoderClassifier.initialize(ModelSpec(2), np.random.default_rng(1070))
    base = TrainConfig(lr=0.05, batch=16, epochs=3, seed=7, sgld_sigma=0.01)

    def path(cfg):
        return train(model, data.source, data.target_inputs, cfg, record_trajectory=True).trajectory

    def gap(a, b):
        return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))

    gp = gap(path(method_config("kl", base)), path(method_config("kl-gp", base, gp_weight=0.0)))
    al = gap(path(method_config("erm", base)), path(method_config("kl", base, align=0.0)))
    ok = record(7, "reduction lattice", gp <= 1e-12 and al <= 1e-12, time.perf_counter() - t0, None,
                f"KL-GP(0) vs KL max diff {gp:.1e}, KL(align 0) vs ERM max diff {al:.1e} over {3 * 4} steps")
    assert ok


def test_criterion_08_gradient_penalty():
    t0 = time.perf_counter()
    task = TaskSpec("gaussian_shift", dim=2, shift=1.5, sigma=1.0, n_source=200, n_target=200, n_test=2000)
    trainer = TrainerSpec(("erm", "erm-gp"), TrainConfig(lr=0.1, batch=32, epochs=30, sgld_sigma=0.01),
                          gp_weight=0.3)
    base_wins, update_wins, acc0, acc1 = 0, 0, [], []
    for seed in range(5):
        data = draw_task(task, seed)
        plain = train_method(task, trainer, "erm", seed, data)
        pen = train_method(task, trainer, "erm-gp", seed, data)
        base_wins += pen.log.base_trajectory_sum() < plain.log.base_trajectory_sum()
        update_wins += pen.log.trajectory_sum() < plain.log.trajectory_sum()
        acc0.append(plain.metrics[-1]["target_accuracy"])
        acc1.append(pen.metrics[-1]["target_accuracy"])
    spread = float(np.std(acc0, ddof=1))
    acc_ok = np.mean(acc1) >= np.mean(acc0) - spread
    ok = record(8, "gradient penalty effect", base_wins >= 4 and acc_ok, time.perf_counter() - t0, 600,
                f"trajectory sum (source-loss gradient deviation) smaller in {base_wins}/5 pairs; "
                f"with the penalized-update deviation {update_wins}/5; accuracy ERM-GP {np.mean(acc1):.4f} vs "
                f"ERM {np.mean(acc0):.4f} (std {spread:.4f})")
    assert ok


def test_criterion_09_label_information_control():
    t0 = time.perf_counter()
    task = TaskSpec("label_flip", angle=45, flip_prob=0.2, flip_domain="source", n_source=200, n_target=200,
                    n_test=2000)
    trainer = TrainerSpec(("kl", "kl-cl"), TrainConfig(lr=0.1, batch=32, epochs=30), cl_weight=0.1)
    accs = {"kl": [], "kl-cl": []}
    logged = True
    for seed in range(5):
        data = draw_task(task, seed)
        for method in accs:
            res = train_method(task, trainer, method, seed, data)
            accs[method].append(res.metrics[-1]["target_accuracy"])
            logged &= all("cl_distance" in row for row in res.metrics)
    spread = float(np.std(accs["kl"], ddof=1))
    direction = np.mean(accs["kl-cl"]) >= np.mean(accs["kl"]) - spread
    # memorization fixture: random labels on a handful of points
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal((24, 2)), rng.integers(0, 2, 24)
    model = EncoderClassifier.initialize(ModelSpec(2, hidden=16), np.random.default_rng(7))
    mem = train(model, LabeledSample(x, y), rng.standard_normal((24, 2)),
                TrainConfig(lr=0.1, batch=8, epochs=15, cl_weight=0.1, seed=2))
    positive = all(row["cl_distance"] > 0 for row in mem.metrics[1:])
    memorizes = mem.metrics[-1]["source_error"] < mem.metrics[0]["source_error"]
    ok = record(9, "label-information control effect", direction and positive and memorizes and logged,
                time.perf_counter() - t0, 600,
                f"accuracy KL-CL {np.mean(accs['kl-cl']):.4f} vs KL {np.mean(accs['kl']):.4f} (std {spread:.4f}); "
                f"penalty positive on every memorization epoch: {positive} (min "
                f"{min(r['cl_distance'] for r in mem.metrics[1:]):.2e})")
    assert ok


def test_criterion_10_empirical_kl_convergence():
    t0 = time.perf_counter()
    mu = Categorical([0.4, 0.3, 0.2, 0.1])
    rows = []
    for k, n in enumerate((100, 1000, 10_000)):
        res = empirical_kl_convergence(mu, n, 1000, seed=[110, k], deltas=(0.1,))
        rows.append((n, res.quantiles[0.1], res.envelopes[0.1]))
    quant = [r[1] for r in rows]
    env = [r[2] for r in rows]
    shape = quant[0] > quant[1] > quant[2] and env[0] > env[1] > env[2]
    within = all(q <= e for n, q, e in rows if n >= 1000)
    ok = record(10, "empirical KL convergence", shape and within, time.perf_counter() - t0, 60,
                "; ".join(f"n={n}: q90 {q:.2e} vs envelope {e:.2e}" for n, q, e in rows))
    assert ok


def test_criterion_11_jeffrey_tracks_target_error():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "train.cfg")
    res = train_method(cfg.task, cfg.trainer, "kl", cfg.seeds[0])
    err = [r["target_error"] for r in res.metrics]
    jeff = [r["jeffrey"] for r in res.metrics]
    rho = float(spearmanr(jeff, err).statistic)
    ok = record(11, "Jeffrey estimate tracks target error", rho > 0.5, time.perf_counter() - t0, None,
                f"configs/train.cfg seed {cfg.seeds[0]}: Spearman {rho:.3f} over {len(err)} epochs "
                f"(error {err[0]:.4f} -> {err[-1]:.4f}, Jeffrey {jeff[0]:.3f} -> {jeff[-1]:.3f})")
    assert ok


def test_criterion_11_seed_spread_is_reported():
    # informational: how often the same configuration tracks across seeds
    cfg = load_config(CONFIGS / "train.cfg")
    rhos = []
    for seed in range(10):
        res = train_method(cfg.task, cfg.trainer, "kl", seed)
        rhos.append(float(spearmanr([r["jeffrey"] for r in res.metrics],
                                    [r["target_error"] for r in res.metrics]).statistic))
    frac = sum(r > 0.5 for r in rhos)
    RESULTS.append(f"criterion 11 INFO  seeds 0-9 of the same configuration: {frac}/10 have Spearman > 0.5 "
                   f"(values {', '.join(f'{r:.2f}' for r in rhos)})")
    print(RESULTS[-1])
    assert len(rhos) == 10


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion"):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
