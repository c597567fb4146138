import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infouda.bounds import pp_sandwich
from infouda.oracle import (EnumerationTooLarge, MicroWorld, ce_decomposition, dis_exact, enumerate_world,
                            is_metric_loss, label_given_representation, lambda_star,
                            posterior_label_classifier, pseudo_label_diagnostic, random_world,
                            verify_ep_bounds, verify_pp_bounds, world_from_text, world_to_text)
from infouda.tasks import preset_world
from infouda.textconf import ConfigError

from oracles import brute_force_err

HALF = np.array([[0.5, 0.0], [0.0, 0.5]])


def _entropy(p):
    p = np.asarray(p).reshape(-1)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def test_independence_world_is_all_zero():
    w = preset_world("independence")
    q = enumerate_world(w)
    assert q.err == pytest.approx(0.0, abs=1e-15)
    assert np.nanmax(q.mi_disint) == pytest.approx(0.0, abs=1e-15)
    for r in verify_ep_bounds(q, w):
        assert r.rhs == pytest.approx(0.0, abs=1e-12) and r.valid


def test_realizable_err_closed_form():
    # with uniform ties ERM keeps a wrong label on the unseen input half the time
    for n in (1, 2, 3):
        q = enumerate_world(MicroWorld(HALF, HALF, n=n, m=1))
        assert q.err == pytest.approx(0.5 ** (n + 1), abs=1e-15)


def test_half_flip_against_brute_force():
    w = preset_world("half_flip")
    q = enumerate_world(w)
    assert q.err == pytest.approx(brute_force_err(w.mu, w.mu_prime, 1, 1), abs=1e-12)


def test_random_erm_worlds_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(20):
        w = random_world(rng, algorithm="erm")
        w = MicroWorld(w.mu, w.mu_prime, n=min(w.n, 2), m=w.m)
        ref = brute_force_err(w.mu.tolist(), w.mu_prime.tolist(), w.n, w.m)
        assert enumerate_world(w).err == pytest.approx(ref, abs=1e-12)


def test_data_ignoring_algorithm_reduces_to_domain_term():
    mu = np.array([[0.4, 0.1], [0.2, 0.3]])
    mu_p = np.array([[0.1, 0.2], [0.3, 0.4]])
    w = MicroWorld(mu, mu_p, n=2, m=1, algorithm="gibbs", gamma=0.0)
    q = enumerate_world(w)
    (mi_report,) = [r for r in verify_ep_bounds(q, w) if r.name == "ep_mutual_information"]
    # the information term is roundoff (~1e-17) and its square root ~1e-9
    assert np.nanmax(q.mi_disint) < 1e-15
    assert mi_report.rhs == pytest.approx(math.sqrt(2 * 0.25 * q.kl_src_tgt), abs=1e-8)
    assert mi_report.valid


def test_random_worlds_satisfy_ep_bounds_and_chain_rule():
    rng = np.random.default_rng(12)
    for _ in range(30):
        w = random_world(rng)
        q = enumerate_world(w)
        reports = verify_ep_bounds(q, w)
        assert all(r.valid for r in reports), [r for r in reports if not r.valid]
        assert all("ordering-violated" not in r.flags for r in reports)
        assert q.chain_rule_gap() < 1e-9


def test_random_worlds_satisfy_pp_bounds():
    rng = np.random.default_rng(13)
    for _ in range(30):
        w = random_world(rng)
        reports = verify_pp_bounds(w)
        assert {"pp_disagreement_kl", "pp_inputs_kl_plus_lambda"} <= {r.name for r in reports}
        assert all(r.valid for r in reports), [r for r in reports if not r.valid]


def test_non_metric_loss_skips_joint_risk_forms():
    loss = np.array([[0.0, 1.0], [0.2, 0.0]])
    assert not is_metric_loss(loss)
    w = MicroWorld(HALF, HALF, loss=loss)
    assert "pp_inputs_kl_plus_lambda" not in {r.name for r in verify_pp_bounds(w)}


def test_sandwich_contains_target_risk():
    rng = np.random.default_rng(14)
    for _ in range(30):
        w = random_world(rng)
        q = enumerate_world(w)
        for h in range(w.n_w):
            lo, hi = pp_sandwich(0.5, q.kl_tgt_src, q.kl_tgt_src, q.risk_src[h])
            assert lo - 1e-9 <= q.risk_tgt[h] <= hi + 1e-9


def test_lambda_star_and_dis_trivial_cases():
    assert lambda_star(MicroWorld(HALF, HALF)) == 0.0
    w = MicroWorld(np.array([[0.1, 0.4], [0.3, 0.2]]), np.array([[0.3, 0.2], [0.1, 0.4]]))
    prior = np.full((w.n_w, w.n_w), 1.0 / w.n_w ** 2)
    assert dis_exact(w, prior) == pytest.approx(0.0, abs=1e-15)


def test_ce_decomposition_independent_weights():
    w = preset_world("independence")
    q = enumerate_world(w)
    rep = np.array([0, 1])
    p_y_t = label_given_representation(w, rep)
    cls = np.broadcast_to(p_y_t, (w.n_w,) + p_y_t.shape).copy()
    d = ce_decomposition(w, rep, cls, q=q)
    assert d.ce == pytest.approx(d.h_y_given_t, abs=1e-12)
    assert d.kl_term == pytest.approx(0.0, abs=1e-12)
    assert d.mi_term == pytest.approx(0.0, abs=1e-12)


def test_ce_of_uniform_classifier_is_log_labels():
    rng = np.random.default_rng(15)
    w = random_world(rng, n_x=2, n_y=3)
    d = ce_decomposition(w, np.array([0, 0]), np.full((w.n_w, 1, 3), 1 / 3))
    assert d.ce == pytest.approx(math.log(3), abs=1e-12)


def test_memorizing_learner_has_positive_label_information():
    w = MicroWorld(np.array([[0.3, 0.2], [0.1, 0.4]]), np.array([[0.3, 0.2], [0.1, 0.4]]), n=2, m=1)
    q = enumerate_world(w)
    rep = np.array([0, 1])
    d = ce_decomposition(w, rep, posterior_label_classifier(w, rep, q), q=q)
    # independent route: I(W;Y|T) = H(Y|T) - H(Y|T,W) from the (x, y, w) table
    p = q.joint_wz[0].reshape(2, 2, w.n_w)
    h_y_t = _entropy(p.sum(axis=2)) - _entropy(p.sum(axis=(1, 2)))
    h_y_tw = _entropy(p) - _entropy(p.sum(axis=1))
    assert d.mi_term > 0
    assert d.mi_term == pytest.approx(h_y_t - h_y_tw, abs=1e-12)
    assert d.kl_term == pytest.approx(0.0, abs=1e-12)


def test_ce_decomposition_on_random_worlds():
    rng = np.random.default_rng(16)
    for _ in range(20):
        w = random_world(rng)
        q = enumerate_world(w)
        rep = rng.integers(0, 2, size=w.n_x)
        rep[0] = 0
        n_t = rep.max() + 1
        cls = rng.dirichlet(np.ones(w.n_y), size=(w.n_w, n_t))
        d = ce_decomposition(w, rep, cls, q=q)
        assert abs(d.residual) < 1e-9


def test_pseudo_label_identity_cases():
    w = MicroWorld(np.array([[0.2, 0.3], [0.4, 0.1]]), np.array([[0.2, 0.3], [0.4, 0.1]]))
    same = pseudo_label_diagnostic(w, np.array([0, 1]))
    assert same.kl_joint == same.kl_marginal == same.kl_conditional == 0.0
    # marginals agree but target flips the label at x = 1 and Q is deterministic
    flip = MicroWorld(HALF, np.array([[0.5, 0.0], [0.5, 0.0]]))
    diag = pseudo_label_diagnostic(flip, np.array([0, 1]), classifier=np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert diag.conditional_infinite
    rng = np.random.default_rng(17)
    for _ in range(50):
        rw = random_world(rng)
        d = pseudo_label_diagnostic(rw, rng.integers(0, 2, size=rw.n_x))
        if not math.isinf(d.kl_joint):
            assert d.kl_joint == pytest.approx(d.kl_marginal + d.kl_conditional, abs=1e-9)


def test_oversized_world_rejected(monkeypatch):
    # the per-field caps keep every world under 10^7, so lower the ceiling
    import infouda.oracle as oracle_mod
    monkeypatch.setattr(oracle_mod, "MAX_ENUMERATION", 10_000)
    big = np.full((4, 3), 1 / 12)
    with pytest.raises(EnumerationTooLarge, match="2239488") as info:
        MicroWorld(big, big, n=3, m=2)
    assert info.value.cardinality == 12 ** 3 * 4 ** 2 * 81


def test_world_text_round_trip():
    w = preset_world("shifted_gibbs")
    back = world_from_text(world_to_text(w))
    np.testing.assert_array_equal(back.mu, w.mu)
    assert (back.n, back.m, back.algorithm, back.gamma, back.target_weight) == (w.n, w.m, "gibbs", 1.0, 0.5)
    assert enumerate_world(back).err == enumerate_world(w).err


def test_world_text_rejects_unknown_key():
    text = world_to_text(preset_world("realizable")).replace("[world]", "[world]\ncolour = red", 1)
    with pytest.raises(ConfigError, match="colour"):
        world_from_text(text)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.permutations(range(3)))
def test_err_invariant_under_input_relabelling(seed, perm):
    rng = np.random.default_rng(seed)
    w = random_world(rng, n_x=3, n_y=2)
    w = MicroWorld(w.mu, w.mu_prime, n=min(w.n, 2), m=1, algorithm=w.algorithm, gamma=w.gamma,
                   target_weight=w.target_weight)
    p = list(perm)
    moved = MicroWorld(w.mu[p], w.mu_prime[p], n=w.n, m=w.m, algorithm=w.algorithm, gamma=w.gamma,
                       target_weight=w.target_weight)
    assert enumerate_world(moved).err == pytest.approx(enumerate_world(w).err, abs=1e-12)
