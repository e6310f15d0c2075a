import math

import numpy as np
import pytest

from optcache.geometry import Polytope, diameter, project_simplex
from optcache.model import Instance, Request, bipartite, gradient_of, prediction_to_gradient, Prediction, single_cache
from optcache.policies import (OBC, OEC, OGD, XC, ProtocolError, best_in_hindsight, dual_update,
                               make_policy)

from oracles import capped_simplex_bisection, lp_oracle_value, qp_oracle

BIP_CONN = [[1, 1, 0], [1, 1, 0], [0, 1, 1], [0, 1, 1]]


def one_hot(inst, n, i=0):
    return gradient_of(inst, Request(n, i))


def test_obc_first_slot_follows_prediction():
    inst = single_cache(4, 1)
    pol = OBC(Polytope(inst))
    x = pol.decide(one_hot(inst, 2))
    assert x[2] == 1.0 and x[:4].sum() == 1.0


def test_obc_perfect_prediction_second_slot():
    inst = single_cache(2, 1)
    pol = OBC(Polytope(inst))
    c = one_hot(inst, 0)
    pol.decide(c)
    pol.observe(c)
    assert pol.last_h == 0.0 and pol.state.sigma_sum == 0.0
    x = pol.decide(c)
    assert np.array_equal(x[:2], [1.0, 0.0])


def test_obc_observe_error_accounting():
    inst = bipartite(5, [1, 1, 1], BIP_CONN, [1, 2, 100])
    pol = OBC(Polytope(inst))
    pol.decide(None)
    c = one_hot(inst, 1, 2)
    pol.observe(c)
    # no hint: h is the squared norm of c, one entry per reachable cache
    assert pol.last_h == pytest.approx(2 ** 2 + 100 ** 2)
    w = 1.5
    inst = Instance(4, 1, 3, [1, 1, 1], [[1, 1, 1]], w)
    pol = OBC(Polytope(inst))
    pol.decide(None)
    pol.observe(one_hot(inst, 0))
    assert pol.last_h == pytest.approx(3 * w ** 2)


def test_obc_sigma_telescopes():
    inst = Instance(3, 1, 1, [1], [[1]], 2.0)      # h = 4 per unpredicted request
    pol = OBC(Polytope(inst), sigma=1.0)
    x1 = pol.decide(None)
    pol.observe(one_hot(inst, 0))
    assert pol.state.sigma_sum == pytest.approx(2.0)
    assert np.allclose(pol.state.anchor_sum, 2.0 * x1)
    # h_1 = 4, h_2 = 5 (weights 2 and 1 on the two caches)
    inst2 = Instance(3, 1, 2, [1, 1], [[1, 1]], np.broadcast_to([2.0, 1.0], (3, 1, 2)))
    pol = OBC(Polytope(inst2), sigma=1.0)
    pol.decide(None)
    pol.observe(_scaled(inst2, 0, 4.0))
    pol.decide(None)
    pol.observe(one_hot(inst2, 1))
    assert pol.state.h_sum == pytest.approx(9.0)
    assert pol.state.sigma_sum == pytest.approx(3.0)


def _scaled(inst, n, h):
    """A gradient with squared norm ``h`` on file ``n``'s first routing entry."""
    from optcache.model import SparseGradient
    return SparseGradient(np.array([inst.routing_index(n, 0, 0)]), np.array([math.sqrt(h)]), inst.dim)


def _history(inst, T, rng, pol):
    xs, cs, preds = [], [], []
    for _ in range(T):
        n = int(rng.integers(inst.num_files))
        i = int(rng.integers(inst.num_locations))
        good = rng.random() < 0.5
        wrong = (n + 1 + int(rng.integers(inst.num_files - 1))) % inst.num_files
        p = Prediction(Request(n if good else wrong, i))
        pg = prediction_to_gradient(inst, p)
        xs.append(pol.decide(pg).copy())
        c = gradient_of(inst, Request(n, i))
        pol.observe(c)
        cs.append(c.dense())
        preds.append(pg.dense())
    return np.array(xs), np.array(cs), np.array(preds)


def _oracle_weights(cs, preds, sigma):
    h = np.sum((cs - preds) ** 2, axis=1)
    H = np.concatenate([[0.0], np.cumsum(h)])
    return sigma * np.diff(np.sqrt(H))


def test_obc_matches_regularized_leader_oracle():
    rng = np.random.default_rng(21)
    inst = Instance(3, 2, 2, [1.2, 0.8], [[1, 1], [0, 1]], rng.uniform(0.5, 2, (3, 2, 2)))
    pol = OBC(Polytope(inst))
    xs, cs, preds = _history(inst, 12, rng, pol)
    sig = _oracle_weights(cs, preds, 2.0 / diameter(Polytope(inst)))
    hint = one_hot(inst, 1, 1)
    x = pol.decide(hint)
    q = sig @ xs + cs.sum(0) + hint.dense()
    assert np.linalg.norm(x - qp_oracle(inst, q, alpha=sig.sum())) < 1e-5


def test_obc_single_cache_matches_reduced_oracle():
    rng = np.random.default_rng(22)
    inst = single_cache(6, 2)
    pol = OBC(Polytope(inst))
    xs, cs, preds = _history(inst, 15, rng, pol)
    sig = _oracle_weights(cs, preds, 2.0 / diameter(Polytope(inst)))
    hint = one_hot(inst, 4)
    x = pol.decide(hint)
    lin = cs.sum(0) + hint.dense()
    q = sig @ xs[:, :6] + lin[:6] + lin[6:]
    y = capped_simplex_bisection(q / sig.sum(), 2.0)
    assert np.max(np.abs(x[:6] - y)) < 1e-9
    assert np.array_equal(x[:6], x[6:])


def test_protocol_order_enforced():
    inst = single_cache(3, 1)
    pol = OBC(Polytope(inst))
    with pytest.raises(ProtocolError):
        pol.observe(one_hot(inst, 0))
    pol.decide(None)
    with pytest.raises(ProtocolError):
        pol.decide(None)


def test_dual_update_examples():
    assert dual_update(2.0, 3, 1.0, 0.5) == pytest.approx(0.5)
    assert dual_update(-1.0, 3, 1.0, 0.5) == 0.0
    assert dual_update(0.0, 7, 1.0, 0.5) == 0.0
    assert dual_update(5.0, 3, 0.0, 0.5) == 0.0


def _elastic_run(inst, spec, T, seed):
    rng = np.random.default_rng(seed)
    poly, el = Polytope(inst), Polytope(inst, elastic=True)
    pol = make_policy(spec, poly, el)
    xs = []
    for _ in range(T):
        prices = rng.uniform(0.2, 1.0, inst.num_caches)
        n, i = int(rng.integers(inst.num_files)), int(rng.integers(inst.num_locations))
        x = pol.decide(one_hot(inst, int(rng.integers(inst.num_files)), i), prices)
        xs.append(x.copy())
        Y = x[: inst.n_cache_coords].reshape(-1, inst.num_caches).sum(0)
        pol.observe(one_hot(inst, n, i), float(prices @ Y - 1.0))
    return np.array(xs), pol


def test_oec_with_zero_step_equals_obc_on_elastic_set():
    inst = bipartite(6, [1, 2, 1], BIP_CONN, [1, 2, 100])
    a, pa = _elastic_run(inst, {"kind": "oec", "a": 0.0}, 30, 4)
    b, _ = _elastic_run(inst, {"kind": "obc", "elastic": True, "init": "zero"}, 30, 4)
    assert np.array_equal(a, b)
    assert all(l == 0.0 for l in pa.lambdas)


def test_oec_multiplier_nonnegative_and_large_price_empties_cache():
    inst = single_cache(5, 2)
    el = Polytope(inst, elastic=True)
    pol = OEC(el, a=1e6, beta=0.5)
    x = pol.decide(one_hot(inst, 0), np.array([1.0]))
    pol.observe(one_hot(inst, 0), 2.0)
    assert pol.lam > 0
    x = pol.decide(one_hot(inst, 1), np.array([1.0]))
    assert np.all(x[:5] < 1e-6)
    xs, pol = _elastic_run(bipartite(4, [1, 1, 1], BIP_CONN, [1, 2, 100]), {"kind": "oec"}, 40, 9)
    assert min(pol.lambdas) >= 0.0


def test_oec_requires_elastic_polytope():
    with pytest.raises(ValueError):
        OEC(Polytope(single_cache(3, 1)))
    with pytest.raises(ValueError):
        OEC(Polytope(single_cache(3, 1), elastic=True), beta=1.0)


def test_xc_combination_and_weight_step():
    inst = single_cache(2, 1)
    pol = XC(Polytope(inst), w=2.5)
    assert np.array_equal(pol.u, [0.5, 0.5])
    pol.decide(None)
    # force expert proposals with losses l = (0, 1)
    pol.yp = np.array([1.0, 0.0, 0.0, 0.0])
    pol.yo = np.array([0.0, 1.0, 0.0, 1.0])
    pol.observe(one_hot(inst, 1))
    assert pol.last_l == (0.0, 1.0)
    assert np.allclose(pol.u, [0.3, 0.7])
    assert np.allclose(project_simplex([0.5, 0.9]), [0.3, 0.7])


def test_xc_zero_loss_keeps_weights():
    inst = single_cache(3, 1)
    pol = XC(Polytope(inst), w=1.0)
    pol.decide(None)
    pol.yp = np.zeros(6)
    pol.yo = np.zeros(6)
    pol.observe(one_hot(inst, 2))
    assert np.array_equal(pol.u, [0.5, 0.5])


def test_xc_vertex_weight_and_midpoint():
    inst = single_cache(4, 1)
    pol = XC(Polytope(inst), weights=(1.0, 0.0))
    ref = OBC(Polytope(inst))
    x = pol.decide(one_hot(inst, 3))
    assert np.array_equal(x, ref.decide(None))
    pol = XC(Polytope(inst))
    x = pol.decide(one_hot(inst, 3))
    assert np.allclose(x, 0.5 * pol.yp + 0.5 * pol.yo)


def test_xc_optimistic_expert_earns_w_with_perfect_hints():
    inst = single_cache(10, 2, 1.0)
    pol = XC(Polytope(inst))
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = one_hot(inst, int(rng.integers(10)))
        pol.decide(c)
        pol.observe(c)
        assert pol.last_l[1] == 1.0


def test_xc_step_size_plug_in():
    pol = XC(Polytope(single_cache(3, 1)), w=1.0)
    assert pol.step_size(4) == 0.5


def test_ogd_example_step():
    inst = single_cache(2, 1)
    pol = OGD(Polytope(inst), eta_scale=0.1)       # eta_1 = 0.1 * D / w = 0.2
    assert pol.step_size(1) == pytest.approx(0.2)
    x = pol.decide(None)
    assert np.allclose(x[:2], [0.5, 0.5])
    pol.observe(one_hot(inst, 0))
    x = pol.decide(None)
    assert np.allclose(x[:2], [0.6, 0.4])


def test_ogd_zero_gradient_holds_position():
    inst = bipartite(4, [1, 1, 1], BIP_CONN, [1, 2, 100])
    pol = OGD(Polytope(inst))
    x1 = pol.decide(None)
    from optcache.model import SparseGradient
    pol.observe(SparseGradient.zeros(inst.dim))
    assert np.array_equal(pol.decide(None), x1)


def test_ogd_moves_along_gradient():
    inst = bipartite(6, [2, 2, 2], BIP_CONN, [1, 2, 100])
    pol = OGD(Polytope(inst), eta_scale=0.01)
    x1 = pol.decide(None)
    c = one_hot(inst, 1, 2)
    pol.observe(c)
    x2 = pol.decide(None)
    assert c.dot(x2) > c.dot(x1)


def test_best_in_hindsight_examples():
    counts = np.array([0, 0, 0, 5.0, 3.0, 1.0])
    x, v = best_in_hindsight(Polytope(single_cache(3, 1)), counts)
    assert v == 5.0 and x[0] == 1.0
    x, v = best_in_hindsight(Polytope(single_cache(3, 2)), counts)
    assert v == 8.0 and x[0] == x[1] == 1.0


def test_best_in_hindsight_bipartite_matches_vertices():
    rng = np.random.default_rng(2)
    inst = Instance(2, 2, 2, [1, 0.5], [[1, 0], [1, 1]], rng.uniform(0.5, 3, (2, 2, 2)))
    c = np.zeros(inst.dim)
    for _ in range(10):
        one_hot(inst, int(rng.integers(2)), int(rng.integers(2))).add_to(c)
    _, v = best_in_hindsight(Polytope(inst), c)
    assert abs(v - lp_oracle_value(inst, c)) < 1e-9


def test_best_in_hindsight_budget_rows():
    inst = single_cache(3, 2)
    counts = np.array([0, 0, 0, 5.0, 3.0, 1.0])
    x, v = best_in_hindsight(Polytope(inst), counts, prices=[[1.0], [2.0]], budgets=[2.0, 1.0])
    # 2 * Y <= 1 binds: half of the best file
    assert v == pytest.approx(2.5)
    from optcache.geometry import Infeasible
    with pytest.raises(Infeasible):
        best_in_hindsight(Polytope(inst), counts, prices=[[1.0]], budgets=[-1.0])


def test_make_policy_rejects_unknown():
    poly = Polytope(single_cache(3, 1))
    with pytest.raises(ValueError):
        make_policy({"kind": "lru"}, poly)
    with pytest.raises(ValueError):
        make_policy({"kind": "obc", "init": "random"}, poly)


def test_obc_without_hints_is_the_pessimistic_expert():
    from optcache.model import SparseGradient
    inst = bipartite(6, [2, 1, 2], BIP_CONN, [1, 2, 100])
    obc, xc = OBC(Polytope(inst)), XC(Polytope(inst))
    rng = np.random.default_rng(1)
    for _ in range(25):
        n, i = int(rng.integers(6)), int(rng.integers(4))
        x = obc.decide(SparseGradient.zeros(inst.dim))
        xc.decide(one_hot(inst, int(rng.integers(6)), i))
        assert np.array_equal(x, xc.yp)
        c = one_hot(inst, n, i)
        obc.observe(c)
        xc.observe(c)


def test_oec_multiplier_zero_while_under_budget():
    inst = bipartite(5, [1, 1, 1], BIP_CONN, [1, 2, 100])
    rng = np.random.default_rng(3)
    pol = OEC(Polytope(inst, elastic=True))
    total = 0.0
    for _ in range(30):
        prices = rng.uniform(0.2, 1.0, 3)
        x = pol.decide(None, prices)
        Y = x[: inst.n_cache_coords].reshape(-1, 3).sum(0)
        g = float(prices @ Y - 2.0)
        total += g
        pol.observe(one_hot(inst, int(rng.integers(5))), g)
        assert pol.lam >= 0.0
        if total <= 0:
            assert pol.lam == 0.0
        else:
            assert pol.lam > 0.0
