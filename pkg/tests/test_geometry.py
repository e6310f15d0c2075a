import math

import numpy as np
import pytest

from optcache.geometry import (Polytope, diameter, linear_maximize, project, project_capped_simplex,
                               project_simplex)
from optcache.model import Instance, bipartite, single_cache

from oracles import capped_simplex_bisection, lp_oracle_value, qp_oracle, random_instance

BIP_CONN = [[1, 1, 0], [1, 1, 0], [0, 1, 1], [0, 1, 1]]


def test_project_feasible_point_is_fixed():
    inst = bipartite(4, [2, 1, 1], BIP_CONN, [1, 2, 100])
    poly = Polytope(inst)
    x0 = poly.uniform_point()
    x, rep = project(poly, x0)
    assert rep.converged
    assert np.linalg.norm(x - x0) < 1e-7


def test_project_symmetric_single_cache():
    poly = Polytope(single_cache(3, 1))
    x, _ = project(poly, np.array([0.5, 0.5, 0.5, 0.0, 0.0, 0.0]))
    assert np.allclose(x[:3], 1 / 3, atol=1e-9)
    assert np.allclose(x[3:], 0.0)


def test_project_small_instance_matches_oracle():
    rng = np.random.default_rng(5)
    inst = Instance(2, 1, 2, [0.7, 1.2], [[1, 1]], rng.uniform(0, 2, (2, 1, 2)))
    poly = Polytope(inst)
    p = rng.normal(0.4, 0.8, inst.dim)
    x, _ = project(poly, p, tol=1e-10)
    assert np.linalg.norm(x - qp_oracle(inst, p)) < 1e-6


def test_project_single_cache_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(30):
        N = int(rng.integers(2, 7))
        inst = single_cache(N, float(rng.uniform(0.3, N - 0.3)))
        p = rng.normal(0.3, 1.0, inst.dim)
        x, _ = project(Polytope(inst), p)
        assert np.linalg.norm(x - qp_oracle(inst, p)) < 1e-6


def test_project_reports_nonconvergence():
    inst = bipartite(6, [2, 2, 2], BIP_CONN, [1, 2, 100])
    poly = Polytope(inst)
    p = np.random.default_rng(0).normal(0.5, 2.0, inst.dim)
    x, rep = project(poly, p, max_iters=1)
    assert not rep.converged and rep.iterations == 1
    assert poly.contains(x)


def test_project_rejects_bad_input():
    poly = Polytope(single_cache(3, 1))
    with pytest.raises(ValueError):
        project(poly, np.full(6, np.nan))
    with pytest.raises(ValueError):
        project(poly, np.zeros(6), tol=0)


def test_capped_simplex_examples():
    assert np.allclose(project_capped_simplex([0.5, 0.5, 0.5], 1), [1 / 3] * 3, atol=1e-12)
    assert np.array_equal(project_capped_simplex([2.0, -1.0], 1), [1.0, 0.0])
    v = np.array([0.9, 0.8, 0.1])
    assert np.max(np.abs(project_capped_simplex(v, 1) - capped_simplex_bisection(v, 1))) < 1e-9


def test_simplex_examples():
    assert np.allclose(project_simplex([0.8, 0.4]), [0.7, 0.3])
    assert np.allclose(project_simplex([2.0, -3.0]), [1.0, 0.0])
    assert np.allclose(project_simplex([1 / 3] * 3), [1 / 3] * 3)


def test_linear_maximize_single_cache():
    poly = Polytope(single_cache(2, 1))
    x = linear_maximize(poly, [2.0, 0.0, 0.0, 0.0])
    assert np.array_equal(x[:2], [1.0, 0.0])


def test_linear_maximize_prediction_caches_predicted_file():
    poly = Polytope(single_cache(5, 2))
    c = np.zeros(10)
    c[5 + 3] = 1.0                      # one-hot on the routing coordinate of file 3
    x = linear_maximize(poly, c)
    assert x[3] == 1.0 and x[8] == 1.0
    assert x[:5].sum() <= 2.0


def test_linear_maximize_tie_break_lowest_index():
    poly = Polytope(single_cache(4, 1.5))
    x = linear_maximize(poly, [1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0])
    assert np.array_equal(x[:4], [1.0, 0.5, 0.0, 0.0])


def test_linear_maximize_small_instance_matches_vertices():
    rng = np.random.default_rng(11)
    inst = Instance(2, 1, 2, [0.6, 1.3], [[1, 1]], rng.uniform(0, 2, (2, 1, 2)))
    poly = Polytope(inst)
    for _ in range(20):
        c = rng.normal(0, 1, inst.dim)
        x = linear_maximize(poly, c)
        assert poly.contains(x)
        assert abs(c @ x - lp_oracle_value(inst, c)) < 1e-9


def test_linear_maximize_nonpositive_objective_is_empty():
    inst = bipartite(3, [1, 1, 1], BIP_CONN, [1, 2, 100])
    x = linear_maximize(Polytope(inst), -np.ones(inst.dim))
    assert not x.any()


@pytest.mark.parametrize("J,C,expect", [(3, 50, math.sqrt(302)), (1, 1, 2.0), (2, 3, math.sqrt(14))])
def test_diameter(J, C, expect):
    inst = Instance(C + 1, 1, J, [C] * J, np.ones((1, J), int), 1.0)
    assert diameter(Polytope(inst)) == pytest.approx(expect)


def test_diameter_tight_on_smallest_single_cache():
    poly = Polytope(single_cache(2, 1))
    a, b = np.array([1.0, 0.0, 1.0, 0.0]), np.array([0.0, 1.0, 0.0, 1.0])
    assert np.linalg.norm(a - b) == pytest.approx(diameter(poly))


def test_pairwise_distances_within_routing_aware_bound():
    # the regularizer scale counts the routing block once; a pair of
    # decisions can differ by up to one unit per (file, location) pair, so
    # check against 2 J C (1 + I), which always holds
    rng = np.random.default_rng(3)
    for _ in range(5):
        inst = random_instance(rng, max_dim=30, max_files=5)
        poly = Polytope(inst)
        pts = [linear_maximize(poly, rng.normal(0, 1, inst.dim)) for _ in range(40)]
        d = max(np.linalg.norm(a - b) for a in pts for b in pts)
        J, I, C = inst.num_caches, inst.num_locations, poly.capacity_bound
        assert d <= math.sqrt(2 * J * C * (1 + I)) + 1e-9


def test_elastic_polytope_uses_largest_capacity():
    inst = bipartite(10, [2, 5, 3], BIP_CONN, [1, 2, 100])
    el = Polytope(inst, elastic=True)
    assert el.capacities.tolist() == [5.0, 5.0, 5.0]
    assert diameter(el) == pytest.approx(math.sqrt(2 * (3 * 5 + 1)))


def test_uniform_point_is_feasible():
    rng = np.random.default_rng(8)
    for _ in range(20):
        inst = random_instance(rng, max_dim=40, max_files=6)
        assert Polytope(inst).contains(Polytope(inst).uniform_point())
