"""Feasible-set machinery for the caching polytope

    X = { (y, z) : y in [0,1]^{NJ}, sum_n y[n,j] <= C_j,
                   z in [0,1]^{NIJ}, sum_j z[n,i,j] <= 1,
                   z[n,i,j] <= y[n,j] * l[i,j] }.

Euclidean projections (exact for the single-cache case, Dykstra's
alternating scheme otherwise), linear maximization, and the diameter used to
scale the proximal regularizers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ._kernels import dykstra
from .model import EPS_FEAS, Instance, feasibility_violation

EPS_PROJ = 1e-7
MAX_ITERS = 10_000


class Polytope:
    """The feasible set ``X`` of an instance.

    With ``elastic=True`` every cache may lease up to ``C = max_j C_j``, which
    is the set the budget-constrained policy works in.
    """

    def __init__(self, instance: Instance, elastic: bool = False):
        self.instance = instance
        self.elastic = bool(elastic)
        J = instance.num_caches
        if self.elastic:
            self.capacities = np.full(J, instance.max_capacity)
        else:
            self.capacities = instance.capacities.copy()
        self.capacities.setflags(write=False)
        # (1, I, J) mask of reachable routing coordinates; the rest is pinned to 0
        self.reach = instance.connectivity[None, :, :]
        self.single = instance.num_locations == 1 and instance.num_caches == 1 and bool(instance.connectivity[0, 0])
        self._lp = None

    @property
    def dim(self) -> int:
        return self.instance.dim

    @property
    def capacity_bound(self) -> float:
        return float(self.capacities.max())

    def contains(self, x: np.ndarray, eps: float = EPS_FEAS) -> bool:
        return self.violation(x) <= eps

    def violation(self, x: np.ndarray) -> float:
        return feasibility_violation(self.instance, x, self.capacities)

    def uniform_point(self) -> np.ndarray:
        """``y[n,j] = C_j / N`` with each request split greedily over caches."""
        inst = self.instance
        N, I, J = inst.num_files, inst.num_locations, inst.num_caches
        y = np.broadcast_to(self.capacities / N, (N, J)).copy()
        z = np.zeros((N, I, J))
        left = np.ones((N, I))
        for j in range(J):
            take = np.minimum(y[:, None, j] * self.reach[0, :, j], left)
            z[:, :, j] = take
            left = left - take
        return inst.join(y, z)

    def zero_point(self) -> np.ndarray:
        return np.zeros(self.dim)

    def diameter(self) -> float:
        return diameter(self)

    # single-cache reduction: with one cache and one location an optimal
    # route always serves the cached fraction, so a decision is fully
    # described by y and z = y

    def collapse(self, v: np.ndarray) -> np.ndarray:
        """Linear term on the reduced ``y``-space: ``v_y + v_z``."""
        N = self.instance.num_files
        return v[:N] + v[N:]

    def expand(self, y: np.ndarray) -> np.ndarray:
        return np.concatenate([y, y])


@dataclass
class ProjectionReport:
    iterations: int
    infeasibility: float
    converged: bool
    # Dykstra dual increment for the coupling block; reusable as a warm start
    warm: Optional[np.ndarray] = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# closed-form building blocks


def _capped_simplex_rows(V: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Row-wise projection onto ``{x in [0,1]^n : sum(x) <= cap}``.

    Exact: the threshold is located on the sorted breakpoints of the
    piecewise-linear map ``lam -> sum(clip(v - lam, 0, 1))``.
    """
    V = np.asarray(V, dtype=float)
    caps = np.broadcast_to(np.asarray(caps, dtype=float), V.shape[:1])
    out = np.clip(V, 0.0, 1.0)
    over = out.sum(axis=1) > caps
    if not over.any():
        return out
    rows = np.flatnonzero(over)
    v = V[rows]
    cap = caps[rows]
    r, n = v.shape
    # events while lambda decreases: a coordinate starts moving at v, saturates at v-1
    ev = np.concatenate([v, v - 1.0], axis=1)
    dl = np.concatenate([np.ones((r, n)), -np.ones((r, n))], axis=1)
    order = np.argsort(-ev, axis=1, kind="stable")
    ev = np.take_along_axis(ev, order, axis=1)
    active = np.cumsum(np.take_along_axis(dl, order, axis=1), axis=1)
    gaps = ev[:, :-1] - ev[:, 1:]
    s = np.concatenate([np.zeros((r, 1)), np.cumsum(active[:, :-1] * gaps, axis=1)], axis=1)
    k = np.argmax(s >= cap[:, None], axis=1)
    lam = np.empty(r)
    first = k == 0
    lam[first] = ev[first, 0]
    kk = k[~first]
    rr = np.flatnonzero(~first)
    a = active[rr, kk - 1]
    lam[~first] = ev[rr, kk - 1] - (cap[~first] - s[rr, kk - 1]) / a
    out[rows] = np.clip(v - lam[:, None], 0.0, 1.0)
    return out


def project_capped_simplex(v, cap: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x in [0,1]^n : sum(x) <= cap}``."""
    if cap < 0:
        raise ValueError("cap must be non-negative")
    v = np.asarray(v, dtype=float).reshape(1, -1)
    return _capped_simplex_rows(v, np.array([float(cap)]))[0]


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


# ---------------------------------------------------------------------------
# projection


def _isotonic_pair(a, b, mu):
    """Per-file minimiser of ``(y-a+mu)^2 + (z-b)^2`` over ``0 <= z <= y <= 1``."""
    u = a - mu
    split = u >= b
    y = np.where(split, np.clip(u, 0.0, 1.0), np.clip(0.5 * (u + b), 0.0, 1.0))
    z = np.where(split, np.clip(b, 0.0, 1.0), y)
    return y, np.minimum(z, y)


def _capacity_multiplier(a, b, C):
    """Smallest ``mu >= 0`` with ``sum_n y_n(mu) <= C`` (exact, event scan)."""
    n = a.size
    hi = b >= 1.0
    mid = (b >= 0.0) & ~hi
    lo = b < 0.0
    ev = np.full((n, 3), np.inf)
    d = np.zeros((n, 3))
    # b >= 1: slope 1/2 between u = 2-b and u = -b
    ev[hi, 0] = a[hi] - (2.0 - b[hi]); d[hi, 0] = 0.5
    ev[hi, 1] = a[hi] + b[hi];         d[hi, 1] = -0.5
    # 0 <= b < 1: slope 1 on [b, 1], slope 1/2 on [-b, b]
    ev[mid, 0] = a[mid] - 1.0;         d[mid, 0] = 1.0
    ev[mid, 1] = a[mid] - b[mid];      d[mid, 1] = -0.5
    ev[mid, 2] = a[mid] + b[mid];      d[mid, 2] = -0.5
    # b < 0: slope 1 on [0, 1]
    ev[lo, 0] = a[lo] - 1.0;           d[lo, 0] = 1.0
    ev[lo, 1] = a[lo];                 d[lo, 1] = -1.0
    ev = ev.ravel()
    d = d.ravel()
    order = np.argsort(ev, kind="stable")
    ev = ev[order]
    slope = np.cumsum(d[order])
    fin = np.isfinite(ev)
    ev, slope = ev[fin], slope[fin]
    # total at mu = ev[0] equals n (every file saturated)
    s = n - np.concatenate([[0.0], np.cumsum(slope[:-1] * np.diff(ev))])
    k = int(np.argmax(s <= C))
    if s[k] > C:
        mu = ev[-1]
    elif k == 0:
        mu = ev[0]
    else:
        mu = ev[k - 1] + (s[k - 1] - C) / slope[k - 1]
    return max(mu, 0.0)


def _project_single(poly: Polytope, p: np.ndarray) -> np.ndarray:
    """Exact projection for ``I = J = 1``: feasible set ``0 <= z <= y <= 1``,
    ``sum(y) <= C``.

    For a capacity multiplier ``mu`` every file solves a two-variable
    isotonic problem in closed form; ``mu`` is found on the sorted breakpoints
    of the piecewise-linear total ``sum_n y_n(mu)``.
    """
    N = poly.instance.num_files
    C = float(poly.capacities[0])
    y, z = _isotonic_pair(p[:N], p[N:], 0.0)
    if y.sum() > C:
        # y_n(mu) is non-increasing, so files empty at mu = 0 stay empty
        act = np.flatnonzero(y > 0.0)
        a, b = p[:N][act], p[N:][act]
        mu = _capacity_multiplier(a, b, C)
        y = np.zeros(N)
        z = np.zeros(N)
        y[act], z[act] = _isotonic_pair(a, b, mu)
    return np.concatenate([y, z])


def project(poly: Polytope, point, tol: float = EPS_PROJ, max_iters: int = MAX_ITERS,
            warm: Optional[np.ndarray] = None):
    """Euclidean projection of ``point`` onto ``poly``.

    Returns ``(x, report)``.  The returned point always satisfies the
    polytope constraints to ``EPS_FEAS``; when Dykstra's scheme stops on
    ``max_iters`` the report carries ``converged=False`` and ``x`` is the
    repaired last iterate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = np.asarray(point, dtype=float)
    if not np.isfinite(p).all():
        raise ValueError("point must be finite")
    inst = poly.instance
    if poly.single:
        return _project_single(poly, p), ProjectionReport(0, 0.0, True)

    N, I, J = inst.num_files, inst.num_locations, inst.num_caches
    reach = np.ascontiguousarray(inst.connectivity)
    Py, Pz = inst.split(p)
    # (u2y, u2z): Dykstra increment of the coupling block, the only state a warm start needs
    if warm is None:
        u2 = np.zeros(p.size)
    else:
        u2 = np.array(warm, dtype=float)
    u2y, u2z = inst.split(u2)
    y1, z1, it, gap = dykstra(np.ascontiguousarray(Py), np.ascontiguousarray(Pz), reach,
                              np.ascontiguousarray(poly.capacities, dtype=float),
                              u2y, u2z, float(tol), int(max_iters))
    # y1 meets capacities and boxes; clipping z to y restores the coupling
    z = np.where(poly.reach, np.minimum(z1, y1[:, None, :]), 0.0)
    x = inst.join(y1, z)
    return x, ProjectionReport(int(it), float(gap), bool(gap <= tol), u2)


# ---------------------------------------------------------------------------
# linear maximization


def _lmax_single(poly: Polytope, c: np.ndarray) -> np.ndarray:
    N = poly.instance.num_files
    C = float(poly.capacities[0])
    cy, cz = c[:N], c[N:]
    eff = cy + np.maximum(cz, 0.0)
    pos = np.flatnonzero(eff > 0)
    # descending value, lowest index first among ties
    pos = pos[np.lexsort((pos, -eff[pos]))]
    y = np.zeros(N)
    full = int(math.floor(C + 1e-12))
    y[pos[:full]] = 1.0
    if full < pos.size:
        frac = C - full
        if frac > 1e-12:
            y[pos[full]] = frac
    z = np.where(cz > 0, y, 0.0)
    return np.concatenate([y, z])


class _LPModel:
    """HiGHS model of ``X`` kept alive so successive objectives hot-start.

    ``agg_rows=(A, b)`` adds ``A @ Y <= b`` on the per-cache totals
    ``Y_j = sum_n y[n, j]``, carried as ``J`` auxiliary columns.
    """

    def __init__(self, poly: Polytope, agg_rows=None):
        import highspy

        inst = poly.instance
        N, I, J = inst.num_files, inst.num_locations, inst.num_caches
        reach_flat = np.broadcast_to(poly.reach, (N, I, J)).ravel()
        zcols = np.flatnonzero(reach_flat)               # kept routing coordinates
        ny, nz = N * J, zcols.size
        naux = J if agg_rows is not None else 0
        self.ny = ny
        self.zcols = zcols
        self.nvar = ny + nz + naux
        n_idx, i_idx, j_idx = np.unravel_index(zcols, (N, I, J))
        rows, cols, vals = [], [], []
        lo, hi = [], []
        r = 0
        # capacities: sum_n y[n, j] <= C_j
        for j in range(J):
            rows.append(np.full(N, r + j)); cols.append(np.arange(N) * J + j); vals.append(np.ones(N))
        lo.append(np.full(J, -np.inf)); hi.append(poly.capacities)
        r += J
        # one unit per request: sum_j z[n, i, j] <= 1
        rows.append(r + n_idx * I + i_idx); cols.append(ny + np.arange(nz)); vals.append(np.ones(nz))
        lo.append(np.full(N * I, -np.inf)); hi.append(np.ones(N * I))
        r += N * I
        # coupling: z[n,i,j] - y[n,j] <= 0
        cr = r + np.arange(nz)
        rows += [cr, cr]
        cols += [ny + np.arange(nz), n_idx * J + j_idx]
        vals += [np.ones(nz), -np.ones(nz)]
        lo.append(np.full(nz, -np.inf)); hi.append(np.zeros(nz))
        r += nz
        if agg_rows is not None:
            A_agg, b_agg = agg_rows
            A_agg = np.atleast_2d(np.asarray(A_agg, dtype=float))
            aux = ny + nz + np.arange(J)
            # sum_n y[n, j] - Y_j = 0
            for j in range(J):
                rows.append(np.full(N + 1, r + j))
                cols.append(np.append(np.arange(N) * J + j, aux[j]))
                vals.append(np.append(np.ones(N), -1.0))
            lo.append(np.zeros(J)); hi.append(np.zeros(J))
            r += J
            k = A_agg.shape[0]
            rr, cc = np.nonzero(A_agg)
            rows.append(r + rr); cols.append(aux[cc]); vals.append(A_agg[rr, cc])
            lo.append(np.full(k, -np.inf)); hi.append(np.asarray(b_agg, dtype=float))
            r += k
        A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(r, self.nvar))
        inf = highspy.kHighsInf
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("random_seed", 0)
        h.setOptionValue("threads", 1)
        lp = highspy.HighsLp()
        lp.num_col_ = self.nvar
        lp.num_row_ = r
        lp.col_cost_ = np.zeros(self.nvar)
        lp.col_lower_ = np.zeros(self.nvar)
        lp.col_upper_ = np.concatenate([np.ones(ny + nz), np.full(naux, inf)])
        lp.row_lower_ = np.where(np.isinf(np.concatenate(lo)), -inf, np.concatenate(lo))
        lp.row_upper_ = np.concatenate(hi)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = A.indptr
        lp.a_matrix_.index_ = A.indices
        lp.a_matrix_.value_ = A.data
        lp.sense_ = highspy.ObjSense.kMaximize
        h.passModel(lp)
        self.h = h
        self.highspy = highspy
        self.inst = inst

    def solve(self, c: np.ndarray):
        cost = np.zeros(self.nvar)
        cost[: self.ny] = c[: self.ny]
        cost[self.ny: self.ny + self.zcols.size] = c[self.ny:][self.zcols]
        h = self.h
        h.changeColsCost(self.nvar, np.arange(self.nvar, dtype=np.int32), cost)
        h.run()
        status = h.getModelStatus()
        if status != self.highspy.HighsModelStatus.kOptimal:
            raise Infeasible(f"LP solver ended with status {h.modelStatusToString(status)}")
        sol = np.asarray(h.getSolution().col_value)
        x = np.zeros(self.inst.dim)
        x[: self.ny] = sol[: self.ny]
        x[self.ny:][self.zcols] = sol[self.ny: self.ny + self.zcols.size]
        return x


class Infeasible(RuntimeError):
    """The constrained benchmark has no feasible point."""


def _clean(poly: Polytope, x: np.ndarray) -> np.ndarray:
    """Remove solver round-off so the point meets the constraints at EPS_FEAS."""
    x = np.clip(x, 0.0, 1.0)
    x[np.abs(x) < 1e-12] = 0.0
    y, z = poly.instance.split(x)
    z[...] = np.where(poly.reach, np.minimum(z, y[:, None, :]), 0.0)
    return x


def linear_maximize(poly: Polytope, c) -> np.ndarray:
    """A maximizer of ``c . x`` over ``poly``.

    Coordinates with non-positive effective coefficient are left empty; in
    the single-cache case ties on the capacity boundary go to the lowest file
    index.  The general case is solved as an LP (HiGHS dual simplex) and
    returns the solver's optimal vertex.
    """
    c = np.asarray(c, dtype=float)
    if not np.isfinite(c).all():
        raise ValueError("objective must be finite")
    if poly.single:
        return _lmax_single(poly, c)
    if not (c > 0).any():
        return np.zeros(poly.dim)
    if poly._lp is None:
        poly._lp = _LPModel(poly)
    return _clean(poly, poly._lp.solve(c))


def linear_maximize_constrained(poly: Polytope, c, agg_rows, bounds) -> np.ndarray:
    """Maximize ``c . x`` over ``poly`` subject to ``agg_rows @ Y <= bounds``,
    where ``Y_j = sum_n y[n, j]`` are the per-cache totals."""
    c = np.asarray(c, dtype=float)
    model = _LPModel(poly, agg_rows=(agg_rows, bounds))
    return _clean(poly, model.solve(c))


def diameter(poly: Polytope) -> float:
    """``sqrt(2 (J C + 1))`` with ``C`` the largest capacity."""
    J = poly.instance.num_caches
    return math.sqrt(2.0 * (J * poly.capacity_bound + 1.0))
