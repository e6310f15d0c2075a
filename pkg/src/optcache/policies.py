"""Online caching policies.

Every policy follows the same two-call protocol per slot::

    x_t = policy.decide(prediction_t, prices_t)   # before q_t is known
    policy.observe(c_t, cost_t)                   # after serving q_t

``decide`` receives the prediction for the slot being decided; the first
call (slot 1) may already carry a hint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (Infeasible, Polytope, diameter, linear_maximize,
                       linear_maximize_constrained, project, project_capped_simplex,
                       project_simplex)
from .model import SparseGradient


class ProtocolError(RuntimeError):
    """``decide``/``observe`` called out of order."""


class Policy:
    name = "policy"

    def __init__(self, poly: Polytope):
        self.poly = poly
        self.t = 0                  # slots observed so far
        self._pending = False
        self.last_h = 0.0
        self.unconverged = 0        # projections that stopped on the iteration cap

    def decide(self, prediction: Optional[SparseGradient] = None, prices=None) -> np.ndarray:
        if self._pending:
            raise ProtocolError(f"{self.name}: decide() twice without observe()")
        self._pending = True
        self.x = self._decide(prediction, prices)
        return self.x

    def observe(self, gradient: SparseGradient, cost: Optional[float] = None) -> None:
        if not self._pending:
            raise ProtocolError(f"{self.name}: observe() before decide()")
        self._pending = False
        self.t += 1
        self._observe(gradient, cost)

    def _decide(self, prediction, prices):
        raise NotImplementedError

    def _observe(self, gradient, cost):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# optimistic FTRL core


@dataclass
class OftrlState:
    """Running sums of the proximal OFTRL update.

    ``anchor_sum`` is ``sum_s sigma_s x_s``; ``sigma_sum`` is
    ``sigma * sqrt(h_sum)``.
    """

    anchor_sum: np.ndarray
    grad_sum: np.ndarray
    sigma: float
    h_sum: float = 0.0
    sigma_sum: float = 0.0


class Oftrl:
    """``x_{t+1} = argmin r_{0:t}(x) - (c_{1:t} + c~_{t+1}) . x`` over ``X``.

    With quadratic proximal terms the objective is
    ``sigma_sum/2 ||x - (anchor_sum + lin)/sigma_sum||^2`` plus a constant, so
    the update is one projection.  While no prediction error has been seen
    (``sigma_sum == 0``) it is a linear program.

    On a single-cache polytope the learner works on the caching block alone
    (regularizer and projection over ``y``, linear term ``c_y + c_z``) and
    serves with ``z = y``.
    """

    def __init__(self, poly: Polytope, sigma: Optional[float] = None, x_init=None):
        self.poly = poly
        m = poly.dim
        if sigma is None:
            sigma = 2.0 / diameter(poly)
        self.state = OftrlState(np.zeros(m), np.zeros(m), float(sigma))
        self.x_init = poly.uniform_point() if x_init is None else np.asarray(x_init, float)
        self._warm = None
        self.last_report = None
        self.unconverged = 0

    def point(self, linear: np.ndarray) -> np.ndarray:
        st = self.state
        if st.sigma_sum > 0 and self.poly.single:
            N = self.poly.instance.num_files
            target = (st.anchor_sum[:N] + self.poly.collapse(linear)) / st.sigma_sum
            return self.poly.expand(project_capped_simplex(target, self.poly.capacities[0]))
        if st.sigma_sum > 0:
            target = (st.anchor_sum + linear) / st.sigma_sum
            x, rep = project(self.poly, target, warm=self._warm)
            self._warm = rep.warm
            self.last_report = rep
            self.unconverged += not rep.converged
            return x
        if not linear.any():
            return self.x_init.copy()
        return linear_maximize(self.poly, linear)

    def update(self, c: SparseGradient, c_pred: Optional[SparseGradient], x: np.ndarray) -> float:
        st = self.state
        h = c.sq_dist(c_pred) if c_pred is not None else c.sq_norm()
        old = math.sqrt(st.h_sum)
        st.h_sum += h
        new = math.sqrt(st.h_sum)
        sigma_t = st.sigma * (new - old)
        if sigma_t > 0:
            st.anchor_sum += sigma_t * x
        st.sigma_sum = st.sigma * new
        c.add_to(st.grad_sum)
        return h


class OBC(Policy):
    """Optimistic bipartite caching."""

    name = "obc"

    def __init__(self, poly: Polytope, sigma: Optional[float] = None, x_init=None):
        super().__init__(poly)
        self.core = Oftrl(poly, sigma, x_init)
        self._pred = None

    @property
    def state(self) -> OftrlState:
        return self.core.state

    def _linear(self, pred):
        lin = self.core.state.grad_sum.copy()
        if pred is not None:
            pred.add_to(lin)
        return lin

    def _decide(self, prediction, prices):
        self._pred = prediction
        return self.core.point(self._linear(prediction))

    def _observe(self, gradient, cost):
        self.last_h = self.core.update(gradient, self._pred, self.x)
        self.unconverged = self.core.unconverged


def dual_update(cost_sum: float, t: int, a: float, beta: float) -> float:
    """``lambda_{t+1} = max(0, a_{t+1} * G_t / 2)`` with ``a_t = a t^-beta``."""
    step = a * (t + 1) ** (-beta)
    return max(0.0, step * cost_sum / 2.0)


class OEC(OBC):
    """Optimistic elastic caching: OFTRL on the Lagrangian with a shadow price
    for the long-term leasing budget.

    ``decide`` needs the prices of the slot being decided; ``observe`` needs
    the realised cost ``g_t(x_t)``.
    """

    name = "oec"

    def __init__(self, poly: Polytope, a: float = 1.0, beta: float = 0.5,
                 sigma: Optional[float] = None, x_init=None):
        if not poly.elastic:
            raise ValueError("OEC works on the elastic polytope")
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if a < 0:
            raise ValueError("a must be non-negative")
        if x_init is None:
            x_init = poly.zero_point()          # empty caches never exceed the budget
        super().__init__(poly, sigma, x_init)
        self.a = float(a)
        self.beta = float(beta)
        self.lam = 0.0                           # lambda_{t+1}, next multiplier
        self.cost_sum = 0.0
        self.price_sum = np.zeros(poly.dim)      # sum_i lambda_i s_i on the caching block
        self.lambdas: list[float] = []

    def _decide(self, prediction, prices):
        self._pred = prediction
        if self.lam != 0.0:
            if prices is None:
                raise ValueError("OEC needs the prices of the slot being decided")
            inst = self.poly.instance
            self.price_sum[: inst.n_cache_coords] += self.lam * np.tile(np.asarray(prices, float), inst.num_files)
        self.lambdas.append(self.lam)
        lin = self._linear(prediction) - self.price_sum
        return self.core.point(lin)

    def _observe(self, gradient, cost):
        if cost is None:
            raise ValueError("OEC needs the slot cost g_t(x_t)")
        self.cost_sum += float(cost)
        self.lam = dual_update(self.cost_sum, self.t, self.a, self.beta)
        self.last_h = self.core.update(gradient, self._pred, self.x)
        self.unconverged = self.core.unconverged


class XC(Policy):
    """Experts caching: online gradient ascent on the simplex mixes a
    prediction-free FTRL learner with a learner that follows the prediction.
    """

    name = "xc"

    def __init__(self, poly: Polytope, w: Optional[float] = None,
                 sigma: Optional[float] = None, weights=(0.5, 0.5), x_init=None):
        super().__init__(poly)
        self.pess = OBC(poly, sigma, x_init)
        self.w = float(poly.instance.w_max if w is None else w)
        self.u = np.asarray(weights, dtype=float)
        self.yp = self.yo = None
        self.last_l = (0.0, 0.0)

    def _decide(self, prediction, prices):
        self.yp = self.pess.decide(None)
        if prediction is None or prediction.nnz == 0:
            self.yo = np.zeros(self.poly.dim)
        else:
            self.yo = linear_maximize(self.poly, prediction.dense())
        return self.u[0] * self.yp + self.u[1] * self.yo

    def step_size(self, t: int) -> float:
        return 1.0 / (self.w * math.sqrt(t)) if self.w > 0 else 0.0

    def _observe(self, gradient, cost):
        l = np.array([gradient.dot(self.yp), gradient.dot(self.yo)])
        self.last_l = (float(l[0]), float(l[1]))
        self.u = project_simplex(self.u + self.step_size(self.t) * l)
        self.pess.observe(gradient)
        self.last_h = self.pess.last_h
        self.unconverged = self.pess.unconverged


class OGD(Policy):
    """Projected online gradient ascent with the anytime step
    ``eta_t = scale * D / (w sqrt(t))``."""

    name = "ogd"

    def __init__(self, poly: Polytope, eta_scale: float = 1.0, x_init=None):
        super().__init__(poly)
        self.eta_scale = float(eta_scale)
        self.x = poly.uniform_point() if x_init is None else np.asarray(x_init, float)
        self._grad = None
        self._warm = None
        w = poly.instance.w_max
        self._base = self.eta_scale * diameter(poly) / w if w > 0 else 0.0

    def step_size(self, t: int) -> float:
        return self._base / math.sqrt(t)

    def _decide(self, prediction, prices):
        if self._grad is None:
            return self.x.copy()
        if self._grad.nnz == 0:
            return self.x.copy()
        p = self.x.copy()
        p[self._grad.index] += self.step_size(self.t) * self._grad.value
        if self.poly.single:
            # gradient step on the caching block, served with z = y
            N = self.poly.instance.num_files
            y = project_capped_simplex(p[:N] + (p[N:] - self.x[N:]), self.poly.capacities[0])
            return self.poly.expand(y)
        x, rep = project(self.poly, p, warm=self._warm)
        self._warm = rep.warm
        self.unconverged += not rep.converged
        return x

    def _observe(self, gradient, cost):
        self._grad = gradient
        self.last_h = gradient.sq_norm()


def best_in_hindsight(poly: Polytope, gradient_sum, prices=None, budgets=None):
    """Best static decision for the accumulated gradient and its value.

    With ``prices`` (shape ``(T, J)``) and ``budgets`` (shape ``(T,)``) the
    decision must also satisfy ``sum_j s_j^t sum_n y[n,j] <= b_t`` in every
    slot.
    """
    c = np.asarray(gradient_sum, dtype=float)
    if prices is None:
        x = linear_maximize(poly, c)
        return x, float(c @ x)
    prices = np.atleast_2d(np.asarray(prices, dtype=float))
    budgets = np.asarray(budgets, dtype=float)
    if (budgets < 0).any():
        raise Infeasible("a negative budget leaves no feasible benchmark")
    x = linear_maximize_constrained(poly, c, prices, budgets)
    return x, float(c @ x)


def make_policy(spec: dict, poly: Polytope, elastic_poly: Optional[Polytope] = None) -> Policy:
    """Instantiate a policy arm from its config entry.

    Recognised keys: ``kind``, ``sigma`` (OFTRL scale), ``a``/``beta`` (OEC),
    ``w`` (XC step scale), ``eta_scale`` (OGD), ``elastic`` (run OBC/OGD on
    the leasable polytope) and ``init`` (``"uniform"`` or ``"zero"``).
    """
    kind = spec["kind"]
    sigma = spec.get("sigma")
    if kind == "oec" or spec.get("elastic"):
        poly = elastic_poly or Polytope(poly.instance, elastic=True)
    init = spec.get("init")
    if init not in (None, "uniform", "zero"):
        raise ValueError(f"unknown initial point {init!r}")
    x0 = None if init is None else (poly.zero_point() if init == "zero" else poly.uniform_point())
    if kind == "obc":
        return OBC(poly, sigma, x0)
    if kind == "oec":
        return OEC(poly, a=spec.get("a", 1.0), beta=spec.get("beta", 0.5), sigma=sigma, x_init=x0)
    if kind == "xc":
        return XC(poly, w=spec.get("w"), sigma=sigma, x_init=x0)
    if kind == "ogd":
        return OGD(poly, eta_scale=spec.get("eta_scale", 1.0), x_init=x0)
    raise ValueError(f"unknown policy kind {kind!r}")


POLICY_KINDS = ("obc", "oec", "xc", "ogd")
