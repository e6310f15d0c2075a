"""Domain types for the caching network: instances, requests, predictions,
gradients, and the per-slot utility.

A decision is a flat float vector ``x = (y, z)`` of length
``m = N*J + N*I*J``.  The caching block ``y`` (shape ``(N, J)``) comes first,
followed by the routing block ``z`` (shape ``(N, I, J)``), both in C order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

EPS_FEAS = 1e-9


class InvalidRequest(ValueError):
    """Raised when a request or prediction indexes outside the instance."""


class ConfigError(ValueError):
    """Raised when an instance or experiment document is malformed."""


@dataclass(frozen=True, eq=False)
class Instance:
    """Library size, topology, capacities and utility weights.

    Parameters
    ----------
    num_files, num_locations, num_caches : int
        ``N``, ``I`` and ``J``.
    capacities : array-like, shape (J,)
        Cache sizes in files; each must be below ``N``.
    connectivity : array-like, shape (I, J)
        Binary reachability matrix ``l[i, j]``.
    weights : array-like, shape (N, I, J)
        Utility per delivered file fraction.
    w_max : float, optional
        Global utility bound ``w``; defaults to ``weights.max()``.
    """

    num_files: int
    num_locations: int
    num_caches: int
    capacities: np.ndarray
    connectivity: np.ndarray
    weights: np.ndarray
    w_max: float = -1.0

    def __post_init__(self):
        N, I, J = int(self.num_files), int(self.num_locations), int(self.num_caches)
        if min(N, I, J) < 1:
            raise ConfigError("N, I and J must be positive integers")
        caps = np.array(self.capacities, dtype=float).reshape(-1)
        if caps.shape != (J,):
            raise ConfigError(f"capacities must have length J={J}, got {caps.shape}")
        conn = np.array(self.connectivity)
        if conn.shape != (I, J):
            raise ConfigError(f"connectivity must be {I}x{J}, got {conn.shape}")
        if not np.isin(conn, (0, 1)).all():
            raise ConfigError("connectivity entries must be 0 or 1")
        w = np.array(self.weights, dtype=float)
        if w.shape != (N, I, J):
            w = np.broadcast_to(w, (N, I, J)).copy()
        if (w < 0).any():
            raise ConfigError("utility weights must be non-negative")
        w_max = float(self.w_max)
        if w_max < 0:
            w_max = float(w.max()) if w.size else 0.0
        if (w > w_max).any():
            raise ConfigError("utility weights exceed the declared bound w")
        for a in (caps, w):
            a.setflags(write=False)
        conn = conn.astype(bool)
        conn.setflags(write=False)
        object.__setattr__(self, "num_files", N)
        object.__setattr__(self, "num_locations", I)
        object.__setattr__(self, "num_caches", J)
        object.__setattr__(self, "capacities", caps)
        object.__setattr__(self, "connectivity", conn)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "w_max", w_max)

    # layout -----------------------------------------------------------

    @property
    def dim(self) -> int:
        N, I, J = self.num_files, self.num_locations, self.num_caches
        return N * J + N * I * J

    @property
    def n_cache_coords(self) -> int:
        return self.num_files * self.num_caches

    @property
    def max_capacity(self) -> float:
        return float(self.capacities.max())

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Views ``(y, z)`` of a flat decision with shapes (N,J) and (N,I,J)."""
        N, I, J = self.num_files, self.num_locations, self.num_caches
        k = N * J
        return x[:k].reshape(N, J), x[k:].reshape(N, I, J)

    def join(self, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.concatenate([np.ravel(y), np.ravel(z)])

    def routing_index(self, n: int, i: int, j: int) -> int:
        N, I, J = self.num_files, self.num_locations, self.num_caches
        return N * J + (n * I + i) * J + j

    def cache_index(self, n: int, j: int) -> int:
        return n * self.num_caches + j

    def validate_violations(self) -> list[str]:
        out = []
        if (self.capacities >= self.num_files).any():
            out.append("C_j < N required")
        if (self.capacities < 0).any():
            out.append("C_j >= 0 required")
        return out

    def check(self):
        v = self.validate_violations()
        if v:
            raise ConfigError("; ".join(v))
        return self

    # serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        w = self.weights
        d: dict[str, Any] = {
            "N": self.num_files,
            "I": self.num_locations,
            "J": self.num_caches,
            "capacities": self.capacities.tolist(),
            "connectivity": self.connectivity.astype(int).tolist(),
            "w_max": self.w_max,
        }
        per_cache = w[:1, :1, :]
        if np.array_equal(w, np.broadcast_to(per_cache, w.shape)):
            d["weights"] = {"per_cache": per_cache.ravel().tolist()}
        else:
            d["weights"] = w.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        """Build an instance from a config document.

        Recognised layouts: ``{"kind": "single_cache", "N", "C", "w"}``,
        ``{"kind": "bipartite", ...}`` and the explicit form emitted by
        :meth:`to_dict`.  ``weights`` may be a full nested list, a scalar, or
        ``{"per_cache": [...]}`` / ``{"constant": w}``.
        """
        try:
            kind = d.get("kind", "explicit")
            if kind == "single_cache":
                return single_cache(int(d["N"]), float(d["C"]), float(d.get("w", 1.0)))
            N, I, J = int(d["N"]), int(d["I"]), int(d["J"])
            caps = d.get("capacities")
            if caps is None:
                caps = [float(d["C"])] * J
            conn = d.get("connectivity", [[1] * J for _ in range(I)])
            w = _weights_from_spec(d.get("weights", 1.0), N, I, J)
            return cls(N, I, J, caps, conn, w, float(d.get("w_max", -1.0)))
        except KeyError as e:
            raise ConfigError(f"instance document is missing field {e}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Instance":
        return cls.from_dict(json.loads(text))


def _weights_from_spec(spec, N, I, J) -> np.ndarray:
    if isinstance(spec, dict):
        if "per_cache" in spec:
            v = np.asarray(spec["per_cache"], dtype=float)
            if v.shape != (J,):
                raise ConfigError("per_cache weights need one value per cache")
            return np.broadcast_to(v, (N, I, J)).copy()
        if "constant" in spec:
            return np.full((N, I, J), float(spec["constant"]))
        raise ConfigError(f"unknown weight generator {sorted(spec)}")
    return np.broadcast_to(np.asarray(spec, dtype=float), (N, I, J)).copy()


def single_cache(num_files: int, capacity: float, w: float = 1.0) -> Instance:
    """One cache, one location: ``I = J = 1`` and ``l = 1``."""
    return Instance(num_files, 1, 1, [capacity], [[1]], np.full((num_files, 1, 1), w), w)


def bipartite(num_files, capacities, connectivity, per_cache_weights) -> Instance:
    conn = np.asarray(connectivity)
    I, J = conn.shape
    w = np.broadcast_to(np.asarray(per_cache_weights, dtype=float), (num_files, I, J))
    return Instance(num_files, I, J, capacities, conn, w.copy())


@dataclass(frozen=True)
class Request:
    file: int
    location: int = 0
    slot: int = 1


@dataclass(frozen=True)
class Prediction:
    """A predicted next request, or no hint at all when ``request`` is None."""

    request: Optional[Request] = None

    @property
    def empty(self) -> bool:
        return self.request is None


@dataclass(frozen=True, eq=False)
class SparseGradient:
    """Sparse m-vector: parallel ``index``/``value`` arrays (unique indices)."""

    index: np.ndarray
    value: np.ndarray
    dim: int
    slot: int = 0

    @classmethod
    def zeros(cls, dim: int, slot: int = 0) -> "SparseGradient":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), dim, slot)

    @property
    def nnz(self) -> int:
        return int(self.index.size)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.index] = self.value
        return out

    def add_to(self, acc: np.ndarray) -> None:
        acc[self.index] += self.value

    def dot(self, x: np.ndarray) -> float:
        return float(np.dot(self.value, x[self.index]))

    def sq_norm(self) -> float:
        return float(np.dot(self.value, self.value))

    def sq_dist(self, other: "SparseGradient") -> float:
        """``||self - other||^2`` evaluated on the union support."""
        if other.nnz == 0:
            return self.sq_norm()
        if self.nnz == 0:
            return other.sq_norm()
        idx = np.union1d(self.index, other.index)
        d = np.zeros(idx.size)
        d[np.searchsorted(idx, self.index)] += self.value
        d[np.searchsorted(idx, other.index)] -= other.value
        return float(np.dot(d, d))

    def as_dict(self) -> dict[int, float]:
        return {int(k): float(v) for k, v in zip(self.index, self.value)}


def _check_request(instance: Instance, n: int, i: int):
    if not (0 <= n < instance.num_files):
        raise InvalidRequest(f"file index {n} outside [0, {instance.num_files})")
    if not (0 <= i < instance.num_locations):
        raise InvalidRequest(f"location index {i} outside [0, {instance.num_locations})")


def gradient_of(instance: Instance, q: Request, weights: Optional[np.ndarray] = None) -> SparseGradient:
    """Gradient of the slot utility for request ``q``.

    Entries sit on the routing coordinates ``(n, i, j)`` of caches reachable
    from ``i``.  ``weights`` overrides the instance weights for this slot
    (shape ``(N, I, J)``).
    """
    n, i = int(q.file), int(q.location)
    _check_request(instance, n, i)
    w = instance.weights if weights is None else np.asarray(weights, dtype=float)
    js = np.flatnonzero(instance.connectivity[i])
    base = instance.routing_index(n, i, 0)
    return SparseGradient((base + js).astype(np.int64), w[n, i, js].astype(float), instance.dim, q.slot)


def prediction_to_gradient(instance: Instance, p: Optional[Prediction]) -> SparseGradient:
    if p is None or p.empty:
        return SparseGradient.zeros(instance.dim)
    return gradient_of(instance, p.request)


def evaluate_utility(instance: Instance, x: np.ndarray, q: Request, weights=None) -> float:
    """``f_t(x) = sum_j w[n,i,j] * z[n,i,j]`` for the requested ``(n, i)``."""
    n, i = int(q.file), int(q.location)
    _check_request(instance, n, i)
    w = instance.weights if weights is None else np.asarray(weights, dtype=float)
    _, z = instance.split(np.asarray(x, dtype=float))
    js = np.flatnonzero(instance.connectivity[i])
    return float(np.dot(w[n, i, js], z[n, i, js]))


def feasibility_violation(instance: Instance, x: np.ndarray, capacities=None) -> float:
    """Largest violation of the polytope constraints (0 for feasible points)."""
    caps = instance.capacities if capacities is None else np.asarray(capacities, dtype=float)
    y, z = instance.split(np.asarray(x, dtype=float))
    reach = instance.connectivity[None, :, :]
    v = [
        -x.min(initial=0.0),
        x.max(initial=0.0) - 1.0,
        (y.sum(axis=0) - caps).max(initial=0.0),
        (z.sum(axis=2) - 1.0).max(initial=0.0),
        (z - y[:, None, :] * reach).max(initial=0.0),
    ]
    return max(0.0, *v)


def is_feasible(instance: Instance, x: np.ndarray, capacities=None, eps: float = EPS_FEAS) -> bool:
    return feasibility_violation(instance, x, capacities) <= eps
