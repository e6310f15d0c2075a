"""Request, prediction and leasing-cost streams.

All generators are pure functions of their seed: ``take(T)`` always returns
the first ``T`` slots of the same stream, so shorter runs are prefixes of
longer ones.  Randomness comes from numpy's PCG64 bit generator seeded
through ``SeedSequence``; independent sub-streams are obtained with
``SeedSequence.spawn``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PRNG_NAME = "numpy.random.PCG64 (SeedSequence.spawn)"

REQUEST_KINDS = ("zipf", "uniform", "adversarial", "trace")
PREDICTION_MODES = ("perfect", "random_rho", "alternating_tau", "adversarial", "worst_case", "none")


class TraceError(ValueError):
    """Malformed trace file; the message carries the offending line number."""


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def child_seeds(seed, k: int) -> list[np.random.SeedSequence]:
    """The ``k`` children ``seed.spawn(k)`` would give on first use, without
    advancing the parent, so repeated calls agree."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return [np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (i,),
                                   pool_size=ss.pool_size) for i in range(k)]


def spawn_seeds(seed: int, names: Sequence[str]) -> dict[str, np.random.SeedSequence]:
    """One child ``SeedSequence`` per named stream, stable under reordering of runs."""
    root = np.random.SeedSequence(int(seed))
    return dict(zip(names, root.spawn(len(names))))


@dataclass
class RequestTrace:
    """A materialised request stream: ``files[t-1]``, ``locations[t-1]`` for slot ``t``."""

    files: np.ndarray
    locations: np.ndarray

    def __len__(self):
        return int(self.files.size)


# ---------------------------------------------------------------------------
# request sources


def zipf_pmf(num_files: int, zeta: float) -> np.ndarray:
    """``P(n) = (n+1)^-zeta / sum_k k^-zeta`` for 0-based file index ``n``."""
    ranks = np.arange(1, num_files + 1, dtype=float)
    p = ranks ** (-float(zeta))
    return p / p.sum()


class RequestSource:
    kind = "base"

    def __init__(self, num_files: int, num_locations: int = 1, seed=0):
        self.num_files = int(num_files)
        self.num_locations = int(num_locations)
        self.seed = seed
        self._slot = 0

    def _streams(self):
        files, locs = child_seeds(self.seed, 2)
        return make_rng(files), make_rng(locs)

    def _files(self, rng, T) -> np.ndarray:
        raise NotImplementedError

    def take(self, T: int) -> RequestTrace:
        """The first ``T`` requests of the stream."""
        rf, rl = self._streams()
        files = self._files(rf, int(T)).astype(np.int64)
        if self.num_locations == 1:
            locs = np.zeros(int(T), dtype=np.int64)
        else:
            # one uniform draw per slot keeps the stream prefix-consistent
            locs = np.floor(rl.random(int(T)) * self.num_locations).astype(np.int64)
        return RequestTrace(files, locs)

    def next(self):
        """Next request in sequence (1-based slot); agrees with ``take``."""
        from .model import Request

        if self._slot == 0:
            self._live = self._streams()
        rf, rl = self._live
        self._slot += 1
        f = int(self._files_at(rf, self._slot))
        loc = 0 if self.num_locations == 1 else int(rl.random() * self.num_locations)
        return Request(f, loc, self._slot)

    def _files_at(self, rng, t):
        return self._files(rng, 1)[0]


class ZipfSource(RequestSource):
    """Stationary Zipf popularity over the library, locations uniform."""

    kind = "zipf"

    def __init__(self, num_files, num_locations=1, zeta=1.2, seed=0):
        super().__init__(num_files, num_locations, seed)
        if zeta < 0:
            raise ValueError("zeta must be non-negative")
        self.zeta = float(zeta)
        self.pmf = zipf_pmf(self.num_files, self.zeta)
        self._cdf = np.cumsum(self.pmf)
        self._cdf[-1] = 1.0

    def _files(self, rng, T):
        # inverse CDF on one uniform per slot
        return np.searchsorted(self._cdf, rng.random(T), side="right")


class UniformSource(ZipfSource):
    kind = "uniform"

    def __init__(self, num_files, num_locations=1, seed=0):
        super().__init__(num_files, num_locations, 0.0, seed)


class AdversarialSource(RequestSource):
    """Round-robin over the whole library, so no static cache holds more than
    a ``C/N`` share of the requests."""

    kind = "adversarial"

    def _files(self, rng, T):
        return np.arange(T) % self.num_files

    def _files_at(self, rng, t):
        return (t - 1) % self.num_files


class TraceSource(RequestSource):
    """Replays an ingested trace.  ``ids[k]`` is the original id of dense file ``k``."""

    kind = "trace"

    def __init__(self, files, locations, ids, num_locations=None, slots=None):
        files = np.asarray(files, dtype=np.int64)
        locations = np.asarray(locations, dtype=np.int64)
        I = int(num_locations) if num_locations is not None else int(locations.max(initial=0)) + 1
        super().__init__(len(ids), I, 0)
        self.files = files
        self.locations = locations
        self.ids = list(ids)
        self.slots = np.arange(1, files.size + 1) if slots is None else np.asarray(slots)

    def __len__(self):
        return int(self.files.size)

    def _files_at(self, rng, t):
        return self.files[t - 1]

    def next(self):
        from .model import Request

        self._slot += 1
        t = self._slot
        return Request(int(self.files[t - 1]), int(self.locations[t - 1]), t)

    def take(self, T: int) -> RequestTrace:
        if T > len(self):
            raise ValueError(f"trace holds {len(self)} requests, {T} requested")
        return RequestTrace(self.files[:T].copy(), self.locations[:T].copy())


def ingest_trace(path, min_count: int = 1, num_locations: Optional[int] = None) -> TraceSource:
    """Read a header-less ``slot,file_id[,location]`` CSV.

    File ids are arbitrary strings mapped to dense indices in order of first
    appearance (after the ``min_count`` filter drops rarely requested
    files).  Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    rows = []
    last = None
    with path.open(newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            if len(rec) not in (2, 3):
                raise TraceError(f"{path}:{lineno}: expected 2 or 3 fields, got {len(rec)}")
            try:
                slot = int(rec[0])
            except ValueError:
                raise TraceError(f"{path}:{lineno}: slot {rec[0]!r} is not an integer") from None
            fid = rec[1].strip()
            if not fid:
                raise TraceError(f"{path}:{lineno}: empty file id")
            loc = 0
            if len(rec) == 3 and rec[2].strip():
                try:
                    loc = int(rec[2])
                except ValueError:
                    raise TraceError(f"{path}:{lineno}: location {rec[2]!r} is not an integer") from None
            if loc < 0 or (num_locations is not None and loc >= num_locations):
                raise TraceError(f"{path}:{lineno}: unknown location {loc}")
            if last is not None and slot < last:
                raise TraceError(f"{path}:{lineno}: slot {slot} decreases (previous {last})")
            last = slot
            rows.append((slot, fid, loc))
    if not rows:
        raise TraceError(f"{path}: no requests")
    counts: dict[str, int] = {}
    for _, fid, _ in rows:
        counts[fid] = counts.get(fid, 0) + 1
    rows = [r for r in rows if counts[r[1]] >= min_count]
    if not rows:
        raise TraceError(f"{path}: no file has at least {min_count} requests")
    index: dict[str, int] = {}
    for _, fid, _ in rows:
        index.setdefault(fid, len(index))
    files = [index[fid] for _, fid, _ in rows]
    locs = [loc for _, _, loc in rows]
    slots = [s for s, _, _ in rows]
    return TraceSource(files, locs, list(index), num_locations, slots)


def export_trace(path, source: TraceSource) -> None:
    """Write ``source`` in the schema read by :func:`ingest_trace`."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for s, f, l in zip(source.slots, source.files, source.locations):
            w.writerow([int(s), source.ids[f], int(l)])


def make_request_source(spec: dict, num_files: int, num_locations: int, seed) -> RequestSource:
    kind = spec.get("kind", "zipf")
    if kind == "zipf":
        return ZipfSource(num_files, num_locations, spec.get("zeta", 1.2), seed)
    if kind == "uniform":
        return UniformSource(num_files, num_locations, seed)
    if kind == "adversarial":
        return AdversarialSource(num_files, num_locations, seed)
    if kind == "trace":
        src = ingest_trace(spec["path"], spec.get("min_count", 1), num_locations)
        if src.num_files > num_files:
            raise ValueError(f"trace has {src.num_files} files but the instance only {num_files}")
        return src
    raise ValueError(f"unknown request source {kind!r}")


# ---------------------------------------------------------------------------
# predictions


@dataclass
class PredictionSource:
    """Predicted file per slot; ``-1`` means no hint.

    The predicted location is always the true one; only the file is
    perturbed.  Wrong predictions pick a uniformly random different file.
    """

    mode: str = "none"
    rho: float = 1.0
    tau: int = 1
    seed: object = 0

    def __post_init__(self):
        if self.mode not in PREDICTION_MODES:
            raise ValueError(f"unknown prediction mode {self.mode!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if int(self.tau) < 1:
            raise ValueError("tau must be a positive integer")
        self.tau = int(self.tau)

    def accurate_mask(self, T: int, rng=None) -> np.ndarray:
        t = np.arange(1, T + 1)
        if self.mode == "perfect":
            return np.ones(T, bool)
        if self.mode in ("adversarial", "worst_case"):
            return np.zeros(T, bool)
        if self.mode == "alternating_tau":
            return ((t - 1) // self.tau) % 2 == 0
        if self.mode == "random_rho":
            return rng.random(T) < self.rho
        return np.zeros(T, bool)

    def predict(self, files: np.ndarray, num_files: int) -> np.ndarray:
        """Predicted file for every slot of the true stream ``files``."""
        files = np.asarray(files, dtype=np.int64)
        T = files.size
        if self.mode == "none":
            return np.full(T, -1, dtype=np.int64)
        rng = make_rng(self.seed if isinstance(self.seed, np.random.SeedSequence) else int(self.seed))
        # both draws are made for every slot so the stream stays prefix-consistent
        u = rng.random((T, 2))
        u_acc, u_wrong = u[:, 0], u[:, 1]
        if self.mode == "random_rho":
            ok = u_acc < self.rho
        else:
            ok = self.accurate_mask(T)
        if num_files == 1:
            return files.copy()
        if self.mode == "worst_case":
            wrong = (files + 1) % num_files
        else:
            shift = 1 + np.floor(u_wrong * (num_files - 1)).astype(np.int64)
            wrong = (files + shift) % num_files
        return np.where(ok, files, wrong)


# ---------------------------------------------------------------------------
# leasing prices and budgets


@dataclass
class CostSource:
    """Per-cache prices ``U[0,1] * price_scale`` and per-slot budgets
    ``max(0, Normal(budget_mean, budget_std)) * budget_scale``."""

    num_caches: int
    price_scale: float = 1.0
    budget_mean: float = 0.5
    budget_std: float = 0.05
    budget_scale: float = 10.0
    seed: object = 0

    def take(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        sp, sb = child_seeds(self.seed, 2)
        prices = make_rng(sp).random((T, self.num_caches)) * self.price_scale
        b = make_rng(sb).normal(self.budget_mean, self.budget_std, T) if self.budget_std > 0 \
            else np.full(T, float(self.budget_mean))
        return prices, np.maximum(b, 0.0) * self.budget_scale

    @classmethod
    def from_dict(cls, d: dict, num_caches: int, seed) -> "CostSource":
        known = {"price_scale", "budget_mean", "budget_std", "budget_scale"}
        return cls(num_caches, seed=seed, **{k: float(v) for k, v in d.items() if k in known})
