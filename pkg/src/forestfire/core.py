"""Shared value types, the state-space metric, paintbox sampling and seeding.

Cluster sizes live in E = {1, 2, ...} compactified by identifying the point
at infinity with 1.  The metric below makes that identification continuous.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

INFINITY = math.inf


class ForestFireError(Exception):
    """Base class for all errors raised by this package."""


class InvariantViolation(ForestFireError):
    """An internal invariant failed; signals a bug rather than a model event."""


class NonConservative(ForestFireError):
    pass


def _f(i):
    if i == 1 or i == INFINITY:
        return 0.0
    return 1.0 / i


def metric_dE(i, j) -> float:
    """Distance |f(i) - f(j)| with f(1) = f(inf) = 0 and f(i) = 1/i otherwise."""
    if i < 1 or j < 1:
        raise ValueError("sizes must be >= 1")
    return abs(_f(i) - _f(j))


@dataclass(frozen=True)
class TailModel:
    """Power-law tail P[L >= k] = amplitude * k**-0.5 for sizes k > cutoff."""

    cutoff: int
    amplitude: float

    def __post_init__(self):
        if self.amplitude < 0 or not np.isfinite(self.amplitude):
            raise ValueError(f"tail amplitude must be finite and >= 0, got {self.amplitude}")
        if self.cutoff < 0:
            raise ValueError("cutoff must be >= 0")

    @property
    def mass(self) -> float:
        return self.amplitude / math.sqrt(self.cutoff + 1.0)

    def survival(self, k):
        """Tail mass at sizes >= k, valid for k > cutoff."""
        return self.amplitude / np.sqrt(np.asarray(k, dtype=float))

    def density(self, k):
        return 0.5 * self.amplitude * np.asarray(k, dtype=float) ** -1.5

    def inverse(self, s: float) -> int:
        """Size whose upper-tail position is s, for s in (0, mass].

        Solves amplitude * k**-0.5 >= s > amplitude * (k+1)**-0.5; the result
        is always > cutoff.
        """
        if not 0.0 < s <= self.mass * (1 + 1e-12):
            raise ValueError(f"tail position {s} outside (0, {self.mass}]")
        k = math.floor((self.amplitude / s) ** 2)
        return max(k, self.cutoff + 1)

    def to_json(self):
        return {"cutoff": int(self.cutoff), "amplitude": float(self.amplitude)}


@dataclass(frozen=True)
class MassDistribution:
    """Mass fractions v_1..v_K of cluster sizes with an optional power-law tail.

    ``masses[l-1]`` holds v_l.  Instances are treated as immutable.
    """

    masses: np.ndarray
    tail: Optional[TailModel] = None
    as_of: float = 0.0
    tol: float = 1e-9

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.ndim != 1:
            raise ValueError("masses must be one-dimensional")
        if np.any(m < 0):
            raise ValueError("masses must be nonnegative")
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        if self.total > 1 + max(self.tol, 1e-9):
            raise NonConservative(f"total mass {self.total!r} exceeds 1")

    @property
    def K(self) -> int:
        return len(self.masses)

    @property
    def tail_mass(self) -> float:
        return self.tail.mass if self.tail is not None else 0.0

    @property
    def total(self) -> float:
        return float(self.masses.sum()) + self.tail_mass

    @property
    def defect(self) -> float:
        return self.total - 1.0

    def is_conservative(self, tol=None) -> bool:
        tol = self.tol if tol is None else tol
        return abs(self.defect) <= tol

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.masses)

    def first_moment(self) -> float:
        return float(np.dot(np.arange(1, self.K + 1), self.masses))

    def to_json(self):
        return {
            "as_of": float(self.as_of),
            "masses": [float(x) for x in self.masses],
            "tail": None if self.tail is None else self.tail.to_json(),
        }

    @classmethod
    def from_json(cls, obj, tol=1e-9):
        tail = obj.get("tail")
        if tail is not None:
            tail = TailModel(int(tail["cutoff"]), float(tail["amplitude"]))
        return cls(np.asarray(obj["masses"], dtype=float), tail, float(obj.get("as_of", 0.0)), tol)

    @classmethod
    def point_mass(cls, size: int = 1, as_of: float = 0.0):
        m = np.zeros(size)
        m[size - 1] = 1.0
        return cls(m, None, as_of)

    @classmethod
    def from_dict(cls, sizes: dict, as_of: float = 0.0):
        """Build from {size: mass}; e.g. {1: 0.5, 3: 0.5}."""
        K = max(sizes)
        m = np.zeros(K)
        for k, v in sizes.items():
            m[int(k) - 1] = v
        return cls(m, None, as_of)


def completed_tail_amplitude(dist: MassDistribution) -> float:
    """Amplitude of a k**-0.5 tail carrying exactly the residual mass 1 - sum(masses)."""
    r = 1.0 - float(dist.masses.sum())
    return max(r, 0.0) * math.sqrt(dist.K + 1.0)


def sample_size(dist: MassDistribution, u: float) -> int:
    """Inverse-CDF (paintbox) draw c = min{k : u < v_1 + ... + v_k}.

    When u lies beyond the finite sum the draw falls into the power-law tail.
    The tail keeps the k**-0.5 shape of ``dist.tail`` but carries exactly the
    residual mass, so that uniform u yields a proper law.
    """
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    cdf = dist.cdf()
    if cdf.size and u < cdf[-1]:
        return int(np.searchsorted(cdf, u, side="right")) + 1
    if dist.tail is None:
        raise NonConservative(
            f"u={u} exceeds the finite mass {cdf[-1] if cdf.size else 0.0} and no tail is attached")
    resid = 1.0 - (cdf[-1] if cdf.size else 0.0)
    s = 1.0 - u
    k = math.floor((dist.K + 1.0) * (resid / s) ** 2)
    return max(k, dist.K + 1)


def sample_sizes(dist: MassDistribution, u) -> np.ndarray:
    """Vectorised sample_size over an array of uniforms."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u >= 1)):
        raise ValueError("u must lie in [0, 1)")
    cdf = dist.cdf()
    top = cdf[-1] if cdf.size else 0.0
    out = np.searchsorted(cdf, u, side="right").astype(np.int64) + 1
    beyond = u >= top
    if np.any(beyond):
        if dist.tail is None:
            raise NonConservative(f"some u exceed the finite mass {top} and no tail is attached")
        r = 1.0 - top
        k = np.floor((dist.K + 1.0) * (r / (1.0 - u[beyond])) ** 2)
        out[beyond] = np.maximum(np.minimum(k, 4e18), dist.K + 1).astype(np.int64)
    return out


def seeded_stream(seed: int, stream_id: int) -> np.random.Generator:
    """Independent reproducible generator for (seed, stream_id)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))


def clock_stream(seed: int, stream_id: int) -> np.random.Generator:
    """Generator paired with seeded_stream(seed, stream_id) and independent of it.

    Samplers draw explosion clocks from it, so runs that differ only in when
    the clock is consulted share their growth randomness.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id), 1))
    return np.random.Generator(np.random.PCG64(ss))


def path_streams(seed: int, stream_id: int, path: int):
    """Growth and clock generators owned by a single path of a chunk."""
    return tuple(np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(int(seed), spawn_key=(int(stream_id), int(path), j)))) for j in (0, 1))


def dumps(obj) -> str:
    """JSON with round-trip float precision (Python's repr) and stable key order."""
    return json.dumps(obj, sort_keys=True, allow_nan=True)


GROWTH, BURN, EXPLOSION = 0, 1, 2
KIND_NAMES = ("growth", "burn", "explosion")


@dataclass(frozen=True, eq=False)
class JumpPath:
    """Event log of a tagged-cluster size process.

    ``prev_sizes`` records the size just before each event, so both the
    left-continuous and the cadlag version of the path can be rebuilt.
    """

    initial_size: int
    times: np.ndarray
    sizes: np.ndarray
    kinds: np.ndarray
    prev_sizes: Optional[np.ndarray] = None
    start_time: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise InvariantViolation("event times must be strictly increasing")
        k = np.asarray(self.kinds, dtype=np.int64)
        s = np.asarray(self.sizes, dtype=np.int64)
        if np.any(s[k != GROWTH] != 1):
            raise InvariantViolation("burn and explosion events must reset the size to 1")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "sizes", s)
        object.__setattr__(self, "kinds", k)

    @property
    def events(self):
        return [(float(t), int(s), KIND_NAMES[k]) for t, s, k in zip(self.times, self.sizes, self.kinds)]

    def size_at(self, t):
        """Cadlag value: includes every event at times <= t."""
        i = int(np.searchsorted(self.times, t, side="right"))
        return self.initial_size if i == 0 else int(self.sizes[i - 1])

    def count(self, kind, t=np.inf):
        return int(np.sum((self.kinds == kind) & (self.times <= t)))

    def to_json(self):
        return {
            "initial_size": int(self.initial_size),
            "start_time": float(self.start_time),
            "events": [[float(t), int(s), KIND_NAMES[k]] for t, s, k in zip(self.times, self.sizes, self.kinds)],
            "prev_sizes": None if self.prev_sizes is None else [int(x) for x in self.prev_sizes],
        }
