"""Event-driven simulator of the n-vertex forest-fire multigraph.

Every unordered pair of vertices (loops included) carries a growth clock of
rate 1/n, every vertex a fire clock of rate lambda.  Only the partition into
clusters is stored.  Under the ``dagger`` modification pairs inside a
cluster ring twice as often, so the cluster of a fixed vertex grows at rate
exactly its size.

The engine is an aggregate-rate Gillespie scheme: one exponential holding
time for the whole system, then a categorical choice of the event.  The
partition lives in flat integer arrays so that the numba kernels below can
be shared with the coupling module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .core import (BURN, GROWTH, ForestFireError, InvariantViolation, JumpPath, MassDistribution,
                   seeded_stream)
from .parallel import run_tasks

# slots of the integer state vector
N_, NFREE, S2, TAGGED, DAGGER, NEVENTS = range(6)
# event codes returned by the kernels
EV_NONE, EV_MERGE, EV_NOOP, EV_FIRE = 0, 1, 2, 3
RUN_DONE, RUN_END, RUN_FULL = 0, 1, 2


class InfeasibleInit(ForestFireError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one finite-n run.

    ``init`` is either a MassDistribution (rounded to cluster counts by the
    largest-remainder rule) or an explicit sequence of cluster sizes.
    """

    n: int
    lam: float = 0.0
    dagger: bool = False
    horizon: float = 1.0
    init: object = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ValueError("lambda must be finite and >= 0")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")


def total_growth_rate_formula(n, s2=0, dagger=False) -> float:
    """(n+1)/2 from the n(n+1)/2 pairs at rate 1/n, plus s2/n under dagger."""
    return (n + 1) / 2.0 + (s2 / n if dagger else 0.0)


def tagged_growth_rate(k: int, n: int, dagger: bool) -> float:
    """Rate at which the cluster of a fixed vertex, of size k, receives a growth event."""
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    if dagger:
        return float(k)
    return (k * (n - k) + k + k * (k - 1) // 2) / n


def partition_counts(init, n: int) -> np.ndarray:
    """Cluster counts (index l-1 = size l) realising ``init`` on n vertices.

    Target counts n*v_l/l are floored, then clusters are added in order of
    decreasing remainder while they fit; leftover vertices become singletons.
    """
    if init is None:
        init = MassDistribution.point_mass(1)
    if not isinstance(init, MassDistribution):
        sizes = np.asarray(init, dtype=np.int64)
        if sizes.size == 0 or np.any(sizes < 1):
            raise InfeasibleInit("explicit partition needs positive cluster sizes")
        if sizes.sum() != n:
            raise InfeasibleInit(f"explicit partition covers {sizes.sum()} vertices, not {n}")
        return np.bincount(sizes, minlength=2)[1:].astype(np.int64)
    v = init.masses
    ls = np.arange(1, len(v) + 1)
    x = n * v / ls
    counts = np.floor(x + 1e-9).astype(np.int64)
    used = int(np.dot(ls, counts))
    if used > n:
        raise InfeasibleInit(f"rounded partition uses {used} > {n} vertices")
    rest = n - used
    rem = x - counts
    for i in np.argsort(-rem, kind="stable"):
        if rem[i] <= 1e-9:
            break
        if ls[i] <= rest:
            counts[i] += 1
            rest -= ls[i]
    counts[0] += rest
    if int(np.dot(ls, counts)) != n:
        raise InfeasibleInit("largest-remainder repair failed")
    return counts


# ---------------------------------------------------------------------------
# numba kernels on the flat partition arrays
#
# cid[v]    cluster id of vertex v
# head[c]   first member of cluster c, nxt[v] next member (-1 ends), tail[c]
# size[c]   cluster size (0 for unused ids)
# free      stack of unused cluster ids, top index ist[NFREE]
# count[m]  number of clusters of size m
# fen       Fenwick tree over m * count[m], m = 1..n
# ist       integer scalars, see the slot names above

@numba.njit(cache=True)
def _fen_add(fen, i, d):
    n = fen.shape[0] - 1
    while i <= n:
        fen[i] += d
        i += i & (-i)


@numba.njit(cache=True)
def _fen_prefix(fen, i):
    s = 0
    while i > 0:
        s += fen[i]
        i -= i & (-i)
    return s


@numba.njit(cache=True)
def _size_change(count, fen, ist, m, d):
    count[m] += d
    _fen_add(fen, m, d * m)
    ist[S2] += d * (m * (m - 1) // 2)


@numba.njit(cache=True)
def _merge(cid, head, nxt, tail, size, free, count, fen, ist, ca, cb):
    """Union of clusters ca != cb; the shorter member list is relabelled."""
    if size[ca] < size[cb]:
        ca, cb = cb, ca
    sa = size[ca]
    sb = size[cb]
    v = head[cb]
    while v >= 0:
        cid[v] = ca
        v = nxt[v]
    nxt[tail[ca]] = head[cb]
    tail[ca] = tail[cb]
    size[ca] = sa + sb
    size[cb] = 0
    head[cb] = -1
    free[ist[NFREE]] = cb
    ist[NFREE] += 1
    _size_change(count, fen, ist, sa, -1)
    _size_change(count, fen, ist, sb, -1)
    _size_change(count, fen, ist, sa + sb, 1)
    return ca


@numba.njit(cache=True)
def _burn(cid, head, nxt, tail, size, free, count, fen, ist, c):
    """Turn every member of cluster c into a singleton."""
    s = size[c]
    if s == 1:
        return
    v = nxt[head[c]]
    first = head[c]
    nxt[first] = -1
    tail[c] = first
    size[c] = 1
    while v >= 0:
        w = nxt[v]
        ist[NFREE] -= 1
        d = free[ist[NFREE]]
        cid[v] = d
        head[d] = v
        tail[d] = v
        nxt[v] = -1
        size[d] = 1
        v = w
    _size_change(count, fen, ist, s, -1)
    count[1] += s
    _fen_add(fen, 1, s)


@numba.njit(cache=True)
def _pick_pair(rng, n):
    """Uniform unordered pair from the n(n+1)/2 pairs including loops."""
    a = min(int(rng.random() * n), n - 1)
    if rng.random() * (n + 1) < 2.0:
        return a, a
    b = min(int(rng.random() * (n - 1)), n - 2)
    if b >= a:
        b += 1
    return a, b


@numba.njit(cache=True)
def _run(cid, head, nxt, tail, size, free, count, fen, ist, fst, rng, t_end, max_events,
         log_t, log_s, log_p, log_k, nlog, out):
    """Advance the model to t_end or through max_events events.

    fst = [t, lambda].  Tagged-cluster changes are appended to the log
    arrays; the kernel stops early when they are full.  ``out`` receives the
    code and cluster sizes of the last event.  Returns (nlog, status) with
    status RUN_DONE, RUN_END (t_end reached) or RUN_FULL (log full, no
    event pending).
    """
    n = ist[N_]
    lam = fst[1]
    cap = log_t.shape[0]
    ev = 0
    out[0] = EV_NONE
    while ev < max_events:
        if nlog >= cap:
            return nlog, RUN_FULL
        base = 0.5 * (n + 1)
        extra = ist[S2] / n if ist[DAGGER] else 0.0
        fire = n * lam
        R = base + extra + fire
        dt = rng.standard_exponential() / R
        if fst[0] + dt > t_end:
            fst[0] = t_end
            return nlog, RUN_END
        fst[0] += dt
        ist[NEVENTS] += 1
        ev += 1
        p = ist[TAGGED]
        x = rng.random() * R
        if x < fire:
            v = min(int(rng.random() * n), n - 1)
            c = cid[v]
            out[0] = EV_FIRE
            out[1] = size[c]
            out[2] = 0
            if c == cid[p]:
                log_t[nlog] = fst[0]
                log_s[nlog] = 1
                log_p[nlog] = size[c]
                log_k[nlog] = BURN
                nlog += 1
            _burn(cid, head, nxt, tail, size, free, count, fen, ist, c)
        elif x < fire + base:
            a, b = _pick_pair(rng, n)
            ca = cid[a]
            cb = cid[b]
            out[1] = size[ca]
            out[2] = size[cb]
            if ca == cb:
                out[0] = EV_NOOP
            else:
                out[0] = EV_MERGE
                tc = cid[p]
                old = size[tc]
                c = _merge(cid, head, nxt, tail, size, free, count, fen, ist, ca, cb)
                if ca == tc or cb == tc:
                    log_t[nlog] = fst[0]
                    log_s[nlog] = size[c]
                    log_p[nlog] = old
                    log_k[nlog] = GROWTH
                    nlog += 1
        else:
            out[0] = EV_NOOP
            out[1] = 0
            out[2] = 0
    return nlog, RUN_DONE


@numba.njit(cache=True)
def _build(counts, n, cid, head, nxt, tail, size, free, count, fen, ist):
    """Lay out the partition with vertices labelled in increasing cluster size."""
    v = 0
    c = 0
    for m in range(1, counts.shape[0] + 1):
        for _ in range(counts[m - 1]):
            head[c] = v
            size[c] = m
            for i in range(m):
                cid[v] = c
                nxt[v] = v + 1 if i < m - 1 else -1
                v += 1
            tail[c] = v - 1
            _size_change(count, fen, ist, m, 1)
            c += 1
    k = 0
    for d in range(n - 1, c - 1, -1):
        free[k] = d
        k += 1
    ist[NFREE] = k


# ---------------------------------------------------------------------------
# Python interface

class ClusterSet:
    """Partition of n vertices with burnable clusters and a size histogram."""

    def __init__(self, n: int, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if int(np.dot(np.arange(1, len(counts) + 1), counts)) != n:
            raise InfeasibleInit("cluster counts do not cover n vertices")
        self.n = n
        self.cid = np.zeros(n, np.int64)
        self.head = np.full(n, -1, np.int64)
        self.nxt = np.full(n, -1, np.int64)
        self.tail = np.full(n, -1, np.int64)
        self.size = np.zeros(n, np.int64)
        self.free = np.zeros(n, np.int64)
        self.count = np.zeros(n + 1, np.int64)
        self.fen = np.zeros(n + 1, np.int64)
        self.ist = np.zeros(8, np.int64)
        self.ist[N_] = n
        _build(counts, n, *self.arrays)

    @property
    def arrays(self):
        return (self.cid, self.head, self.nxt, self.tail, self.size, self.free, self.count,
                self.fen, self.ist)

    def size_of(self, v: int) -> int:
        return int(self.size[self.cid[v]])

    def members(self, v: int) -> np.ndarray:
        out = []
        w = self.head[self.cid[v]]
        while w >= 0:
            out.append(w)
            w = self.nxt[w]
        return np.array(sorted(out), dtype=np.int64)

    def merge(self, a: int, b: int):
        ca, cb = self.cid[a], self.cid[b]
        if ca != cb:
            _merge(*self.arrays, ca, cb)

    def burn(self, v: int):
        _burn(*self.arrays, self.cid[v])

    @property
    def s2(self) -> int:
        return int(self.ist[S2])

    def histogram(self) -> np.ndarray:
        """counts[l-1] = number of clusters of size l, trimmed to the largest size."""
        nz = np.nonzero(self.count)[0]
        top = int(nz[-1]) if nz.size else 1
        return self.count[1:top + 1].copy()

    def below(self, m: int) -> int:
        """Number of vertices lying in clusters of size < m."""
        return int(_fen_prefix(self.fen, m - 1))

    def recount(self):
        """Rebuild every derived quantity from scratch and compare; raises on mismatch."""
        n = self.n
        sizes = self.size[self.cid]
        if np.any(sizes < 1):
            raise InvariantViolation("vertex in an empty cluster")
        counts = np.bincount(sizes, minlength=n + 1)
        if np.any(counts % np.maximum(np.arange(n + 1), 1)):
            raise InvariantViolation("cluster sizes inconsistent with membership")
        counts = counts // np.maximum(np.arange(n + 1), 1)
        counts[0] = 0
        if not np.array_equal(counts, self.count):
            raise InvariantViolation("size histogram disagrees with recount")
        ids = np.unique(self.cid)
        for c in ids:
            k = 0
            w = self.head[c]
            while w >= 0:
                if self.cid[w] != c:
                    raise InvariantViolation("member list crosses clusters")
                k += 1
                w = self.nxt[w]
            if k != self.size[c]:
                raise InvariantViolation("member list length differs from size")
        if len(ids) + int(self.ist[NFREE]) != n:
            raise InvariantViolation("free-id stack out of step with live clusters")
        m = np.arange(n + 1)
        if int(self.ist[S2]) != int(np.sum(counts * (m * (m - 1) // 2))):
            raise InvariantViolation("within-cluster pair count drifted")
        for i in (1, n // 2, n):
            if i >= 1 and self.below(i + 1) != int(np.sum(m[:i + 1] * counts[:i + 1])):
                raise InvariantViolation("Fenwick prefix drifted")


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    sizes: tuple


class Model:
    """Finite forest-fire process with a tagged vertex."""

    _LOG = 256

    def __init__(self, cfg: SimConfig, u: Optional[float] = None, rng=None, stream_id=0):
        self.cfg = cfg
        self.rng = rng if rng is not None else seeded_stream(cfg.seed, stream_id)
        self.counts0 = partition_counts(cfg.init, cfg.n)
        self.clusters = ClusterSet(cfg.n, self.counts0)
        self.clusters.ist[DAGGER] = int(cfg.dagger)
        if u is None:
            u = self.rng.random()
        self.u0 = float(u)
        p = min(int(math.floor(cfg.n * u)), cfg.n - 1)
        self.clusters.ist[TAGGED] = p
        self.tagged_vertex = p
        self.initial_size = self.clusters.size_of(p)
        self.fst = np.array([0.0, float(cfg.lam)])
        self._log = [np.zeros(self._LOG), np.zeros(self._LOG, np.int64), np.zeros(self._LOG, np.int64),
                     np.zeros(self._LOG, np.int64)]
        self._nlog = 0
        self._out = np.zeros(3, np.int64)

    @property
    def t(self) -> float:
        return float(self.fst[0])

    @property
    def n(self) -> int:
        return self.cfg.n

    @property
    def tagged_size(self) -> int:
        return self.clusters.size_of(self.tagged_vertex)

    @property
    def n_events(self) -> int:
        return int(self.clusters.ist[NEVENTS])

    def total_growth_rate(self) -> float:
        return total_growth_rate_formula(self.n, self.clusters.s2, self.cfg.dagger)

    def _advance(self, t_end, max_events):
        ist = self.clusters.ist
        start = int(ist[NEVENTS])
        while True:
            left = max_events - (int(ist[NEVENTS]) - start)
            self._nlog, status = _run(*self.clusters.arrays, self.fst, self.rng, float(t_end),
                                      left, *self._log, self._nlog, self._out)
            if status != RUN_FULL:
                return status
            self._log = [np.concatenate([a, np.zeros_like(a)]) for a in self._log]

    def step(self) -> Event:
        """Perform exactly one event and return it."""
        self._advance(np.inf, 1)
        code, a, b = (int(x) for x in self._out)
        kind = {EV_MERGE: "growth", EV_NOOP: "growth", EV_FIRE: "fire"}[code]
        return Event(self.t, kind, (a, b) if code != EV_FIRE else (a,))

    def run_until(self, t: float):
        """Advance to time t; the state afterwards includes every event at times <= t."""
        if t < self.t:
            raise ValueError(f"cannot run backwards from {self.t} to {t}")
        if t == self.t:
            return
        self._advance(t, np.iinfo(np.int64).max)

    def snapshot_vn(self) -> MassDistribution:
        h = self.clusters.histogram()
        masses = np.arange(1, len(h) + 1) * h / self.n
        return MassDistribution(masses, None, self.t)

    def burn_cluster_of(self, v: int):
        """Burn the cluster containing v outside the clock dynamics (testing aid)."""
        self.clusters.burn(v)

    def path(self) -> JumpPath:
        m = self._nlog
        t, s, p, k = (a[:m].copy() for a in self._log)
        return JumpPath(self.initial_size, t, s, k, p)


def init_model(cfg: SimConfig, u=None, stream_id=0) -> Model:
    return Model(cfg, u=u, stream_id=stream_id)


def total_growth_rate(model: Model) -> float:
    return model.total_growth_rate()


def step(model: Model) -> Event:
    return model.step()


def run_until(model: Model, t: float):
    model.run_until(t)


def snapshot_vn(model: Model) -> MassDistribution:
    return model.snapshot_vn()


def _replica_task(task):
    cfg, sid, snaps = task
    m = Model(cfg, stream_id=sid)
    out = []
    for t in snaps:
        m.run_until(t)
        out.append(m.snapshot_vn())
    m.run_until(max(cfg.horizon, m.t))
    return out, m.path()


def run_replicas(cfg: SimConfig, snapshots, replicas: int, workers=None):
    """Independent runs on streams 0..replicas-1 of cfg.seed.

    Returns (snapshots[r][i], tagged paths[r]).
    """
    snaps = sorted(float(t) for t in snapshots)
    if snaps and snaps[-1] > cfg.horizon:
        raise ValueError("snapshot beyond horizon")
    parts = run_tasks(_replica_task, [(cfg, r, snaps) for r in range(replicas)], workers)
    return [p[0] for p in parts], [p[1] for p in parts]


def snapshot_sigma(v, n: int, replicas: int = 1) -> np.ndarray:
    """Standard error of the replica mean of v^n_k, k = 1..len(v).

    Clusters rather than vertices are the independent units: v^n_k = k N_k / n
    with N_k roughly binomial, so the variance is k v_k (1 - v_k) / n.
    """
    v = np.asarray(v, dtype=float)
    k = np.arange(1, len(v) + 1)
    return np.sqrt(k * v * (1 - v) / (n * replicas))


def mean_snapshot(dists) -> np.ndarray:
    """Bucket-wise mean of mass vectors of differing lengths."""
    K = max(d.K for d in dists)
    acc = np.zeros(K)
    for d in dists:
        acc[:d.K] += d.masses
    return acc / len(dists)
