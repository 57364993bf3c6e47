"""Monte Carlo sampler of the limiting tagged-cluster process C.

From state k the process jumps at rate k; the increment has law l -> v_l(t)
at the jump time t.  Sizes can run off to infinity in finite time
(explosion), after which the process restarts from 1.  We follow jumps
explicitly until the size exceeds a threshold M and then draw the explosion
time from its exact survival law P[tau > y] = psi_y(s)^k: with V uniform,
tau is the horizon y solving psi_y(s) = V^(1/k).  That horizon is found by
running the characteristic through (s, V^(1/k)) forward in time until it
reaches psi = 1, i.e. upsilon = sqrt(1 - psi) = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .characteristics import CharacteristicCurve, CurveFamily, F_kernel, default_w_min, solve_psi
from .core import (EXPLOSION, GROWTH, ForestFireError, JumpPath, MassDistribution,
                   clock_stream, path_streams, seeded_stream)
from .kinetics import Environment, EnvTooShort, one_minus_X_kernel
from .parallel import run_tasks, share, shared
from .stats import binomial_z, chi2_gof

CHUNK = 5000
SIZE_CAP = 4.0e18
H_MAX = 0.02  # largest step of the explosion clock


class CurveFamilyTooSparse(ForestFireError):
    pass


# ---------------------------------------------------------------------------
# explosion clock

@numba.njit(cache=True)
def _build_table(times, V, amp, phi, t_gel, tgrid, wgrid, w_min):
    out = np.empty((tgrid.shape[0], wgrid.shape[0]))
    for a in range(tgrid.shape[0]):
        for b in range(wgrid.shape[0]):
            out[a, b] = F_kernel(times, V, amp, phi, t_gel, tgrid[a], wgrid[b], w_min)
    return out


@numba.njit(cache=True)
def _F_interp(tab, tg, wg, t, w):
    if w >= 1.0:
        return 1.0
    i = np.searchsorted(tg, t, side="right") - 1
    if i < 0:
        i = 0
    if i > tg.shape[0] - 2:
        i = tg.shape[0] - 2
    a = (t - tg[i]) / (tg[i + 1] - tg[i])
    a = min(max(a, 0.0), 1.0)
    j = np.searchsorted(wg, w, side="right") - 1
    if j < 0:
        j = 0
    if j > wg.shape[0] - 2:
        j = wg.shape[0] - 2
    b = (w - wg[j]) / (wg[j + 1] - wg[j])
    b = min(max(b, 0.0), 1.0)
    return ((1 - a) * ((1 - b) * tab[i, j] + b * tab[i, j + 1])
            + a * ((1 - b) * tab[i + 1, j] + b * tab[i + 1, j + 1]))


@numba.njit(cache=True)
def _urate(tab, tg, wg, t, u):
    return 0.5 * (1.0 - u * u) * _F_interp(tab, tg, wg, t, u)


@numba.njit(cache=True)
def _transport_to_gel(times, V, amp, i_gel, s, u0):
    """Move the characteristic through (s, upsilon=u0), s < t_gel, to t_gel.

    Before gelation X_t(psi(t)) is constant along characteristics, so the
    value at t_gel solves 1 - X_gel(1 - w^2) = 1 - X_s(1 - u0^2); the left
    side increases in w and bisection finds w.
    """
    i = np.searchsorted(times, s, side="right") - 1
    i = min(max(i, 0), times.shape[0] - 2)
    a = (s - times[i]) / (times[i + 1] - times[i])
    a = min(max(a, 0.0), 1.0)
    K = V.shape[1]
    G = one_minus_X_kernel(V[i], V[i + 1], a, (1 - a) * amp[i] + a * amp[i + 1], K, u0)
    lo = 0.0
    hi = 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if one_minus_X_kernel(V[i_gel], V[i_gel], 0.0, amp[i_gel], K, mid) < G:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@numba.njit(cache=True)
def _explosion_time(tab, tg, wg, t_gel, s, u0, t_end):
    """Time at which the characteristic started at (s, upsilon=u0) reaches upsilon = 0.

    Starts must be at or after t_gel (see _transport_to_gel).  Returns inf
    when the hit happens after t_end.  Steps are a fixed fraction of the time
    needed to reach zero at the current rate, so they shrink geometrically
    as upsilon -> 0, and are capped at H_MAX where the rate is small; the
    final stretch is linear.
    """
    t = max(s, t_gel)
    u = u0
    hit = np.inf
    for _ in range(1000000):
        if t > t_end:
            return np.inf
        r = _urate(tab, tg, wg, t, u)
        if u < 1e-10:
            hit = t + u / r
            break
        h = min(0.25 * u / r, H_MAX)
        k1 = -r
        u2 = u + 0.5 * h * k1
        k2 = -_urate(tab, tg, wg, t + 0.5 * h, u2)
        u3 = u + 0.5 * h * k2
        k3 = -_urate(tab, tg, wg, t + 0.5 * h, u3)
        u4 = u + h * k3
        k4 = -_urate(tab, tg, wg, t + h, u4)
        un = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if un <= 0.0 or u2 <= 0.0 or u3 <= 0.0 or u4 <= 0.0:
            hit = t + u / r
            break
        u = un
        t += h
    return hit if hit <= t_end else np.inf


@numba.njit(cache=True)
def _explode_at(clk, times, V, amp, s, u0):
    tab, tg, wg, t_gel, i_gel, t_end = clk
    if t_end < t_gel:
        return np.inf
    if s < t_gel:
        u0 = _transport_to_gel(times, V, amp, i_gel, s, u0)
        s = t_gel
    return _explosion_time(tab, tg, wg, t_gel, s, u0, t_end)


class ExplosionClock:
    """Tabulated F(t, w) on [t_gel, T] driving the forward characteristic for explosion times."""

    def __init__(self, env: Environment, w_min=None, dt=5e-3, n_w=120):
        self.w_min = default_w_min(env.K) if w_min is None else w_min
        self.t_gel = float(env.t_gel)
        self.i_gel = int(np.argmin(np.abs(env.times - env.t_gel)))
        self.t_end = float(env.T)
        if env.T > env.t_gel:
            tg = np.unique(np.concatenate([np.arange(env.t_gel, env.T, dt), [env.T]]))
        else:
            tg = np.array([env.t_gel, env.t_gel + 1.0])
        wg = np.concatenate([[0.0], np.geomspace(self.w_min, 1.0, n_w)])
        self.tg, self.wg = tg, wg
        if env.T > env.t_gel:
            self.table = _build_table(env.times, env.V, env.amplitudes, env.phi, env.t_gel, tg, wg, self.w_min)
        else:
            self.table = np.ones((2, len(wg)))
        self._env = env

    @property
    def packed(self):
        return (self.table, self.tg, self.wg, self.t_gel, self.i_gel, self.t_end)

    def explosion_time(self, s, psi):
        """Horizon y with psi_y(s) = psi (inf when y lies beyond the environment)."""
        e = self._env
        return _explode_at(self.packed, e.times, e.V, e.amplitudes, float(s),
                           math.sqrt(max(1.0 - psi, 0.0)))


# ---------------------------------------------------------------------------
# path kernels

@numba.njit(cache=True)
def _increment(Cc, times, t, u):
    """Paintbox draw from the masses interpolated at time t, tail completed."""
    n = times.shape[0]
    K = Cc.shape[1]
    i = np.searchsorted(times, t, side="right") - 1
    if i < 0:
        i = 0
    if i > n - 2:
        i = n - 2
    a = (t - times[i]) / (times[i + 1] - times[i])
    a = min(max(a, 0.0), 1.0)
    FK = (1 - a) * Cc[i, K - 1] + a * Cc[i + 1, K - 1]
    if u >= FK:
        r = 1.0 - FK
        s = 1.0 - u
        k = (K + 1.0) * (r / s) ** 2
        if k > SIZE_CAP:
            return np.int64(SIZE_CAP)
        return max(np.int64(k), K + 1)
    lo = 0
    hi = K - 1
    while lo < hi:
        m = (lo + hi) // 2
        if u < (1 - a) * Cc[i, m] + a * Cc[i + 1, m]:
            hi = m
        else:
            lo = m + 1
    return lo + 1


@numba.njit(cache=True)
def _run_batch(rng, rngc, Cc, times, Vt, amp, clk, N, s0, c0, T, M, tobs, stop_first):
    """Simulate N independent paths on [s0, T].

    c0 = 0 draws the starting size from the law at s0.  Returns the states at
    the observation times, explosion counts, first explosion times and the
    number of explosions that happened before gelation.
    """
    nobs = tobs.shape[0]
    obs = np.zeros((N, nobs), np.int64)
    nexp = np.zeros(N, np.int64)
    first = np.full(N, np.inf)
    njumps = np.zeros(N, np.int64)
    for p in range(N):
        t = s0
        c = c0 if c0 > 0 else _increment(Cc, times, s0, rng.random())
        j = 0
        while j < nobs and tobs[j] < s0:
            j += 1
        while True:
            if c > M:
                V = rngc.random()
                u0 = math.sqrt(-math.expm1(math.log(V) / c)) if V > 0 else 1.0
                tn = _explode_at(clk, times, Vt, amp, t, u0)
                while j < nobs and tobs[j] < tn:
                    obs[p, j] = c
                    j += 1
                if tn > T:
                    break
                nexp[p] += 1
                if nexp[p] == 1:
                    first[p] = tn
                t = tn
                c = 1
                if stop_first:
                    break
                continue
            tn = t + rng.standard_exponential() / c
            while j < nobs and tobs[j] < tn:
                obs[p, j] = c
                j += 1
            if tn > T:
                break
            c += _increment(Cc, times, tn, rng.random())
            njumps[p] += 1
            t = tn
        while j < nobs:
            obs[p, j] = c
            j += 1
    return obs, nexp, first, njumps


@numba.njit(cache=True)
def _run_one(rng, rngc, Cc, times, Vt, amp, clk, s0, c0, T, M):
    cap = 64
    et = np.empty(cap)
    es = np.empty(cap, np.int64)
    ep = np.empty(cap, np.int64)
    ek = np.empty(cap, np.int64)
    n = 0
    t = s0
    c = c0 if c0 > 0 else _increment(Cc, times, s0, rng.random())
    init = c
    while True:
        if c > M:
            V = rngc.random()
            u0 = math.sqrt(-math.expm1(math.log(V) / c)) if V > 0 else 1.0
            tn = _explode_at(clk, times, Vt, amp, t, u0)
            kind = 2
            new = np.int64(1)
        else:
            tn = t + rng.standard_exponential() / c
            kind = 0
            new = np.int64(0)
        if tn > T:
            break
        if kind == 0:
            new = c + _increment(Cc, times, tn, rng.random())
        if n == cap:
            cap *= 2
            et2 = np.empty(cap)
            es2 = np.empty(cap, np.int64)
            ep2 = np.empty(cap, np.int64)
            ek2 = np.empty(cap, np.int64)
            et2[:n] = et[:n]
            es2[:n] = es[:n]
            ep2[:n] = ep[:n]
            ek2[:n] = ek[:n]
            et, es, ep, ek = et2, es2, ep2, ek2
        et[n] = tn
        es[n] = new
        ep[n] = c
        ek[n] = kind
        n += 1
        t = tn
        c = new
    return init, et[:n], es[:n], ep[:n], ek[:n]


# ---------------------------------------------------------------------------
# public interface

class LimitSampler:
    """Bundles the environment tables needed by the path kernels."""

    def __init__(self, env: Environment, threshold=100_000, clock: Optional[ExplosionClock] = None,
                 w_min=None):
        if threshold < 1000:
            raise ValueError("threshold M must be at least 1000")
        self.env = env
        self.M = int(threshold)
        self.Cc = np.cumsum(env.V, axis=1)
        self.clock = clock if clock is not None else ExplosionClock(env, w_min=w_min)

    def _args(self):
        e = self.env
        return self.Cc, e.times, e.V, e.amplitudes, self.clock.packed

    def _check_T(self, T):
        if T > self.env.T + 1e-12:
            raise EnvTooShort(f"horizon {T} beyond environment end {self.env.T}")

    def path(self, T, seed, stream_id=0, s0=0.0, c0=0) -> JumpPath:
        self._check_T(T)
        rng, rngc = seeded_stream(seed, stream_id), clock_stream(seed, stream_id)
        init, et, es, ep, ek = _run_one(rng, rngc, *self._args(), float(s0), int(c0), float(T), self.M)
        kinds = np.where(ek == 2, EXPLOSION, GROWTH)
        return JumpPath(int(init), et, es, kinds, ep, float(s0))

    def batch(self, N, seed, T, tobs=(), s0=0.0, c0=0, stop_first=False, stream_base=0, workers=None,
              paired=False):
        """Run N paths split into fixed chunks of independent streams.

        The chunking depends only on N, so results do not depend on the
        number of workers.  With ``paired`` every path owns its streams, so
        two samplers that differ only in the threshold see the same growth
        and clock randomness path by path (slower: two generators per path).
        """
        self._check_T(T)
        tobs = np.asarray(sorted(tobs), dtype=float)
        chunks = []
        done = 0
        sid = stream_base
        while done < N:
            m = min(CHUNK, N - done)
            chunks.append((sid, m))
            done += m
            sid += 1
        key = share(self)
        tasks = [(key, seed, s, m, float(T), tobs, float(s0), int(c0), bool(stop_first), bool(paired))
                 for s, m in chunks]
        parts = run_tasks(_batch_task, tasks, workers)
        obs = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, len(tobs)), np.int64)
        return (obs, np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts]),
                np.concatenate([p[3] for p in parts]))


def _batch_task(task):
    key, seed, sid, m, T, tobs, s0, c0, stop_first, paired = task
    sampler = shared(key)
    if not paired:
        rng, rngc = seeded_stream(seed, sid), clock_stream(seed, sid)
        return _run_batch(rng, rngc, *sampler._args(), m, s0, c0, T, sampler.M, tobs, stop_first)
    parts = [_run_batch(*path_streams(seed, sid, p), *sampler._args(), 1, s0, c0, T, sampler.M, tobs, stop_first)
             for p in range(m)]
    return tuple(np.concatenate([q[i] for q in parts]) for i in range(4))


def sample_path(env: Environment, T, M=100_000, seed=0, stream_id=0, sampler=None) -> JumpPath:
    """One path of C on [0, T] with explosion events logged."""
    sampler = sampler or LimitSampler(env, M)
    return sampler.path(T, seed, stream_id)


@dataclass(frozen=True, eq=False)
class EmpiricalLaw(MassDistribution):
    """Empirical law of C_t; sizes above K are counted in ``overflow``."""

    counts: Optional[np.ndarray] = None
    n_paths: int = 0
    overflow: int = 0

    @property
    def stderr(self):
        p = self.masses
        return np.sqrt(p * (1 - p) / max(self.n_paths, 1))

    def z_scores(self, p, buckets=20):
        return binomial_z(self.counts[:buckets], self.n_paths, np.asarray(p)[:buckets])

    def chi2(self, p, buckets=20):
        return chi2_gof(self.counts[:buckets], self.n_paths, np.asarray(p)[:buckets])


def law_from_states(states, K, t) -> EmpiricalLaw:
    states = np.asarray(states)
    N = len(states)
    counts = np.bincount(states[states <= K], minlength=K + 1)[1:K + 1]
    return EmpiricalLaw(counts / N, None, float(t), 1e-9, counts, N, int(np.sum(states > K)))


def empirical_law(env: Environment, t, N, seed, M=100_000, sampler=None, workers=None) -> EmpiricalLaw:
    """Empirical distribution of C_t over N independent paths."""
    if N < 1000:
        raise ValueError("N must be at least 1000")
    sampler = sampler or LimitSampler(env, M)
    obs, *_ = sampler.batch(N, seed, max(t, env.times[1]), tobs=[t], workers=workers)
    return law_from_states(obs[:, 0], env.K, t)


@dataclass
class ExplosionStats:
    T: float
    n_paths: int
    mean: float
    stderr: float
    predicted: float
    z: float
    pre_gel_explosions: int
    paths_with_explosion: int

    @property
    def ci(self):
        return self.mean - 1.96 * self.stderr, self.mean + 1.96 * self.stderr

    def to_json(self):
        d = dict(self.__dict__)
        d["ci"] = list(self.ci)
        return d


def explosion_count_stats(env: Environment, T, N, seed, M=100_000, sampler=None, workers=None):
    """Mean number of explosions in [0, T] against the integral of phi."""
    sampler = sampler or LimitSampler(env, M)
    _, nexp, first, _ = sampler.batch(N, seed, T, workers=workers)
    mean = float(nexp.mean())
    se = float(nexp.std(ddof=1) / math.sqrt(N))
    pred = env.int_phi(T)
    z = (mean - pred) / se if se > 0 else (0.0 if mean == pred else math.inf)
    return ExplosionStats(float(T), int(N), mean, se, float(pred), float(z),
                          int(np.sum(first < env.t_gel)), int(np.sum(nexp > 0)))


def explosion_prob_check(env: Environment, curves, s, y, N, seed, M=100_000, sampler=None,
                         workers=None, paired=False):
    """No-explosion frequency on (s, y] from C_s = 1 against psi_y(s).

    ``paired`` is passed to LimitSampler.batch; use it when comparing runs
    that differ only in the threshold.  Returns (empirical, predicted, z).
    """
    if y <= env.t_gel:
        raise ValueError(f"horizon {y} is not after gelation; explosions are impossible before it")
    if s >= y:
        raise ValueError("need s < y")
    curve = _pick_curve(env, curves, y)
    sampler = sampler or LimitSampler(env, M)
    _, nexp, _, _ = sampler.batch(N, seed, y, s0=s, c0=1, stop_first=True, workers=workers, paired=paired)
    emp = float(np.mean(nexp == 0))
    pred = float(curve.psi_at(s))
    sd = math.sqrt(pred * (1 - pred) / N)
    z = (emp - pred) / sd if sd > 0 else 0.0
    return emp, pred, z


def _pick_curve(env, curves, y) -> CharacteristicCurve:
    if curves is None:
        return solve_psi(env, y)
    if isinstance(curves, CharacteristicCurve):
        curves = CurveFamily([curves])
    try:
        return curves.get(y)
    except KeyError:
        hs = curves.horizons
        raise CurveFamilyTooSparse(f"no curve at horizon {y}; family covers {hs.min():.4g}..{hs.max():.4g}")
