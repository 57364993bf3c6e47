"""Joint construction of the finite tagged cluster C^n and the limit process C~.

Both processes start from one shared uniform U.  While the coupling holds
(s_bit = 0) the pair lives in one of four regions, given a size threshold K:

    E1  cn = ct <= K         jumps happen together
    E2  cn > K, ct > K        independent evolution
    E3  cn > K, ct = 1        waiting for the finite cluster to burn
    E4  cn = 1, ct > K        waiting for the limit process to explode

E5 is every state with s_bit = 1 (coupling lost, independent evolution),
E6 everything else, which the construction never reaches.

In E1 a growth event of the tagged cluster joins it to the cluster of a
uniform vertex j.  The labels of vertices increase with cluster size, so j
determines a uniform U = F_{L-1} + V v_L with L the size of j's cluster.
The same U drives the paintbox draw L~ from the limit law at the event time.
Under the dagger modification the tagged cluster grows at rate exactly its
size, which is the jump rate of C~.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import ForestFireError, InvariantViolation, MassDistribution, metric_dE, sample_sizes, seeded_stream
from .finite_model import (DAGGER, N_, S2, TAGGED, Model, SimConfig, _burn, _fen_prefix, _merge,
                           _pick_pair)
from .kinetics import Environment
from .limit_process import LimitSampler, _explode_at, _increment
from .parallel import run_tasks, share, shared
from .stats import proportion_ci

E1, E2, E3, E4, E5, E6 = 1, 2, 3, 4, 5, 6
REGION_NAMES = {E1: "E1", E2: "E2", E3: "E3", E4: "E4", E5: "E5", E6: "E6"}
CAUSES = ("none", "init", "paintbox", "self-edge", "small-fire", "E3-jump", "E4-jump")
(C_NONE, C_INIT, C_PAINTBOX, C_SELF, C_FIRE, C_E3, C_E4) = range(7)
# region changes allowed while the coupling holds
ALLOWED = {(E1, E2), (E2, E3), (E2, E4), (E3, E1), (E4, E1)}

# slots of the per-replica record
R_TAU, R_CAUSE, R_SUP, R_OCC = 0, 1, 2, 3          # R_OCC..R_OCC+4: time in E1..E5
R_CYCLE_BAD, R_DIST_BAD, R_E6, R_CYCLES, R_NEVENTS, R_CHECKS = 8, 9, 10, 11, 12, 13
REC = 14


class RegionE6Reached(InvariantViolation):
    pass


class HypothesisUnmet(ForestFireError):
    pass


@numba.njit(cache=True)
def _region(s, cn, ct, K):
    if s == 1:
        return E5
    if cn == ct and cn <= K:
        return E1
    if cn > K and ct > K:
        return E2
    if cn > K and ct == 1:
        return E3
    if cn == 1 and ct > K:
        return E4
    return E6


def classify_region(s_bit: int, cn: int, ctilde: int, K: int) -> int:
    """Region label 1..6 of the coupled state (see module docstring)."""
    if cn < 1 or ctilde < 1 or s_bit not in (0, 1):
        raise ValueError("invalid coupled state")
    return int(_region(int(s_bit), int(cn), int(ctilde), int(K)))


@numba.njit(cache=True)
def _fE(i):
    return 0.0 if i == 1 else 1.0 / i


@numba.njit(cache=True)
def _paintbox_u(fen, count, n, L, V):
    return (_fen_prefix(fen, L - 1) + V * L * count[L]) / n


@numba.njit(cache=True)
def _couple(cid, head, nxt, tail, size, free, count, fen, ist, lam, rng,
            Cc, times, Vt, amp, clk, M, K, T, u0, tobs, obs_cn, obs_ct, rec):
    """One coupled replica on [0, T]; fills rec, obs_cn and obs_ct."""
    n = ist[N_]
    p = ist[TAGGED]
    t = 0.0
    s = 0
    cn = size[cid[p]]
    ct = _increment(Cc, times, 0.0, u0)
    rec[R_TAU] = np.inf
    rec[R_CAUSE] = C_NONE
    if cn != ct:
        s = 1
        rec[R_TAU] = 0.0
        rec[R_CAUSE] = C_INIT
    reg = _region(s, cn, ct, K)
    sup = abs(_fE(cn) - _fE(ct))
    tc = np.inf          # next independent event of C~
    tc_ready = False
    j_obs = 0
    nobs = tobs.shape[0]
    while True:
        if reg == E6:
            rec[R_E6] = 1
            break
        indep = reg != E1
        if indep and not tc_ready:
            if ct > M:
                V = rng.random()
                u = math.sqrt(-math.expm1(math.log(V) / ct)) if V > 0 else 1.0
                tc = _explode_at(clk, times, Vt, amp, t, u)
            else:
                tc = t + rng.standard_exponential() / ct
            tc_ready = True
        base = 0.5 * (n + 1)
        extra = ist[S2] / n if ist[DAGGER] else 0.0
        fire = n * lam
        R = base + extra + fire
        tm = t + rng.standard_exponential() / R
        te = min(tm, tc) if indep else tm
        if te > T:
            rec[R_OCC + reg - 1] += T - t
            break
        while j_obs < nobs and tobs[j_obs] < te:
            obs_cn[j_obs] = cn
            obs_ct[j_obs] = ct
            j_obs += 1
        rec[R_OCC + reg - 1] += te - t
        t = te
        old_reg = reg
        old_s = s
        old_ct = ct
        if indep and tc <= tm:
            # C~ moves on its own; the pending model proposal is discarded
            tc_ready = False
            if ct > M:
                ct = 1
            else:
                if reg == E3:
                    s = 1
                    rec[R_TAU] = t
                    rec[R_CAUSE] = C_E3
                ct += _increment(Cc, times, t, rng.random())
        else:
            rec[R_NEVENTS] += 1
            tcl = cid[p]
            x = rng.random() * R
            if x < fire:
                v = min(int(rng.random() * n), n - 1)
                c = cid[v]
                if c == tcl:
                    if reg == E1:
                        s = 1
                        rec[R_TAU] = t
                        rec[R_CAUSE] = C_FIRE
                    elif reg == E3:
                        ct = 1
                        tc_ready = False
                _burn(cid, head, nxt, tail, size, free, count, fen, ist, c)
            else:
                tagged = False
                L = 0
                if x < fire + base:
                    a, b = _pick_pair(rng, n)
                    ca = cid[a]
                    cb = cid[b]
                    if ca == tcl or cb == tcl:
                        tagged = True
                        L = size[cb] if ca == tcl else size[ca]
                        if ca == cb:
                            L = 0
                    elif ca != cb:
                        _merge(cid, head, nxt, tail, size, free, count, fen, ist, ca, cb)
                else:
                    k = size[tcl]
                    if rng.random() * ist[S2] < k * (k - 1) // 2:
                        tagged = True
                        a = p
                        b = p
                        ca = tcl
                        cb = tcl
                if tagged:
                    if reg == E1:
                        Lj = L if L > 0 else size[tcl]
                        U = _paintbox_u(fen, count, n, Lj, rng.random())
                        Lt = _increment(Cc, times, t, min(U, 1.0 - 1e-16))
                        if L == 0:
                            s = 1
                            rec[R_TAU] = t
                            rec[R_CAUSE] = C_SELF
                        elif L != Lt:
                            s = 1
                            rec[R_TAU] = t
                            rec[R_CAUSE] = C_PAINTBOX
                        ct += Lt
                    elif reg == E4:
                        s = 1
                        rec[R_TAU] = t
                        rec[R_CAUSE] = C_E4
                    if L > 0:
                        _merge(cid, head, nxt, tail, size, free, count, fen, ist, ca, cb)
            cn = size[cid[p]]
        reg = _region(s, cn, ct, K)
        d = abs(_fE(cn) - _fE(ct))
        if d > sup:
            sup = d
        if s == 0:
            rec[R_CHECKS] += 1
            if (reg == E1 and cn != ct) or ((reg == E2 or reg == E3 or reg == E4) and d > 1.0 / K):
                rec[R_DIST_BAD] += 1
            if old_s == 0 and reg != old_reg:
                ok = False
                if old_reg == E1 and reg == E2:
                    ok = True
                elif old_reg == E2 and (reg == E3 or reg == E4):
                    ok = True
                elif (old_reg == E3 or old_reg == E4) and reg == E1:
                    ok = True
                    rec[R_CYCLES] += 1
                if not ok:
                    rec[R_CYCLE_BAD] += 1
        if reg == E1 or ct != old_ct:
            # a pending explosion time is only valid for the state it was drawn in
            tc_ready = False
    while j_obs < nobs:
        obs_cn[j_obs] = cn
        obs_ct[j_obs] = ct
        j_obs += 1
    rec[R_SUP] = sup


@dataclass(frozen=True)
class CouplingConfig:
    """Parameters of a batch of coupled replicas; the dagger modification is always on."""

    n: int
    lam: float
    K: int = 16
    T: float = 2.0
    seed: int = 0
    replicas: int = 100
    init: object = None
    tobs: tuple = ()

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n < 1 or self.lam < 0:
            raise ValueError("need n >= 1 and lambda >= 0")

    @property
    def dagger(self) -> bool:
        return True


@dataclass
class CouplingTrace:
    """Outcome of one coupled replica."""

    tau: float
    cause: str
    sup_dE: float
    occupation: dict
    cycles: int
    cycle_violations: int
    distance_violations: int
    checks: int
    obs_cn: np.ndarray
    obs_ct: np.ndarray
    u0: float

    def to_json(self):
        return {"tau": self.tau, "cause": self.cause, "sup_dE": self.sup_dE,
                "occupation": self.occupation, "cycles": self.cycles,
                "cycle_violations": self.cycle_violations, "distance_violations": self.distance_violations,
                "obs_cn": [int(x) for x in self.obs_cn], "obs_ct": [int(x) for x in self.obs_ct]}


def _trace(rec, ocn, oct_, u0) -> CouplingTrace:
    return CouplingTrace(
        tau=float(rec[R_TAU]), cause=CAUSES[int(rec[R_CAUSE])], sup_dE=float(rec[R_SUP]),
        occupation={REGION_NAMES[r]: float(rec[R_OCC + r - 1]) for r in range(1, 6)},
        cycles=int(rec[R_CYCLES]), cycle_violations=int(rec[R_CYCLE_BAD]),
        distance_violations=int(rec[R_DIST_BAD]), checks=int(rec[R_CHECKS]),
        obs_cn=ocn, obs_ct=oct_, u0=float(u0))


def _one(cfg: CouplingConfig, sampler: LimitSampler, replica: int) -> CouplingTrace:
    rng = seeded_stream(cfg.seed, replica)
    u0 = rng.random()
    model = Model(SimConfig(cfg.n, cfg.lam, True, cfg.T, cfg.init, cfg.seed), u=u0, rng=rng)
    tobs = np.asarray(sorted(cfg.tobs), dtype=float)
    ocn = np.zeros(len(tobs), np.int64)
    oct_ = np.zeros(len(tobs), np.int64)
    rec = np.zeros(REC)
    Cc, times, V, amp, clk = sampler._args()
    _couple(*model.clusters.arrays, float(cfg.lam), rng, Cc, times, V, amp, clk, sampler.M,
            int(cfg.K), float(cfg.T), u0, tobs, ocn, oct_, rec)
    if rec[R_E6]:
        raise RegionE6Reached(f"replica {replica} left the allowed regions")
    return _trace(rec, ocn, oct_, u0)


def _check_env(cfg, env: Environment):
    if env.T < cfg.T - 1e-12:
        raise ValueError(f"environment ends at {env.T} before horizon {cfg.T}")
    init = cfg.init if isinstance(cfg.init, MassDistribution) else None
    if init is not None:
        m = env.dist(0).masses
        a = np.zeros(max(len(m), init.K))
        a[:len(m)] += m
        a[:init.K] -= init.masses
        if np.max(np.abs(a)) > 1e-9:
            raise ValueError("environment was solved from a different initial law")


def run_coupling(cfg: CouplingConfig, env: Environment, replica: int = 0, sampler=None) -> CouplingTrace:
    """A single coupled replica (stream ``replica`` of cfg.seed)."""
    _check_env(cfg, env)
    sampler = sampler or LimitSampler(env)
    return _one(cfg, sampler, replica)


def _chunk_task(task):
    key, lo, hi = task
    cfg, sampler = shared(key)
    return [_one(cfg, sampler, r) for r in range(lo, hi)]


def run_replicas(cfg: CouplingConfig, env: Environment, sampler=None, workers=None, chunk=200):
    _check_env(cfg, env)
    sampler = sampler or LimitSampler(env)
    key = share((cfg, sampler))
    tasks = [(key, lo, min(lo + chunk, cfg.replicas)) for lo in range(0, cfg.replicas, chunk)]
    return [tr for part in run_tasks(_chunk_task, tasks, workers) for tr in part]


@dataclass
class FailureStats:
    n: int
    lam: float
    K: int
    T: float
    replicas: int
    p_fail: float
    p_fail_ci: tuple
    eps: float
    p_sup: float
    p_sup_ci: tuple
    sup_quantiles: dict
    causes: dict
    occupation: dict
    cycle_violations: int
    distance_violations: int
    checks: int
    traces: list = field(default_factory=list, repr=False)

    def to_json(self):
        d = {k: v for k, v in self.__dict__.items() if k != "traces"}
        d["p_fail_ci"] = list(self.p_fail_ci)
        d["p_sup_ci"] = list(self.p_sup_ci)
        d["replica"] = [tr.to_json() for tr in self.traces]
        return d


def failure_stats(cfg: CouplingConfig, env: Environment, eps=0.1, sampler=None, workers=None) -> FailureStats:
    """Empirical failure probability P[tau <= T] and law of sup_t d_E over the replicas."""
    if cfg.replicas < 30:
        raise ValueError("need at least 30 replicas")
    traces = run_replicas(cfg, env, sampler, workers)
    R = len(traces)
    tau = np.array([tr.tau for tr in traces])
    sup = np.array([tr.sup_dE for tr in traces])
    nf = int(np.sum(tau <= cfg.T))
    ns = int(np.sum(sup > eps))
    causes = {c: 0 for c in CAUSES[1:]}
    for tr in traces:
        if tr.cause != "none":
            causes[tr.cause] += 1
    occ = {r: float(np.mean([tr.occupation[r] for tr in traces])) for r in ("E1", "E2", "E3", "E4", "E5")}
    return FailureStats(
        n=cfg.n, lam=cfg.lam, K=cfg.K, T=cfg.T, replicas=R,
        p_fail=nf / R, p_fail_ci=proportion_ci(nf, R)[1:], eps=eps, p_sup=ns / R, p_sup_ci=proportion_ci(ns, R)[1:],
        sup_quantiles={str(q): float(np.quantile(sup, q)) for q in (0.5, 0.9, 0.99)},
        causes=causes, occupation=occ,
        cycle_violations=sum(tr.cycle_violations for tr in traces),
        distance_violations=sum(tr.distance_violations for tr in traces),
        checks=sum(tr.checks for tr in traces), traces=traces)


def sup_distance(cn_path, ct_path, times) -> float:
    """sup over the given times of d_E between two size paths (helper for tests)."""
    return max(metric_dE(cn_path.size_at(t), ct_path.size_at(t)) for t in times)


@dataclass(frozen=True)
class PaintboxCheck:
    rate: float
    bound: float
    sigma: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.rate <= self.bound + 3 * self.sigma


def paintbox_mismatch_bound_check(dist_a: MassDistribution, dist_b: MassDistribution, K: int, eta: float,
                                  trials: int = 1_000_000, seed: int = 0) -> PaintboxCheck:
    """Shared-uniform paintbox draws from two close laws disagree with probability <= 6 eta.

    Requires |a_k - b_k| <= eta / K^2 for k <= K and mass beyond K at most
    eta in both laws; raises HypothesisUnmet otherwise.
    """
    if K < 1 or not 0 < eta < 1:
        raise ValueError("need K >= 1 and 0 < eta < 1")
    a = np.zeros(K)
    b = np.zeros(K)
    a[:min(K, dist_a.K)] = dist_a.masses[:K]
    b[:min(K, dist_b.K)] = dist_b.masses[:K]
    gap = float(np.max(np.abs(a - b)))
    if gap > eta / K**2 * (1 + 1e-12):
        raise HypothesisUnmet(f"bucket gap {gap} exceeds eta/K^2 = {eta / K**2}")
    for d, name in ((dist_a, "first"), (dist_b, "second")):
        beyond = 1.0 - float(d.masses[:K].sum())
        if beyond > eta * (1 + 1e-12):
            raise HypothesisUnmet(f"{name} law has mass {beyond} beyond K, more than eta")
    u = seeded_stream(seed, 0).random(trials)
    ca = sample_sizes(dist_a, u)
    cb = sample_sizes(dist_b, u)
    rate = float(np.mean(ca != cb))
    sigma = math.sqrt(max(rate * (1 - rate), 1.0 / trials) / trials)
    return PaintboxCheck(rate, 6 * eta, sigma, trials)
