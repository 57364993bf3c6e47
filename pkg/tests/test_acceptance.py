"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Runtime budgets are measured on the machine running the suite with the
worker count taken from $WORKERS (default 1).
"""
import math
import time

import numpy as np
import pytest

from forestfire.characteristics import (default_horizons, noncrossing_violations, pregel_constancy, resolved_at_gel,
                                        solve_family, solve_psi, upper_bound_violations)
from forestfire.core import MassDistribution, TailModel, completed_tail_amplitude
from forestfire.coupling import CouplingConfig, RegionE6Reached, failure_stats, paintbox_mismatch_bound_check
from forestfire.finite_model import SimConfig, mean_snapshot, run_replicas, snapshot_sigma
from forestfire.kinetics import (borel_vk, burn_rate_integral_check, mean_cluster_size, solve_cffe,
                                 solve_smoluchowski, tail_fit)
from forestfire.limit_process import LimitSampler, empirical_law, explosion_count_stats, explosion_prob_check
from forestfire.parallel import default_workers
from forestfire.stats import chi2_gof

MONO = MassDistribution.point_mass(1)
SEED = 0


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion straight to the terminal and assert it."""
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def envs():
    """Controlled solutions on [0, 3] for K = 2048, 4096, 8192 with solve times."""
    out = {}
    for K in (2048, 4096, 8192):
        t0 = time.perf_counter()
        env = solve_cffe(MONO, K, T=3.0)
        out[K] = (env, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def env(envs):
    return envs[4096][0]


@pytest.fixture(scope="module")
def sampler(env):
    return LimitSampler(env, threshold=100_000)


def test_criterion_01_smoluchowski_oracle(verdict):
    grid = np.linspace(0.0, 1.0, 1001)
    solve_smoluchowski(MONO, 50, grid[:3])  # load compiled kernels
    t0 = time.perf_counter()
    sol = solve_smoluchowski(MONO, 50, grid)
    dt = time.perf_counter() - t0
    k = np.arange(1, 51)
    err = max(float(np.max(np.abs(sol.V[i] - borel_vk(k, t)))) for i, t in enumerate(grid))
    verdict(1, "Smoluchowski vs closed form, K=50", err <= 1e-8 and dt <= 5.0,
            f"max abs error {err:.2e} (<= 1e-8), runtime {dt:.2f} s (<= 5 s)")


def test_criterion_02_pregel_coincidence(verdict):
    grid = np.linspace(0.0, 0.95, 951)
    t0 = time.perf_counter()
    cf = solve_cffe(MONO, 4096, grid)
    dt = time.perf_counter() - t0
    sm = solve_smoluchowski(MONO, 4096, grid)
    diff = float(np.max(np.abs(cf.V - sm.V)))
    phi_zero = bool(np.all(cf.phi == 0))
    verdict(2, "controlled solution equals Smoluchowski on [0, 0.95]", diff <= 1e-7 and dt <= 30.0 and phi_zero,
            f"max bucket difference {diff:.2e} (<= 1e-7), K=4096 runtime {dt:.1f} s (<= 30 s)")


def test_criterion_03_conservation_and_control(envs, verdict):
    Ks = sorted(envs)
    defect = {K: float(np.max(np.abs(envs[K][0].defect))) for K in Ks}
    burn = {K: burn_rate_integral_check(envs[K][0], 2.0) for K in Ks}
    env = envs[4096][0]
    pre = env.phi[env.times < 1.0]
    ok = (defect[4096] <= 5e-3 and defect[2048] > defect[4096] > defect[8192]
          and bool(np.all(pre == 0.0)) and burn[4096] <= 5e-3 and burn[2048] > burn[4096] > burn[8192])
    verdict(3, "conservation, control and burn-rate identity", ok,
            "defect " + ", ".join(f"K={K}: {defect[K]:.2e}" for K in Ks)
            + "; burn residual " + ", ".join(f"K={K}: {burn[K]:.2e}" for K in Ks)
            + f"; phi before t=1 all zero: {bool(np.all(pre == 0.0))}"
            + "; solve times " + ", ".join(f"{envs[K][1]:.0f} s" for K in Ks))


def test_criterion_04_tail_law(env, verdict):
    parts, ok = [], True
    for t in (1.5, 2.0, 3.0):
        slope, amp = tail_fit(env, t, 400, 2000)
        ref = math.sqrt(2 * env.phi_at(t) / math.pi)
        rel = abs(amp - ref) / ref
        ok &= abs(slope + 0.5) <= 0.05 and rel <= 0.15
        parts.append(f"t={t}: slope {slope:.4f}, amplitude {amp:.4f} vs {ref:.4f} ({100 * rel:.1f}%)")
    verdict(4, "k^-1/2 tail, K=4096", ok, "; ".join(parts))


def test_criterion_05_mean_cluster_size(env, verdict):
    ts = np.round(np.arange(0.0, 0.9001, 0.05), 10)
    rel = [abs(mean_cluster_size(env, t) * (1 - t) - 1) for t in ts]
    worst = float(np.max(rel))
    verdict(5, "mean cluster size 1/(1-t) for t <= 0.9", worst <= 0.01,
            f"max relative error {worst:.2e} over {len(ts)} times (<= 1e-2)")


def test_criterion_06_finite_er(verdict):
    n, R = 100_000, 50
    snaps_t = [0.25, 0.5, 0.75]
    t0 = time.perf_counter()
    snaps, _ = run_replicas(SimConfig(n, 0.0, False, 0.75, None, SEED), snaps_t, R)
    dt = time.perf_counter() - t0
    sup, z = 0.0, None
    for i, t in enumerate(snaps_t):
        m = mean_snapshot([s[i] for s in snaps])
        K = max(len(m), 10)
        m = np.pad(m, (0, K - len(m)))
        for r in snaps:
            d = np.pad(r[i].masses, (0, K - r[i].K))
            sup = max(sup, float(np.max(np.abs(d - borel_vk(np.arange(1, K + 1), t)))))
        if t == 0.5:
            ref = borel_vk(np.arange(1, 11), t)
            z = (m[:10] - ref) / snapshot_sigma(ref, n, R)
    ok = bool(np.all(np.abs(z) <= 3)) and sup <= 0.01 and dt <= 300
    verdict(6, "finite-n Erdos-Renyi vs closed form, n=1e5, 50 replicas", ok,
            f"t=0.5 bucket z-scores {np.array2string(z, precision=2)} (|z| <= 3); "
            f"sup over replicas, l and t {sup:.2e} (<= 1e-2); runtime {dt:.1f} s on {default_workers()} worker(s)")


def test_criterion_07_tagged_law(env, sampler, verdict):
    parts, ok = [], True
    t0 = time.perf_counter()
    for t in (0.5, 2.0):
        law = empirical_law(env, t, 100_000, SEED, sampler=sampler)
        stat, dof, p = law.chi2(env.masses_at(t)[:20])
        ok &= p >= 0.01
        parts.append(f"t={t}: chi2={stat:.1f} dof={dof} p={p:.3f}")
    dt = time.perf_counter() - t0
    ok &= dt <= 300
    verdict(7, "law of C_t vs solver, N=1e5", ok, "; ".join(parts) + f"; runtime {dt:.0f} s")


def test_criterion_08_explosion_probability(env, sampler, verdict):
    # paired streams: path by path the 4M run reuses the randomness of the M run, so the two runs
    # differ only through the threshold
    big = LimitSampler(env, threshold=400_000, clock=sampler.clock)
    parts, ok = [], True
    for y in (1.5, 2.5):
        c = solve_psi(env, y)
        emp, pred, z = explosion_prob_check(env, c, 0.0, y, 100_000, SEED, sampler=sampler, paired=True)
        emp4, _, _ = explosion_prob_check(env, c, 0.0, y, 100_000, SEED, sampler=big, paired=True)
        sigma = math.sqrt(pred * (1 - pred) / 100_000)
        shift = abs(emp - emp4) / sigma
        ok &= abs(z) <= 3 and shift < 1
        parts.append(f"y={y}: empirical {emp:.5f} vs psi_y(0) {pred:.5f}, z={z:.2f}; M->4M shift {shift:.2f} sigma")
    verdict(8, "no-explosion probability vs characteristics", ok, "; ".join(parts))


def test_criterion_09_explosion_count(env, sampler, verdict):
    st = explosion_count_stats(env, 3.0, 100_000, SEED, sampler=sampler)
    ok = abs(st.z) <= 3 and st.pre_gel_explosions == 0
    verdict(9, "mean explosions on [0, 3] vs integral of phi", ok,
            f"mean {st.mean:.5f} +- {st.stderr:.5f} vs {st.predicted:.5f} (z={st.z:.2f}); "
            f"first explosions before t=1: {st.pre_gel_explosions}")


def test_criterion_10_characteristics(env, verdict):
    fam = solve_family(env, default_horizons(env, 16))
    res = max(c.residual_stats["max_scaled_residual"] for c in fam.curves)
    # constancy is asserted on curves the truncation resolves at t_gel
    spread = np.array([pregel_constancy(env, c) for c in fam.curves])
    resolved = np.array([resolved_at_gel(env, c) for c in fam.curves])
    const = spread[resolved].max()
    cross = noncrossing_violations(fam)
    ub = [upper_bound_violations(c) for c in fam.curves]
    bad, applies = sum(b for b, _ in ub), sum(a for _, a in ub)
    ok = res <= 1e-4 and const <= 1e-6 and cross == 0 and bad == 0
    verdict(10, "characteristic curves, 16 horizons", ok,
            f"max scaled ODE residual {res:.2e} (<= 1e-4); pre-gel constancy {const:.2e} (<= 1e-6) over "
            f"{resolved.sum()} resolved curves, {spread[~resolved].max():.2e} over the {(~resolved).sum()} "
            f"horizons closest to t_gel; crossings {cross}; upper-bound violations {bad} of {applies} "
            f"applicable nodes")


def test_criterion_11_coupling(env, sampler, verdict):
    t0 = time.perf_counter()
    runs, e6 = {}, 0
    for n in (1_000, 10_000, 100_000):
        cfg = CouplingConfig(n, n ** -0.3, K=16, T=2.0, seed=SEED, replicas=1000)
        try:
            runs[n] = failure_stats(cfg, env, eps=0.1, sampler=sampler)
        except RegionE6Reached:
            e6 += 1
    # C~ marginal at the sample size of criterion 7
    chi, p_chi = [], []
    try:
        cfg = CouplingConfig(1_000, 1_000 ** -0.3, K=16, T=2.0, seed=SEED + 1, replicas=100_000, tobs=(0.5, 2.0))
        big = failure_stats(cfg, env, eps=0.1, sampler=sampler)
        ct = np.array([tr.obs_ct for tr in big.traces])
        for i, t in enumerate(cfg.tobs):
            counts = np.bincount(np.minimum(ct[:, i], 21), minlength=22)[1:21]
            stat, dof, p = chi2_gof(counts, len(ct), env.masses_at(t)[:20])
            chi.append(f"t={t}: chi2={stat:.1f} p={p:.3f}")
            p_chi.append(p)
        runs["chi"] = big
    except RegionE6Reached:
        e6 += 1
    dt = time.perf_counter() - t0
    viol = sum(r.distance_violations + r.cycle_violations for r in runs.values())
    checks = sum(r.checks for r in runs.values())
    ns = [n for n in (1_000, 10_000, 100_000) if n in runs]
    mono = all(runs[b].p_sup <= runs[a].p_sup or runs[b].p_sup_ci[0] <= runs[a].p_sup_ci[1]
               for a, b in zip(ns[:-1], ns[1:]))
    ok = e6 == 0 and viol == 0 and all(p >= 0.01 for p in p_chi) and len(p_chi) == 2 and mono and dt <= 1200
    psup = ", ".join(f"n={n}: {runs[n].p_sup:.3f} [{runs[n].p_sup_ci[0]:.3f}, {runs[n].p_sup_ci[1]:.3f}]"
                     for n in ns)
    verdict(11, "coupling sanity", ok,
            f"E6 reached {e6} times; invariant violations {viol} over {checks} checks; C~ law {'; '.join(chi)}; "
            f"P[sup d_E > 0.1] {psup}; runtime {dt:.0f} s")


def test_criterion_12_paintbox_bound(verdict):
    parts, ok = [], True
    t0 = time.perf_counter()
    for eta in (0.01, 0.05):
        # Erdos-Renyi law at t = 0.5, cut at the first K leaving mass <= eta beyond it
        v = borel_vk(np.arange(1, 200), 0.5)
        K = int(np.argmax(1 - np.cumsum(v) <= eta)) + 1
        a = MassDistribution(v[:K])
        a = MassDistribution(a.masses, TailModel(K, completed_tail_amplitude(a)))
        # largest perturbation the hypotheses allow, alternating in sign
        m = a.masses + eta / K**2 * (-1.0) ** np.arange(K)
        m[-1] -= m.sum() - a.masses.sum() if K % 2 else 0.0
        b = MassDistribution(m, a.tail)
        chk = paintbox_mismatch_bound_check(a, b, K, eta, trials=1_000_000, seed=SEED)
        ok &= chk.passed
        parts.append(f"eta={eta}, K={K}: mismatch {chk.rate:.5f} <= {chk.bound:.2f} + 3x{chk.sigma:.1e}")
    dt = time.perf_counter() - t0
    ok &= dt <= 60
    verdict(12, "paintbox mismatch bound, 1e6 trials", ok, "; ".join(parts) + f"; runtime {dt:.1f} s")
