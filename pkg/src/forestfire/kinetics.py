"""Deterministic limiting medium: Smoluchowski and critical forest-fire kinetics.

Both systems share the loss term -k v_k and the multiplicative-kernel gain
(k/2) sum_{l<k} v_l v_{k-l}.  After gelation a control phi(t) re-injects the
mass lost to infinitely large clusters as singletons.  The truncated system
on sizes 1..K is triangular, so each bucket is exact given phi.

Time stepping is exponential (ETDRK4): the diagonal loss term is integrated
exactly and only the quadratic gain goes through the Runge-Kutta stages.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numba
import numpy as np
from scipy.fft import irfft, next_fast_len, rfft
from scipy.special import gammaln

from .core import ForestFireError, MassDistribution, TailModel


class ZeroMoment(ForestFireError):
    pass


class StepRejected(ForestFireError):
    pass


class NegativeMass(ForestFireError):
    pass


class NonConvergedPhi(ForestFireError):
    pass


class GridTooCoarse(ForestFireError):
    pass


class SchemaMismatch(ForestFireError):
    pass


class EnvTooShort(ForestFireError):
    pass


NEG_CLAMP = 1e-12


def borel_vk(k, t):
    """Closed-form monodisperse solution v_k(t) = k^(k-1)/k! e^(-kt) t^(k-1)."""
    k = np.asarray(k, dtype=float)
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logv = (k - 1) * np.log(k) - gammaln(k + 1) - k * t + (k - 1) * np.log(t)
        out = np.exp(logv)
    out = np.where(t == 0, np.where(k == 1, 1.0, 0.0), out)
    return out if out.ndim else float(out)


def gelation_time(init: MassDistribution) -> float:
    """Reciprocal first moment of the initial mass distribution."""
    m1 = init.first_moment()
    if m1 <= 0:
        raise ZeroMoment("initial distribution has zero first moment")
    return 1.0 / m1


# ---------------------------------------------------------------------------
# right-hand side pieces

def gain_term(v):
    """(k/2) sum_{l<k} v_l v_{k-l} for k = 1..K via a zero-padded real FFT."""
    K = len(v)
    n = next_fast_len(2 * K)
    c = irfft(rfft(v, n) ** 2, n)[:K]
    out = np.zeros(K)
    k = np.arange(2, K + 1)
    out[1:] = 0.5 * k * c[: K - 1]
    return out


@numba.njit(cache=True)
def _flux_kernel(v, K):
    # P[j] = v_1 + ... + v_j
    P = np.empty(K + 1)
    P[0] = 0.0
    for j in range(K):
        P[j + 1] = P[j] + v[j]
    s = 0.0
    for l in range(1, K + 1):
        s += l * v[l - 1] * (1.0 - P[K - l])
    return s


def mass_flux(v, K=None):
    """Mass per unit time leaving sizes 1..K through coagulation.

    Equals sum_{k<=K} k v_k - sum_{l+m<=K} (l+m)/2 v_l v_m, written as
    sum_l l v_l (1 - P_{K-l}) with P the cumulative mass.
    """
    K = len(v) if K is None else K
    return float(_flux_kernel(np.ascontiguousarray(v, dtype=float), K))


def estimate_phi(v):
    """Burn rate from the truncated state.

    The flux past K converges to phi with an error of order K**-0.5, so the
    fluxes at K and K/2 are combined by Richardson extrapolation.

    Returns (phi, flux_K, flux_K/2).
    """
    K = len(v)
    fk = mass_flux(v, K)
    fh = mass_flux(v, K // 2)
    r2 = math.sqrt(2.0)
    return (r2 * fk - fh) / (r2 - 1.0), fk, fh


# ---------------------------------------------------------------------------
# ETDRK4 with contour-integral coefficients

@lru_cache(maxsize=64)
def _etd_coeffs(K: int, h: float, M: int = 32):
    lam = -np.arange(1, K + 1, dtype=float)
    c = lam * h
    r = np.exp(1j * np.pi * (np.arange(1, M + 1) - 0.5) / M)
    LR = c[:, None] + r[None, :]
    Q = h * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
    f1 = h * np.real(np.mean((-4 - LR + np.exp(LR) * (4 - 3 * LR + LR**2)) / LR**3, axis=1))
    f2 = h * np.real(np.mean((2 + LR + np.exp(LR) * (LR - 2)) / LR**3, axis=1))
    f3 = h * np.real(np.mean((-4 - 3 * LR - LR**2 + np.exp(LR) * (4 - LR)) / LR**3, axis=1))
    return np.exp(c), np.exp(c / 2), Q, f1, f2, f3


def _nonlinear(v, gel):
    out = gain_term(v)
    if gel:
        out[0] += max(estimate_phi(v)[0], 0.0)
    return out


def _etd_step(v, h, gel):
    E, E2, Q, f1, f2, f3 = _etd_coeffs(len(v), h)
    Nv = _nonlinear(v, gel)
    a = E2 * v + Q * Nv
    Na = _nonlinear(a, gel)
    b = E2 * v + Q * Na
    Nb = _nonlinear(b, gel)
    c = E2 * a + Q * (2 * Nb - Nv)
    Nc = _nonlinear(c, gel)
    return E * v + Nv * f1 + 2 * (Na + Nb) * f2 + Nc * f3


def _clamp(v, t, slack=0.0):
    """Zero out negatives within the step's accepted error; raise on larger ones."""
    lo = v.min()
    bound = max(NEG_CLAMP, slack)
    if lo < -bound:
        k = int(np.argmin(v)) + 1
        raise NegativeMass(f"v_{k}({t:.6g}) = {lo:.3e} below -{bound:.3e}")
    if lo < 0:
        v = np.where(v < 0, 0.0, v)
    return v


@dataclass
class StepStats:
    accepted: int = 0
    subdivided: int = 0
    max_depth: int = 0
    max_err: float = 0.0


def _advance(v, t, h, gel, tol, depth, max_depth, stats):
    """Advance by h with step doubling; subdivide until the estimate meets tol.

    tol bounds the L1 difference between one full step and two half steps,
    per unit time.
    """
    full = _etd_step(v, h, gel)
    half = _etd_step(_etd_step(v, h / 2, gel), h / 2, gel)
    err = float(np.abs(full - half).sum())
    if err <= tol * h:
        stats.accepted += 1
        stats.max_depth = max(stats.max_depth, depth)
        stats.max_err = max(stats.max_err, err)
        return _clamp(half, t + h, tol * h)
    if depth >= max_depth or not np.isfinite(err):
        raise StepRejected(
            f"step-doubling error {err:.3e} above tolerance at t={t:.6g} after {depth} halvings")
    stats.subdivided += 1
    v = _advance(v, t, h / 2, gel, tol, depth + 1, max_depth, stats)
    return _advance(v, t + h / 2, h / 2, gel, tol, depth + 1, max_depth, stats)


def _integrate(v0, grid, gel, tol, max_depth, stats):
    out = np.empty((len(grid), len(v0)))
    out[0] = v0
    v = v0
    for i in range(1, len(grid)):
        h = grid[i] - grid[i - 1]
        v = _advance(v, grid[i - 1], h, gel, tol, 0, max_depth, stats)
        out[i] = v
    return out


# ---------------------------------------------------------------------------
# environment

@dataclass(frozen=True, eq=False)
class Environment:
    """Time-gridded solution: masses V[i, k-1] = v_k(times[i]) and burn rate phi.

    At the gelation node phi holds its right limit, since phi jumps there.
    The tail beyond K is a k**-0.5 power law: after gelation its amplitude is
    sqrt(2 phi / pi); before gelation no mass is lost, so the amplitude is
    the one that carries the exact residual mass.
    """

    times: np.ndarray
    V: np.ndarray
    phi: np.ndarray
    t_gel: float
    init: MassDistribution
    tol_cons: float = 5e-3
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("times", "V", "phi"):
            a = np.ascontiguousarray(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.V.shape != (len(self.times), self.V.shape[1]) or len(self.phi) != len(self.times):
            raise ValueError("inconsistent environment shapes")
        pre = self.times < self.t_gel
        if np.any(self.phi[pre] != 0):
            raise ValueError("phi must vanish before gelation")

    @property
    def K(self) -> int:
        return self.V.shape[1]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def post_gel(self) -> np.ndarray:
        return self.times >= self.t_gel

    @cached_property
    def amplitudes(self) -> np.ndarray:
        resid = np.clip(1.0 - self.V.sum(axis=1), 0.0, None) * math.sqrt(self.K + 1.0)
        return np.where(self.post_gel, np.sqrt(2.0 * self.phi / math.pi), resid)

    @cached_property
    def tail_mass(self) -> np.ndarray:
        return self.amplitudes / math.sqrt(self.K + 1.0)

    @property
    def defect(self) -> np.ndarray:
        """Conservation defect sum v + tail - 1 at each grid point."""
        return self.V.sum(axis=1) + self.tail_mass - 1.0

    def dist(self, i: int) -> MassDistribution:
        return MassDistribution(self.V[i], TailModel(self.K, float(self.amplitudes[i])),
                                float(self.times[i]), self.tol_cons)

    @property
    def dists(self):
        return [self.dist(i) for i in range(len(self.times))]

    def locate(self, t):
        """Index i and weight a with t = (1-a) times[i] + a times[i+1]."""
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise EnvTooShort(f"t={t} outside environment range [{self.times[0]}, {self.times[-1]}]")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        i = min(max(i, 0), len(self.times) - 2)
        a = (t - self.times[i]) / (self.times[i + 1] - self.times[i])
        return i, min(max(a, 0.0), 1.0)

    def masses_at(self, t):
        i, a = self.locate(t)
        return (1 - a) * self.V[i] + a * self.V[i + 1]

    def phi_at(self, t):
        if t < self.t_gel:
            return 0.0
        i, a = self.locate(t)
        return float((1 - a) * self.phi[i] + a * self.phi[i + 1])

    def amplitude_at(self, t):
        i, a = self.locate(t)
        amp = self.amplitudes
        if t >= self.t_gel and self.times[i] < self.t_gel:
            return float(amp[i + 1])
        return float((1 - a) * amp[i] + a * amp[i + 1])

    def at(self, t) -> MassDistribution:
        return MassDistribution(self.masses_at(t), TailModel(self.K, self.amplitude_at(t)), float(t),
                                self.tol_cons)

    @cached_property
    def cumulative_phi(self) -> np.ndarray:
        """Trapezoid integral of phi from 0, counting only times >= t_gel."""
        out = np.zeros(len(self.times))
        g = np.nonzero(self.post_gel)[0]
        if len(g) > 1:
            i0 = g[0]
            seg = 0.5 * (self.phi[i0 + 1:] + self.phi[i0:-1]) * np.diff(self.times[i0:])
            out[i0 + 1:] = np.cumsum(seg)
        return out

    def int_phi(self, t) -> float:
        """Integral of phi over [0, t]."""
        if t <= self.t_gel:
            return 0.0
        cum = self.cumulative_phi
        i, a = self.locate(t)
        if self.times[i] < self.t_gel:
            return 0.5 * (self.phi[i + 1] + self.phi_at(t)) * (t - self.t_gel)
        return float(cum[i] + 0.5 * (self.phi[i] + self.phi_at(t)) * (t - self.times[i]))

    # -- serialization -----------------------------------------------------

    def save(self, path, sizes=None, extra=None):
        """Write JSON summary plus the little-endian float64 sidecar ``<path>.bin``."""
        path = Path(path)
        side = path.with_suffix(path.suffix + ".bin")
        path.parent.mkdir(parents=True, exist_ok=True)
        header = np.array([self.K, self.T, len(self.times)], dtype="<f8")
        with open(side, "wb") as fh:
            fh.write(header.tobytes())
            fh.write(np.ascontiguousarray(self.V, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.phi, dtype="<f8").tobytes())
        if sizes is None:
            sizes = decimated_sizes(self.K)
        doc = {
            "kind": "environment",
            "K": self.K,
            "T": self.T,
            "t_gel": self.t_gel,
            "times": self.times.tolist(),
            "phi": self.phi.tolist(),
            "sizes": [int(s) for s in sizes],
            "masses": self.V[:, np.asarray(sizes) - 1].tolist(),
            "init": self.init.to_json(),
            "tol_cons": self.tol_cons,
            "sidecar": side.name,
            "meta": self.meta,
        }
        doc.update(extra or {})
        path.write_text(json.dumps(doc, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise SchemaMismatch(f"cannot read environment {path}: {exc}") from exc
        if doc.get("kind") != "environment":
            raise SchemaMismatch(f"{path} is not an environment file")
        side = path.parent / doc["sidecar"]
        raw = np.fromfile(side, dtype="<f8") if side.exists() else np.zeros(0)
        if raw.size < 3:
            raise SchemaMismatch(f"sidecar {side} missing or truncated")
        K, steps = int(raw[0]), int(raw[2])
        if raw.size != 3 + steps * K + steps or K != doc["K"] or steps != len(doc["times"]):
            raise SchemaMismatch(f"sidecar {side} size does not match header")
        V = raw[3:3 + steps * K].reshape(steps, K)
        phi = raw[3 + steps * K:]
        if not (np.all(np.isfinite(V)) and np.all(np.isfinite(phi))):
            raise SchemaMismatch(f"sidecar {side} contains non-finite values")
        return cls(np.asarray(doc["times"]), V, phi, float(doc["t_gel"]),
                   MassDistribution.from_json(doc["init"]), float(doc.get("tol_cons", 5e-3)),
                   doc.get("meta", {}))


def decimated_sizes(K, n_small=20, n_log=40):
    small = np.arange(1, min(n_small, K) + 1)
    big = np.unique(np.geomspace(n_small + 1, K, n_log).astype(int)) if K > n_small else []
    return np.unique(np.concatenate([small, big])).astype(int)


def make_grid(T, t_gel=1.0, step_pre=1e-3, step_gel=5e-4, gel_window=0.5, step_post=1e-3):
    """Piecewise-uniform grid on [0, T] with a node exactly at t_gel."""

    def seg(a, b, h):
        if b <= a:
            return np.array([a])
        n = max(1, int(math.ceil((b - a) / h - 1e-9)))
        return np.linspace(a, b, n + 1)

    if T <= t_gel:
        return seg(0.0, T, step_pre)
    parts = [seg(0.0, t_gel, step_pre)]
    w_end = min(T, t_gel + gel_window)
    parts.append(seg(t_gel, w_end, step_gel)[1:])
    if T > w_end:
        parts.append(seg(w_end, T, step_post)[1:])
    return np.concatenate(parts)


def _init_vector(init: MassDistribution, K: int):
    if init.K > K:
        if np.any(init.masses[K:] > 0):
            raise ValueError(f"initial distribution is supported beyond K={K}")
    v0 = np.zeros(K)
    n = min(K, init.K)
    v0[:n] = init.masses[:n]
    return v0


def _check_grid(grid, max_step):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and start at 0")
    if np.max(np.diff(grid)) > max_step * (1 + 1e-9):
        raise GridTooCoarse(f"grid step {np.max(np.diff(grid)):.3g} exceeds {max_step}")
    return grid


def solve_smoluchowski(init: MassDistribution, K: int, grid, tol=1e-10, max_depth=12,
                       max_step=0.05) -> Environment:
    """Integrate the truncated Smoluchowski system (phi = 0) on the given grid."""
    grid = _check_grid(grid, max_step)
    stats = StepStats()
    V = _integrate(_init_vector(init, K), grid, False, tol, max_depth, stats)
    t_gel = gelation_time(init)
    return Environment(grid, V, np.zeros(len(grid)), t_gel, init, meta={
        "solver": "smoluchowski", "K": K, "tol": tol, "steps": stats.__dict__})


def solve_cffe(init: MassDistribution, K: int, grid=None, T=None, tol=1e-5, max_depth=12,
               max_step=0.05, phi_rtol=0.5) -> Environment:
    """Integrate the truncated critical forest-fire equations.

    Before gelation this is the Smoluchowski system.  From t_gel on, phi(t) is
    re-estimated from the state at every Runge-Kutta stage and injected into
    the singleton equation.  The grid is split at t_gel, where phi jumps.
    """
    t_gel = gelation_time(init)
    if grid is None:
        if T is None:
            raise ValueError("give either grid or T")
        grid = make_grid(T, t_gel)
    grid = _check_grid(grid, max_step)
    if grid[-1] > t_gel and not np.any(np.isclose(grid, t_gel, rtol=0, atol=1e-12)):
        grid = np.sort(np.concatenate([grid, [t_gel]]))
        grid = grid[np.concatenate(([True], np.diff(grid) > 1e-12))]
    stats = StepStats()
    v0 = _init_vector(init, K)
    pre = grid[grid <= t_gel + 1e-12]
    V_pre = _integrate(v0, pre, False, tol, max_depth, stats)
    parts = [V_pre]
    phi = np.zeros(len(grid))
    if len(pre) < len(grid):
        post = grid[len(pre) - 1:]
        V_post = _integrate(V_pre[-1], post, True, tol, max_depth, stats)
        parts.append(V_post[1:])
    V = np.concatenate(parts)
    flux = np.zeros((len(grid), 2))
    for i in np.nonzero(grid >= t_gel - 1e-12)[0]:
        p, fk, fh = estimate_phi(V[i])
        flux[i] = fk, fh
        if not np.isfinite(p) or abs(p - fk) > phi_rtol * max(abs(p), 1e-2):
            raise NonConvergedPhi(
                f"flux extrapolation inconsistent at t={grid[i]:.4g}: phi={p:.4g}, flux_K={fk:.4g}")
        phi[i] = max(p, 0.0)
    gel_node = np.isclose(grid, t_gel, rtol=0, atol=1e-12)
    t_gel_grid = float(grid[gel_node][0]) if gel_node.any() else t_gel
    env = Environment(grid, V, phi, t_gel_grid, init, meta={
        "solver": "cffe", "K": K, "tol": tol, "steps": stats.__dict__,
        "flux_K": flux[:, 0].tolist(), "flux_half": flux[:, 1].tolist()})
    return env


# ---------------------------------------------------------------------------
# generating function

@numba.njit(cache=True)
def _erfc(x):
    return math.erfc(x)


@numba.njit(cache=True)
def one_minus_X_kernel(va, vb, a, amp, K, w):
    """1 - X_t(1 - w^2) for the interpolated masses (1-a) va + a vb.

    The finite sum is accumulated as sum v_k (1 - z^k), which avoids the
    cancellation in 1 - X near z = 1.  The tail contributes the integral of
    its density (amp/2) x^-1.5 against (1 - z^x) over x > K + 1, plus the
    mass defect 1 - sum v - tail mass.
    """
    z = 1.0 - w * w
    s = 0.0
    tot = 0.0
    zk = 1.0
    for k in range(K):
        vk = (1.0 - a) * va[k] + a * vb[k]
        if zk > 1e-200:
            # stop multiplying before z^k turns subnormal (very slow arithmetic)
            zk *= z
            s += vk * (1.0 - zk)
        else:
            s += vk
        tot += vk
    A = K + 1.0
    tail_mass = amp / math.sqrt(A)
    if z <= 0.0:
        tail_part = tail_mass
    else:
        eps = -math.log(z)
        # tail_mass - int_A^inf (amp/2) x^-1.5 z^x dx
        tail_part = amp * (-math.expm1(-eps * A) / math.sqrt(A) + math.sqrt(math.pi * eps) * _erfc(math.sqrt(eps * A)))
    return s + tail_part + (1.0 - tot - tail_mass)


@numba.njit(cache=True)
def X_kernel(va, vb, a, amp, K, z):
    """X_t(z) = sum z^k v_k plus the tail integral, for z in [0, 1]."""
    if z <= 0.0:
        return 0.0
    s = 0.0
    zk = 1.0
    for k in range(K):
        zk *= z
        if zk < 1e-200:
            break
        s += ((1.0 - a) * va[k] + a * vb[k]) * zk
    A = K + 1.0
    if z >= 1.0:
        return s + amp / math.sqrt(A)
    eps = -math.log(z)
    return s + amp * (math.exp(-eps * A) / math.sqrt(A) - math.sqrt(math.pi * eps) * _erfc(math.sqrt(eps * A)))


def eval_X(env: Environment, t, z):
    """Generating function X_t(z) = sum_k z^k v_k(t), tail included."""
    i, a = env.locate(t)
    amp = env.amplitude_at(t)
    zs = np.atleast_1d(np.asarray(z, dtype=float))
    if np.any((zs < 0) | (zs > 1)):
        raise ValueError("z must lie in [0, 1]")
    out = np.array([X_kernel(env.V[i], env.V[i + 1], a, amp, env.K, zz) for zz in zs])
    return out if np.ndim(z) else float(out[0])


def smoluchowski_char(w, t, init: MassDistribution):
    """Pre-gel characteristic psi_w(t) = w exp(t (1 - S_0(w)))."""
    w = np.asarray(w, dtype=float)
    k = np.arange(1, init.K + 1)
    S0 = np.sum(init.masses[None, :] * np.power.outer(np.atleast_1d(w), k), axis=1)
    out = np.atleast_1d(w) * np.exp(t * (1.0 - S0))
    return out if w.ndim else float(out[0])


def mean_cluster_size(env: Environment, t):
    """Size-biased mean sum_k k v_k(t); infinite from gelation on.

    Before gelation the residual mass beyond K is counted at size K+1, which
    is negligible in the regime where the truncation is resolved.
    """
    if t >= env.t_gel:
        return math.inf
    v = env.masses_at(t)
    resid = max(1.0 - v.sum(), 0.0)
    return float(np.dot(np.arange(1, env.K + 1), v) + (env.K + 1) * resid)


def inverse_moment(env: Environment, i: int) -> float:
    """sum_k v_k / k at grid index i, with the tail term (amp/3) (K+1)^-1.5."""
    k = np.arange(1, env.K + 1)
    return float(np.sum(env.V[i] / k) + env.amplitudes[i] / 3.0 * (env.K + 1.0) ** -1.5)


def burn_rate_integral_check(env: Environment, t) -> float:
    """|E(1/C_t) - E(1/C_0) - int_0^t (phi - 1/2)| evaluated from the environment."""
    if t == env.times[0]:
        return 0.0
    i, a = env.locate(t)
    if a > 0 and a < 1:
        lhs = (1 - a) * inverse_moment(env, i) + a * inverse_moment(env, i + 1)
    else:
        lhs = inverse_moment(env, i + int(round(a)))
    return abs(lhs - inverse_moment(env, 0) - env.int_phi(t) + 0.5 * t)


def tail_fit(env: Environment, t, kmin=400, kmax=2000):
    """Least-squares slope and amplitude of log sum_{l>=k} v_l against log k.

    The tail sum includes the mass beyond K.  Returns (slope, amplitude) where
    amplitude is the fitted c in c k^slope.
    """
    v = env.masses_at(t)
    S = np.cumsum(v[::-1])[::-1] + env.amplitude_at(t) / math.sqrt(env.K + 1.0)
    k = np.arange(kmin, kmax + 1)
    slope, icpt = np.polyfit(np.log(k), np.log(S[k - 1]), 1)
    return float(slope), float(math.exp(icpt))


def running_average_phi(env: Environment, t) -> float:
    """(1 / (t - t_gel)) int_{t_gel}^t phi."""
    if t <= env.t_gel:
        raise ValueError("running average needs t > t_gel")
    return env.int_phi(t) / (t - env.t_gel)
