"""Characteristic curves psi_y of the Burgers control problem.

For a horizon y > t_gel the curve solves dpsi/dt = psi (1 - X_t(psi)) with
psi_y(y) = 1.  Near t = y the right side is singular in psi, so on
[t_gel, y] we solve for upsilon = sqrt(1 - psi) instead:

    dupsilon/dt = (upsilon^2 - 1) F(t, upsilon) / 2,   upsilon(y) = 0,

with F(t, w) = (1 - X_t(1 - w^2)) / w, which stays bounded and positive.
Below t_gel, psi itself is integrated backward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.interpolate import PchipInterpolator

from .core import ForestFireError
from .kinetics import Environment, EnvTooShort, X_kernel, one_minus_X_kernel
from .parallel import run_tasks, share, shared


class HorizonBeforeGel(ForestFireError):
    pass


class CurveDiverged(ForestFireError):
    pass


def default_w_min(K: int) -> float:
    return 10.0 / math.sqrt(K)


@numba.njit(cache=True)
def _locate(times, t):
    n = times.shape[0]
    i = np.searchsorted(times, t, side="right") - 1
    if i < 0:
        i = 0
    if i > n - 2:
        i = n - 2
    a = (t - times[i]) / (times[i + 1] - times[i])
    if a < 0.0:
        a = 0.0
    if a > 1.0:
        a = 1.0
    return i, a


@numba.njit(cache=True)
def _env_point(times, amp, phi, t_gel, t):
    i, a = _locate(times, t)
    if t >= t_gel and times[i] < t_gel:
        # the gelation node carries the right limit of phi
        return i, 1.0, amp[i + 1], phi[i + 1]
    ph = (1.0 - a) * phi[i] + a * phi[i + 1]
    if t < t_gel:
        ph = 0.0
    return i, a, (1.0 - a) * amp[i] + a * amp[i + 1], ph


@numba.njit(cache=True)
def F_kernel(times, V, amp, phi, t_gel, t, w, w_min):
    if w > 1.0:
        return 1.0
    i, a, am, ph = _env_point(times, amp, phi, t_gel, t)
    root = math.sqrt(2.0 * max(ph, 0.0))
    if w <= 0.0:
        return root
    K = V.shape[1]
    if w < w_min:
        fm = one_minus_X_kernel(V[i], V[i + 1], a, am, K, w_min) / w_min
        return root + (w / w_min) * (fm - root)
    return one_minus_X_kernel(V[i], V[i + 1], a, am, K, w) / w


@numba.njit(cache=True)
def _ups_rhs(times, V, amp, phi, t_gel, t, u, w_min):
    return 0.5 * (u * u - 1.0) * F_kernel(times, V, amp, phi, t_gel, t, u, w_min)


@numba.njit(cache=True)
def _psi_rhs(times, V, amp, phi, t_gel, t, p):
    i, a, am, ph = _env_point(times, amp, phi, t_gel, t)
    w = math.sqrt(max(1.0 - p, 0.0))
    return p * one_minus_X_kernel(V[i], V[i + 1], a, am, V.shape[1], w)


@numba.njit(cache=True)
def _rk4(times, V, amp, phi, t_gel, t, x, h, w_min, which):
    if which == 0:
        k1 = _ups_rhs(times, V, amp, phi, t_gel, t, x, w_min)
        k2 = _ups_rhs(times, V, amp, phi, t_gel, t + 0.5 * h, x + 0.5 * h * k1, w_min)
        k3 = _ups_rhs(times, V, amp, phi, t_gel, t + 0.5 * h, x + 0.5 * h * k2, w_min)
        k4 = _ups_rhs(times, V, amp, phi, t_gel, t + h, x + h * k3, w_min)
    else:
        k1 = _psi_rhs(times, V, amp, phi, t_gel, t, x)
        k2 = _psi_rhs(times, V, amp, phi, t_gel, t + 0.5 * h, x + 0.5 * h * k1)
        k3 = _psi_rhs(times, V, amp, phi, t_gel, t + 0.5 * h, x + 0.5 * h * k2)
        k4 = _psi_rhs(times, V, amp, phi, t_gel, t + h, x + h * k3)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@numba.njit(cache=True)
def _march(times, V, amp, phi, t_gel, nodes, x0, w_min, which, tol, max_depth, first_split):
    """Integrate along ``nodes`` (any direction) with step doubling per interval.

    An interval is retried with 2, 4, ... substeps until every substep passes
    |full - two halves| <= tol |h|.  Returns values at nodes and a status
    (0 ok, 1 rejected) with the failing node index.
    """
    out = np.empty(nodes.shape[0])
    out[0] = x0
    x = x0
    for j in range(1, nodes.shape[0]):
        t0 = nodes[j - 1]
        H = nodes[j] - t0
        nsub = 2 if (first_split and j == 1) else 1
        ok = False
        for _ in range(max_depth + 1):
            h = H / nsub
            y = x
            good = True
            for m in range(nsub):
                t = t0 + m * h
                full = _rk4(times, V, amp, phi, t_gel, t, y, h, w_min, which)
                half = _rk4(times, V, amp, phi, t_gel, t, y, 0.5 * h, w_min, which)
                half = _rk4(times, V, amp, phi, t_gel, t + 0.5 * h, half, 0.5 * h, w_min, which)
                if not (abs(full - half) <= tol * abs(h)):
                    good = False
                    break
                y = half
            if good:
                ok = True
                x = y
                break
            nsub *= 2
        if not ok:
            return out, 1, j
        out[j] = x
    return out, 0, -1


@dataclass
class CharacteristicCurve:
    """psi_y on a time grid; upsilon = sqrt(1 - psi) on [t_gel, y], NaN before."""

    y: float
    grid: np.ndarray
    psi: np.ndarray
    upsilon: np.ndarray
    t_gel: float
    residual_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self._interp = PchipInterpolator(self.grid, self.psi, extrapolate=False)

    def psi_at(self, t):
        t = np.asarray(t, dtype=float)
        out = np.where(t >= self.y, 1.0, self._interp(np.clip(t, self.grid[0], self.y)))
        return out if out.ndim else float(out)

    def to_json(self):
        return {
            "y": float(self.y),
            "t_gel": float(self.t_gel),
            "grid": [float(x) for x in self.grid],
            "psi": [float(x) for x in self.psi],
            "upsilon": [None if not np.isfinite(x) else float(x) for x in self.upsilon],
            "residual_stats": self.residual_stats,
        }

    @classmethod
    def from_json(cls, obj):
        ups = np.array([np.nan if x is None else x for x in obj["upsilon"]], dtype=float)
        return cls(float(obj["y"]), np.asarray(obj["grid"], dtype=float),
                   np.asarray(obj["psi"], dtype=float), ups, float(obj["t_gel"]),
                   obj.get("residual_stats", {}))


def eval_F(env: Environment, t, w, w_min=None):
    """F(t, w): 1 for w > 1, (1 - X_t(1 - w^2))/w on (0, 1], sqrt(2 phi(t)) for w <= 0.

    On (0, w_min) the value is blended linearly from sqrt(2 phi(t)) at 0 to
    the exact expression at w_min, since the truncated generating function
    cannot resolve the w -> 0 limit.
    """
    if w_min is None:
        w_min = default_w_min(env.K)
    env.locate(t)
    ws = np.atleast_1d(np.asarray(w, dtype=float))
    out = np.array([F_kernel(env.times, env.V, env.amplitudes, env.phi, env.t_gel, float(t), x, w_min)
                    for x in ws])
    return out if np.ndim(w) else float(out[0])


def _nodes_between(times, a, b):
    inner = times[(times > a + 1e-12) & (times < b - 1e-12)]
    return np.concatenate(([a], inner, [b]))


def solve_psi(env: Environment, y, w_min=None, tol=1e-9, max_depth=12) -> CharacteristicCurve:
    """Characteristic curve with horizon y, integrated backward from psi_y(y) = 1."""
    if y <= env.t_gel:
        raise HorizonBeforeGel(f"horizon {y} must exceed t_gel={env.t_gel}")
    if y > env.T + 1e-12:
        raise EnvTooShort(f"horizon {y} beyond environment end {env.T}")
    if w_min is None:
        w_min = default_w_min(env.K)
    args = (env.times, env.V, env.amplitudes, env.phi, env.t_gel)
    post = _nodes_between(env.times, env.t_gel, y)[::-1]
    ups, status, j = _march(*args, np.ascontiguousarray(post), 0.0, w_min, 0, tol, max_depth, True)
    if status:
        raise CurveDiverged(f"upsilon integration rejected near t={post[j]:.6g} (y={y})")
    psi_post = 1.0 - ups**2
    pre = _nodes_between(env.times, 0.0, env.t_gel)[::-1]
    psi_pre, status, j = _march(*args, np.ascontiguousarray(pre), psi_post[-1], w_min, 1, tol,
                                max_depth, False)
    if status:
        raise CurveDiverged(f"psi integration rejected near t={pre[j]:.6g} (y={y})")
    grid = np.concatenate((pre[::-1], post[::-1][1:]))
    psi = np.concatenate((psi_pre[::-1], psi_post[::-1][1:]))
    upsilon = np.concatenate((np.full(len(pre), np.nan), ups[::-1][1:]))
    upsilon[len(pre) - 1] = ups[-1]
    curve = CharacteristicCurve(float(y), grid, psi, upsilon, env.t_gel)
    curve.residual_stats = residual_stats(env, curve, w_min)
    return curve


def _derivative(grid, f):
    """Second-order three-point derivative on a nonuniform grid (interior nodes)."""
    h1 = grid[1:-1] - grid[:-2]
    h2 = grid[2:] - grid[1:-1]
    return (h1**2 * f[2:] - h2**2 * f[:-2] + (h2**2 - h1**2) * f[1:-1]) / (h1 * h2 * (h1 + h2))


def ode_residuals(env: Environment, curve: CharacteristicCurve):
    """|dpsi/dt - psi (1 - X_t(psi))| at interior grid nodes (NaN at the ends)."""
    g, p = curve.grid, curve.psi
    d = _derivative(g, p)
    amp = env.amplitudes
    rhs = np.empty(len(g) - 2)
    for m, t in enumerate(g[1:-1]):
        i, a, am, _ = _env_point(env.times, amp, env.phi, env.t_gel, t)
        w = math.sqrt(max(1.0 - p[m + 1], 0.0))
        rhs[m] = p[m + 1] * one_minus_X_kernel(env.V[i], env.V[i + 1], a, am, env.K, w)
    res = np.full(len(g), np.nan)
    res[1:-1] = np.abs(d - rhs)
    return res


def residual_stats(env: Environment, curve: CharacteristicCurve, w_min=None):
    """Residual summary excluding nodes next to t_gel and nodes inside the blend zone."""
    if w_min is None:
        w_min = default_w_min(env.K)
    res = ode_residuals(env, curve)
    g = curve.grid
    k_gel = int(np.argmin(np.abs(g - curve.t_gel)))
    mask = np.isfinite(res)
    mask[max(k_gel - 1, 0):k_gel + 2] = False
    ups = curve.upsilon
    mask &= ~(np.isfinite(ups) & (ups < w_min))
    scale = np.maximum(1.0, np.sqrt(2.0 * np.array([env.phi_at(t) for t in g])))
    rel = np.where(mask, res / scale, np.nan)
    return {
        "max_scaled_residual": float(np.nanmax(rel)) if mask.any() else 0.0,
        "n_checked": int(mask.sum()),
        "n_excluded": int(len(g) - mask.sum()),
        "w_min": float(w_min),
    }


def explosion_survival(env: Environment, curve: CharacteristicCurve, s, k) -> float:
    """P[no explosion in (s, y] | C_s = k] = psi_y(s)^k."""
    if s >= curve.y:
        return 1.0
    return float(curve.psi_at(s)) ** int(k)


# ---------------------------------------------------------------------------
# families and consistency checks

def default_horizons(env: Environment, n=64, first=0.01):
    return env.t_gel + np.geomspace(first, env.T - env.t_gel, n)


@dataclass
class CurveFamily:
    curves: list

    @property
    def horizons(self):
        return np.array([c.y for c in self.curves])

    def get(self, y, atol=1e-9):
        for c in self.curves:
            if abs(c.y - y) <= atol:
                return c
        raise KeyError(f"no curve with horizon {y}")

    def to_json(self):
        return {"kind": "curves", "curves": [c.to_json() for c in self.curves]}

    @classmethod
    def from_json(cls, obj):
        if obj.get("kind") != "curves":
            raise ValueError("not a curve family document")
        return cls([CharacteristicCurve.from_json(c) for c in obj["curves"]])


def _family_task(task):
    key, y, kw = task
    return solve_psi(shared(key), y, **kw)


def solve_family(env: Environment, horizons=None, workers=None, **kw) -> CurveFamily:
    """Curves for each horizon, solved in parallel over independent horizons."""
    if horizons is None:
        horizons = default_horizons(env)
    key = share(env)
    tasks = [(key, float(y), kw) for y in sorted(horizons)]
    return CurveFamily(run_tasks(_family_task, tasks, workers))


def pregel_constancy(env: Environment, curve: CharacteristicCurve) -> float:
    """Spread max - min of X_t(psi_y(t)) over grid nodes t <= t_gel."""
    vals = [eval_X_node(env, t, p) for t, p in zip(curve.grid, curve.psi) if t <= env.t_gel]
    return float(np.max(vals) - np.min(vals))


def resolved_at_gel(env: Environment, curve: CharacteristicCurve, w_min=None) -> bool:
    """Whether upsilon_y(t_gel) reaches the blend threshold w_min.

    Curves below it stay in the blend zone on all of [t_gel, y] and sit so
    close to psi = 1 at gelation that X_t(psi) depends on sizes far beyond
    the truncation, so their pre-gel constancy measures the truncation.
    """
    if w_min is None:
        w_min = default_w_min(env.K)
    return bool(math.sqrt(max(1.0 - float(curve.psi_at(env.t_gel)), 0.0)) >= w_min)


def eval_X_node(env, t, z):
    i, a, am, _ = _env_point(env.times, env.amplitudes, env.phi, env.t_gel, t)
    return X_kernel(env.V[i], env.V[i + 1], a, am, env.K, z)


def flow_identity_error(env: Environment, curve: CharacteristicCurve) -> float:
    """Max over post-gel nodes of |X_s(psi(s)) - X_y-(psi) - int psi phi| against the gel node."""
    g, p = curve.grid, curve.psi
    post = np.nonzero(g >= env.t_gel)[0]
    X = np.array([eval_X_node(env, g[m], p[m]) for m in post])
    ph = np.array([env.phi_at(t) for t in g[post]])
    integ = np.concatenate(([0.0], np.cumsum(0.5 * np.diff(g[post]) * (p[post][1:] * ph[1:] + p[post][:-1] * ph[:-1]))))
    return float(np.max(np.abs((X - X[0]) - integ)))


def noncrossing_violations(family: CurveFamily) -> int:
    """Count nodes t < y where psi_y(t) <= psi_y'(t) for consecutive y < y'."""
    bad = 0
    cs = sorted(family.curves, key=lambda c: c.y)
    for lo, hi in zip(cs[:-1], cs[1:]):
        t = lo.grid[lo.grid < lo.y]
        bad += int(np.sum(lo.psi_at(t) <= hi.psi_at(t)))
    return bad


def upper_bound_violations(curve: CharacteristicCurve) -> tuple[int, int]:
    """(violations, nodes where the bound psi <= 1/((y - t)/2 - 1) applies)."""
    gap = (curve.y - curve.grid) / 2.0 - 1.0
    applies = gap > 0
    bound = np.where(applies, 1.0 / np.where(applies, gap, 1.0), np.inf)
    return int(np.sum(curve.psi[applies] > bound[applies])), int(applies.sum())
