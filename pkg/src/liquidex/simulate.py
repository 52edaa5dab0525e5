"""Monte Carlo evaluation of liquidation policies under regime switching.

Regime paths are drawn first with exact exponential clocks; the price is
then stepped in log space on a fixed dt lattice refined at every regime
jump. Each path owns a sub-seed derived from (seed, path index), so results
do not depend on chunking or worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .model import GeneratorMatrix, InvalidParameter, LiquidexError, ProblemSpec, ValidationError
from .solver import PolicyField, default_workers

CHUNK = 2048


class InvalidDt(LiquidexError, ValueError):
    pass


class NonPositivePrice(LiquidexError, FloatingPointError):
    pass


@dataclass(frozen=True)
class ConstantPolicy:
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise InvalidParameter("rate", self.rate)


@dataclass
class PathOutcome:
    J: float
    J_dynkin: float
    exit_time: float
    exited_early: bool
    x_final: float
    seed: int


@dataclass
class SimResult:
    mean: float
    stderr: float
    n_paths: int
    mean_exit_time: float
    fraction_exited_early: float
    mean_dynkin: float = math.nan
    stderr_dynkin: float = math.nan
    paths: dict | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "paths"}


def path_seed(seed: int, p: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(p,)).generate_state(1, np.uint64)[0])


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def sample_regime_path(generator: GeneratorMatrix, regime0: int, horizon: float, seed=None, t0: float = 0.0):
    """Jump times and new regimes of the chain on (t0, horizon]."""
    rng = _rng(seed)
    q = generator.q
    out: list[tuple[float, int]] = []
    t, ell = t0, regime0
    while True:
        rate = -q[ell, ell]
        if rate <= 0:
            return out
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            return out
        probs = np.maximum(q[ell], 0.0)
        probs[ell] = 0.0
        ell = int(rng.choice(q.shape[0], p=probs / probs.sum()))
        out.append((t, ell))


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------


@numba.njit(nogil=True, cache=True)
def _piecewise(x, breaks, coeffs):
    k = np.searchsorted(breaks, x)
    out = 0.0
    for c in range(coeffs.shape[1] - 1, -1, -1):
        out = out * x + coeffs[k, c]
    return out


@numba.njit(nogil=True, cache=True)
def _simulate_chunk(x0, z0, reg0, t0, horizon, dt, n_sub, beta, mu, sigma, lam,
                    rates, phis, d_tau, d_x, z_min, d_z,
                    g_breaks, g_coeffs,
                    jump_t, jump_r, jump_off, normals, norm_off,
                    out_j, out_jd, out_exit, out_early, out_x):
    n_tau = rates.shape[0] - 1
    n_x = rates.shape[1] - 1
    n_z = rates.shape[2] - 1
    for p in range(out_j.shape[0]):
        t = t0
        x = x0
        z = z0
        ell = reg0
        total = 0.0
        dynkin = _piecewise(x0, g_breaks, g_coeffs) * math.exp(z0)
        jk = jump_off[p]
        nk = norm_off[p]
        k = 1
        exited = x <= 0.0
        while not exited and t < horizon:
            tg = horizon if k >= n_sub else t0 + k * dt
            tj = jump_t[jk] if jk < jump_off[p + 1] else np.inf
            tb = min(tg, tj)
            h = tb - t
            n = int(round((horizon - t) / d_tau)) if d_tau > 0 else 0
            n = min(max(n, 0), n_tau)
            i = int(round(x / d_x)) if d_x > 0 else 0
            i = min(max(i, 1), n_x)
            j = int(round((z - z_min) / d_z)) if d_z > 0 else 0
            j = min(max(j, 0), n_z)
            u = rates[n, i, j, ell]
            ph = phis[n, i, j, ell]
            disc = math.exp(-beta * (t - t0))
            s = math.exp(z)
            drift = mu[ell] - lam * u
            if u > 0.0 and u * h >= x:
                h = x / u
                exited = True
            x_next = 0.0 if exited else x - u * h
            # x is linear in time over the substep: the -u g'(x) s term integrates
            # exactly to s (g(x_next) - g(x)); g itself enters by the trapezoid rule
            g0 = _piecewise(x, g_breaks, g_coeffs)
            g1 = _piecewise(x_next, g_breaks, g_coeffs)
            total += disc * ph * s * h
            dynkin += disc * (ph * s * h + s * (g1 - g0) + (drift - beta) * s * 0.5 * (g0 + g1) * h)
            if exited:
                x = 0.0
                t = t + h
                break
            x = x_next
            sg = sigma[ell]
            z += (drift - 0.5 * sg * sg) * h + sg * math.sqrt(h) * normals[nk]
            nk += 1
            t = tb
            if tb == tj:
                ell = jump_r[jk]
                jk += 1
            if tb == tg:
                k += 1
        if not exited:
            total += math.exp(-beta * (horizon - t0)) * _piecewise(x, g_breaks, g_coeffs) * math.exp(z)
        out_j[p] = total
        out_jd[p] = dynkin
        out_exit[p] = t
        out_early[p] = exited
        out_x[p] = x


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _policy_tables(policy, spec: ProblemSpec):
    if isinstance(policy, PolicyField):
        g = policy.grid
        rates = np.ascontiguousarray(policy.rates, dtype=float)
        phi_of = np.asarray(spec.impact.phi(policy.controls), dtype=float)
        phis = np.ascontiguousarray(phi_of[policy.index])
        return rates, phis, (g.d_tau, g.d_x, g.z_min, g.d_z)
    if isinstance(policy, ConstantPolicy):
        rates = np.full((1, 1, 1, spec.m), float(policy.rate))
        phis = np.full_like(rates, float(spec.impact.phi(policy.rate)))
        return rates, phis, (0.0, 0.0, 0.0, 0.0)
    raise TypeError(f"unsupported policy {policy!r}")


class _Simulator:
    def __init__(self, policy, spec: ProblemSpec, x0, s0, regime0, dt, t0=0.0):
        if not dt > 0 or not math.isfinite(dt):
            raise InvalidDt(dt)
        if not s0 > 0:
            raise NonPositivePrice(s0)
        if x0 < 0:
            raise InvalidParameter("x0", x0)
        if not 0 <= regime0 < spec.m:
            raise InvalidParameter("regime0", regime0)
        if not 0 <= t0 <= spec.horizon:
            raise InvalidParameter("t0", t0)
        self.spec = spec
        self.x0, self.z0, self.regime0, self.t0, self.dt = float(x0), math.log(s0), int(regime0), float(t0), float(dt)
        self.n_sub = max(1, math.ceil((spec.horizon - t0) / dt - 1e-9))
        coeffs = [spec.model.log_coefficients(ell) for ell in range(spec.m)]
        self.mu = np.array([c[0] for c in coeffs])
        self.sigma = np.array([c[1] for c in coeffs])
        self.lam = float(coeffs[0][2])
        self.rates, self.phis, self.grid_args = _policy_tables(policy, spec)
        g = spec.impact.g
        self.g_breaks = np.ascontiguousarray(g.breaks, dtype=float)
        self.g_coeffs = np.ascontiguousarray(g.coeffs, dtype=float)

    def run(self, seeds: list[int]):
        """Simulate one chunk of paths, one sub-seed each."""
        n = len(seeds)
        jt, jr, jo = [], [], [0]
        normals, no = [], [0]
        for sd in seeds:
            rng = _rng(sd)
            jumps = sample_regime_path(self.spec.generator, self.regime0, self.spec.horizon, rng, self.t0)
            jt.extend(t for t, _ in jumps)
            jr.extend(r for _, r in jumps)
            jo.append(len(jt))
            normals.append(rng.standard_normal(self.n_sub + len(jumps)))
            no.append(no[-1] + self.n_sub + len(jumps))
        out = [np.empty(n), np.empty(n), np.empty(n), np.empty(n, dtype=np.bool_), np.empty(n)]
        _simulate_chunk(self.x0, self.z0, self.regime0, self.t0, self.spec.horizon, self.dt, self.n_sub,
                        self.spec.beta, self.mu, self.sigma, self.lam, self.rates, self.phis, *self.grid_args,
                        self.g_breaks, self.g_coeffs,
                        np.array(jt, dtype=float), np.array(jr, dtype=np.int64), np.array(jo, dtype=np.int64),
                        np.concatenate(normals), np.array(no, dtype=np.int64), *out)
        return out


def simulate_path(policy, spec: ProblemSpec, x0: float, s0: float, regime0: int, dt: float, seed: int,
                  t0: float = 0.0) -> PathOutcome:
    """One path of the controlled system; ``seed`` seeds this path directly."""
    j, jd, ex, early, xf = _Simulator(policy, spec, x0, s0, regime0, dt, t0).run([seed])
    return PathOutcome(float(j[0]), float(jd[0]), float(ex[0]), bool(early[0]), float(xf[0]), seed)


def payoff_dynkin(policy, spec: ProblemSpec, x0: float, s0: float, regime0: int, dt: float, seed: int,
                  t0: float = 0.0) -> float:
    """g(x0) s0 plus the integrated running reward along the same path as ``simulate_path``."""
    return simulate_path(policy, spec, x0, s0, regime0, dt, seed, t0).J_dynkin


def _mean_stderr(v: np.ndarray) -> tuple[float, float]:
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    mean = float(np.mean(v))
    return mean, float(np.sqrt(np.sum((v - mean) ** 2) / (v.size - 1) / v.size))


def evaluate_policy(policy, spec: ProblemSpec, x0: float, s0: float, regime0: int, n_paths: int,
                    dt: float | None = None, seed: int = 0, t0: float = 0.0, workers: int | None = None,
                    keep_paths: bool = False) -> SimResult:
    """Mean discounted payoff over ``n_paths`` independent paths.

    ``dt`` defaults to a quarter of the policy grid's d_tau.
    """
    if n_paths < 2:
        raise ValidationError([InvalidParameter("n_paths must be >= 2", n_paths)])
    if dt is None:
        if not isinstance(policy, PolicyField):
            raise InvalidDt("dt is required for policies without a grid")
        dt = policy.grid.d_tau / 4
    sim = _Simulator(policy, spec, x0, s0, regime0, dt, t0)
    seeds = [path_seed(seed, p) for p in range(n_paths)]
    chunks = [(a, min(a + CHUNK, n_paths)) for a in range(0, n_paths, CHUNK)]
    cols = [np.empty(n_paths), np.empty(n_paths), np.empty(n_paths), np.empty(n_paths, dtype=bool), np.empty(n_paths)]

    def work(bounds):
        a, b = bounds
        for col, part in zip(cols, sim.run(seeds[a:b])):
            col[a:b] = part

    workers = workers or default_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, chunks))
    else:
        for c in chunks:
            work(c)
    j, jd, ex, early, xf = cols
    mean, se = _mean_stderr(j)
    mean_d, se_d = _mean_stderr(jd)
    paths = None
    if keep_paths:
        paths = {"seed": np.array(seeds, dtype=np.uint64), "J": j, "Jdynkin": jd, "exit_time": ex,
                 "exited_early": early, "x_final": xf}
    return SimResult(mean, se, n_paths, float(np.mean(ex)), float(np.mean(early)), mean_d, se_d, paths)


def write_paths_csv(path, result: SimResult) -> None:
    p = result.paths
    with open(path, "w", newline="") as fh:
        fh.write("path,seed,J,Jdynkin,exit_time,exited_early\n")
        for k in range(result.n_paths):
            fh.write(f"{k},{int(p['seed'][k])},{format(p['J'][k], '.17g')},{format(p['Jdynkin'][k], '.17g')},"
                     f"{format(p['exit_time'][k], '.17g')},{int(p['exited_early'][k])}\n")
