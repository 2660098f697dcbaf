"""Monte Carlo simulation of the controlled linear SDE with Poisson jumps.

Jump times are drawn exactly (Poisson count, then sorted uniform times) and
the Euler grid is augmented with them per path.  Between grid points and jump
times the state takes an Euler-Maruyama step with coefficients frozen at the
left end of the grid step; the compensator enters as the drift
``-sum_e nu_e (E_e x + F_e u)``.  At a jump time ``tau`` with mark ``e``

    X(tau) = X(tau-) + E_e X(tau-) + F_e u(tau),   u(tau) = policy(tau, X(tau-)).

Random streams: paths are processed in fixed blocks of ``BLOCK`` paths.  Block
``b`` owns ``SeedSequence(seed, spawn_key=(b,))``, whose two children drive the
jump schedule and the Gaussian increments.  Gaussians come from numpy's
PCG64 + ziggurat ``standard_normal``.  The block layout does not depend on the
number of workers, so neither do the results.

Policies are callables ``policy(t, X) -> U`` where ``X`` has shape (P, n),
``U`` has shape (P, m), and ``t`` is either a float (all paths at the same time)
or a (P,) array.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.integrate import solve_ivp

from .errors import AssumptionError, NonFiniteState
from .model import CoefficientSet, Snapshot, validate_assumptions

BLOCK = 8192

Policy = Callable[[object, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SimConfig:
    dt: float
    n_paths: int
    seed: int = 0
    x0: tuple = (1.0,)
    t0: float = 0.0
    antithetic: bool = False
    workers: int = 1
    record: bool = False

    def check(self, T: float, nu_total: float, n: int) -> None:
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even n_paths")
        if not 0.0 <= self.t0 < T:
            raise ValueError(f"t0={self.t0!r} outside [0, {T})")
        if self.dt > T - self.t0 + 1e-12:
            raise ValueError(f"dt={self.dt!r} exceeds the horizon {T - self.t0!r}")
        if len(self.x0) != n:
            raise ValueError(f"x0 has length {len(self.x0)}, expected n={n}")
        if nu_total * self.dt >= 0.1:
            warnings.warn(f"nu(Lambda)*dt = {nu_total * self.dt:.3g} >= 0.1; compensator discretization is coarse", stacklevel=3)


@dataclass
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int

    @classmethod
    def from_samples(cls, values: np.ndarray, pairs: np.ndarray | None = None) -> "CostEstimate":
        """Mean and standard error.

        ``pairs`` (shape (n/2, 2), from :attr:`PathBundle.pairs`) marks
        antithetic partners; pair averages are then the independent samples.
        """
        values = np.asarray(values, dtype=float)
        n = len(values)
        samples = values if pairs is None else 0.5 * (values[pairs[:, 0]] + values[pairs[:, 1]])
        mean = float(np.mean(values))
        se = float(np.std(samples, ddof=1) / math.sqrt(len(samples))) if len(samples) > 1 else 0.0
        return cls(mean, se, n)


@dataclass
class PathBundle:
    """Per-path simulation output.

    Jumps are stored flat: path ``p`` owns ``jump_times[jump_offsets[p]:jump_offsets[p+1]]``.
    ``record`` (only when ``SimConfig.record``) holds every augmented-grid
    sample; at a jump time there is a pre-jump row (flag 0) and a post-jump row
    (flag 1), both carrying the control ``u(tau)`` that drove the jump.
    """

    t0: float
    T: float
    dt: float
    x0: np.ndarray
    X_T: np.ndarray  # (P, n)
    running: np.ndarray  # (P,)
    terminal: np.ndarray  # (P,)
    jump_offsets: np.ndarray  # (P + 1,)
    jump_times: np.ndarray
    jump_marks: np.ndarray  # mark indices
    mark_names: tuple
    antithetic: bool = False
    aux: dict = field(default_factory=dict)
    record: dict | None = None

    @property
    def n_paths(self) -> int:
        return len(self.running)

    @property
    def cost(self) -> np.ndarray:
        return self.running + self.terminal

    @property
    def pairs(self) -> np.ndarray | None:
        """Antithetic partner indices, shape (n_paths/2, 2), or None."""
        if not self.antithetic:
            return None
        out, start = [], 0
        for size in _block_sizes(self.n_paths):
            base = start + np.arange(size // 2)
            out.append(np.stack([base, base + size // 2], axis=1))
            start += size
        return np.concatenate(out)

    @property
    def jump_counts(self) -> np.ndarray:
        return np.diff(self.jump_offsets)

    def jumps_of(self, p: int):
        a, b = self.jump_offsets[p], self.jump_offsets[p + 1]
        return self.jump_times[a:b], [self.mark_names[j] for j in self.jump_marks[a:b]]


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------


def zero_policy(m: int) -> Policy:
    def policy(t, X):
        return np.zeros((X.shape[0], m))

    return policy


def linear_policy(gain, offset=None) -> Policy:
    """``u = gain(t) x + offset(t)``; either argument may be a constant array."""
    g_fn = gain if callable(gain) else (lambda t, G=np.atleast_2d(np.asarray(gain, float)): G)
    if offset is None:
        c_fn = None
    else:
        c_fn = offset if callable(offset) else (lambda t, c=np.atleast_1d(np.asarray(offset, float)): c)

    def policy(t, X):
        if np.ndim(t) == 0:
            U = X @ g_fn(float(t)).T
            return U + c_fn(float(t)) if c_fn is not None else U
        ts, inv = np.unique(t, return_inverse=True)
        G = np.stack([g_fn(float(s)) for s in ts])[inv]
        U = np.einsum("pij,pj->pi", G, X)
        if c_fn is not None:
            U = U + np.stack([np.atleast_1d(c_fn(float(s))) for s in ts])[inv]
        return U

    return policy


# --------------------------------------------------------------------------
# core loop
# --------------------------------------------------------------------------


def _block_sizes(n_paths: int) -> list[int]:
    return [min(BLOCK, n_paths - s) for s in range(0, n_paths, BLOCK)]


def _grid(t0: float, T: float, dt: float) -> np.ndarray:
    steps = max(1, int(math.ceil((T - t0) / dt - 1e-9)))
    g = t0 + dt * np.arange(steps + 1)
    g[-1] = T
    return g


def _jump_schedule(rng, P: int, t0: float, T: float, nu: np.ndarray):
    total = float(math.fsum(nu))
    if total == 0.0 or P == 0:
        return np.zeros(P + 1, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64)
    counts = rng.poisson(total * (T - t0), size=P)
    owners = np.repeat(np.arange(P), counts)
    times = t0 + (T - t0) * rng.random(owners.size)
    marks = rng.choice(len(nu), size=owners.size, p=nu / total)
    order = np.lexsort((times, owners))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return offsets, times[order], marks[order]


class _Step:
    """Frozen coefficients for one grid step, with the compensator folded in."""

    def __init__(self, s: Snapshot):
        self.s = s
        nu = s.nu
        self.Abar = s.A - np.einsum("e,eij->ij", nu, s.E) if s.k else s.A
        self.Bbar = s.B - np.einsum("e,eij->ij", nu, s.F) if s.k else s.B

    def advance(self, X, U, h, Z):
        # h: scalar or (P,) ; Z: (P, d) standard normals
        s = self.s
        hh = h if np.ndim(h) == 0 else h[:, None]
        out = X + (X @ self.Abar.T + U @ self.Bbar.T) * hh
        if s.d:
            dW = Z * np.sqrt(hh)
            out = out + np.einsum("pi,ijk,pk->pj", dW, s.C, X) + np.einsum("pi,ijk,pk->pj", dW, s.D, U)
        return out


def _integrand(Q, N, X, U):
    return np.einsum("pi,ij,pj->p", X, Q, X) + np.einsum("pi,ij,pj->p", U, N, U)


def _check_U(U, P, m):
    U = np.asarray(U, dtype=float)
    if U.shape != (P, m):
        raise ValueError(f"policy returned shape {U.shape}, expected {(P, m)}")
    return U


def _simulate_block(coeffs: CoefficientSet, policy: Policy, cfg: SimConfig, grid, b: int, P: int,
                    aux: Mapping[str, Callable]):
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(b,))
    ss_jump, ss_gauss = ss.spawn(2)
    rj = np.random.Generator(np.random.PCG64(ss_jump))
    rg = np.random.Generator(np.random.PCG64(ss_gauss))
    n, m, d = coeffs.n, coeffs.m, coeffs.d
    nu = coeffs.marks.nu
    half = P // 2 if cfg.antithetic else P
    offsets, jtimes, jmarks = _jump_schedule(rj, half, cfg.t0, coeffs.T, nu)
    if cfg.antithetic:
        # mirrored paths share the jump schedule
        offsets = np.concatenate([offsets, offsets[-1] + offsets[1:]])
        jtimes = np.concatenate([jtimes, jtimes])
        jmarks = np.concatenate([jmarks, jmarks])

    def normals(idx):
        if not d:
            return None
        if not cfg.antithetic:
            return rg.standard_normal((len(idx), d))
        lo = np.count_nonzero(idx < half)
        Z = rg.standard_normal((lo, d))
        return np.concatenate([Z, -Z])

    first = np.arange(P)
    counts = np.diff(offsets)
    ptr = offsets[:-1].copy()
    nxt = np.full(P, np.inf)
    nxt[counts > 0] = jtimes[ptr[counts > 0]]

    X = np.tile(np.asarray(cfg.x0, dtype=float), (P, 1))
    t_start = grid[0]
    U = _check_U(policy(t_start, X), P, m)
    s0 = coeffs.at(t_start)
    fcur = _integrand(s0.Q, s0.N, X, U)
    acur = {k: np.array(g(t_start, X, U), dtype=float) for k, g in aux.items()}
    run = np.zeros(P)
    acc = {k: np.zeros(P) for k in aux}
    tcur = np.full(P, t_start)
    rec = [] if cfg.record else None
    if rec is not None:
        rec.append((first, np.full(P, t_start), X.copy(), U.copy(), np.zeros(P, np.int8), np.full(P, -1)))
    ti = coeffs.time_invariant

    for k in range(len(grid) - 1):
        ta, tb = grid[k], grid[k + 1]
        step = _Step(coeffs.at(ta))
        sb = coeffs.at(tb)
        sa = step.s

        def fvals(ts, Xs, Us):
            if ti:
                return _integrand(sa.Q, sa.N, Xs, Us)
            # time-varying Q, N: linear in t across the step
            w = (ts - ta) / (tb - ta)
            Qs = sa.Q + w[:, None, None] * (sb.Q - sa.Q)
            Ns = sa.N + w[:, None, None] * (sb.N - sa.N)
            return np.einsum("pi,pij,pj->p", Xs, Qs, Xs) + np.einsum("pi,pij,pj->p", Us, Ns, Us)

        while True:
            idx = np.nonzero(nxt < tb)[0]
            if idx.size == 0:
                break
            tau = nxt[idx]
            h = tau - tcur[idx]
            Xm = step.advance(X[idx], U[idx], h, normals(idx))
            up = _check_U(policy(tau, Xm), idx.size, m)
            # cost pieces up to tau- (integrands evaluated per path at tau)
            fpre = fvals(tau, Xm, up)
            run[idx] += 0.5 * h * (fcur[idx] + fpre)
            for key, g in aux.items():
                apre = np.asarray(g(tau, Xm, up), float)
                acc[key][idx] += 0.5 * h * (acur[key][idx] + apre)
            e = jmarks[ptr[idx]]
            if ti:
                Ej, Fj = sa.E[e], sa.F[e]
            else:
                Ej = np.stack([coeffs.at(float(tt)).E[j] for tt, j in zip(tau, e)])
                Fj = np.stack([coeffs.at(float(tt)).F[j] for tt, j in zip(tau, e)])
            Xp = Xm + np.einsum("pij,pj->pi", Ej, Xm) + np.einsum("pij,pj->pi", Fj, up)
            if rec is not None:
                rec.append((idx, tau.copy(), Xm, up, np.zeros(idx.size, np.int8), np.full(idx.size, -1)))
                rec.append((idx, tau.copy(), Xp, up, np.ones(idx.size, np.int8), e.copy()))
            X[idx] = Xp
            tcur[idx] = tau
            U[idx] = _check_U(policy(tau, Xp), idx.size, m)
            fcur[idx] = fvals(tau, Xp, U[idx])
            for key, g in aux.items():
                acur[key][idx] = np.asarray(g(tau, Xp, U[idx]), float)
            ptr[idx] += 1
            more = ptr[idx] < offsets[idx + 1]
            nxt[idx] = np.where(more, jtimes[np.minimum(ptr[idx], len(jtimes) - 1)], np.inf)

        h = tb - tcur
        if np.all(h == h[0]):
            h = h[0]
        X = step.advance(X, U, h, normals(first))
        if not np.all(np.isfinite(X)):
            bad = int(np.nonzero(~np.all(np.isfinite(X), axis=1))[0][0])
            raise NonFiniteState(f"state blew up on path {b * BLOCK + bad} by t={tb!r}")
        U = _check_U(policy(tb, X), P, m)
        fb = _integrand(sb.Q, sb.N, X, U)
        run += 0.5 * h * (fcur + fb)
        fcur = fb
        for key, g in aux.items():
            ab = np.array(g(tb, X, U), dtype=float)
            acc[key] += 0.5 * h * (acur[key] + ab)
            acur[key] = ab
        tcur[:] = tb
        if rec is not None:
            rec.append((first, np.full(P, tb), X.copy(), U.copy(), np.zeros(P, np.int8), np.full(P, -1)))

    terminal = np.einsum("pi,ij,pj->p", X, coeffs.M, X)
    return X, run, terminal, offsets, jtimes, jmarks, acc, rec


def simulate_paths(coeffs: CoefficientSet, policy: Policy, cfg: SimConfig, *,
                   aux: Mapping[str, Callable] | None = None, validate: bool = True) -> PathBundle:
    """Simulate ``cfg.n_paths`` controlled paths on [t0, T].

    ``aux`` maps names to extra integrands ``g(t, X, U) -> (P,)`` that are
    integrated along each path with the same trapezoid rule as the running
    cost (the control gap predictor uses this).
    """
    if not coeffs.is_deterministic:
        raise ValueError("the simulator needs deterministic coefficients; path functionals are lattice-only")
    if validate:
        rep = validate_assumptions(coeffs)
        if not rep.ok:
            raise AssumptionError(rep.failures)
    cfg.check(coeffs.T, coeffs.marks.total, coeffs.n)
    aux = dict(aux or {})
    grid = _grid(cfg.t0, coeffs.T, cfg.dt)
    sizes = _block_sizes(cfg.n_paths)
    if cfg.antithetic and any(s % 2 for s in sizes):
        raise ValueError("antithetic sampling needs even block sizes")

    def run(b):
        return _simulate_block(coeffs, policy, cfg, grid, b, sizes[b], aux)

    if cfg.workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            parts = list(ex.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]

    offs, base = [np.zeros(1, dtype=np.int64)], 0
    for p in parts:
        offs.append(p[3][1:] + base)
        base += p[3][-1]
    record = None
    if cfg.record:
        record = _merge_records(parts, sizes)
    return PathBundle(
        t0=cfg.t0, T=coeffs.T, dt=cfg.dt, x0=np.asarray(cfg.x0, float),
        X_T=np.concatenate([p[0] for p in parts]),
        running=np.concatenate([p[1] for p in parts]),
        terminal=np.concatenate([p[2] for p in parts]),
        jump_offsets=np.concatenate(offs),
        jump_times=np.concatenate([p[4] for p in parts]),
        jump_marks=np.concatenate([p[5] for p in parts]).astype(np.int64),
        mark_names=tuple(coeffs.marks.marks),
        antithetic=cfg.antithetic,
        aux={k: np.concatenate([p[6][k] for p in parts]) for k in aux},
        record=record,
    )


def _merge_records(parts, sizes) -> dict:
    cols = {"path_id": [], "t": [], "X": [], "u": [], "jump_flag": [], "mark": []}
    start = 0
    for part, P in zip(parts, sizes):
        for idx, t, X, U, flag, mark in part[7]:
            cols["path_id"].append(idx + start)
            cols["t"].append(t)
            cols["X"].append(X)
            cols["u"].append(U)
            cols["jump_flag"].append(flag)
            cols["mark"].append(mark)
        start += P
    out = {k: np.concatenate(v) for k, v in cols.items()}
    order = np.argsort(out["path_id"], kind="stable")
    return {k: v[order] for k, v in out.items()}


def evaluate_cost(bundle: PathBundle, coeffs: CoefficientSet) -> CostEstimate:
    """Running-cost trapezoid plus ``<M X(T), X(T)>``, averaged over paths."""
    terminal = np.einsum("pi,ij,pj->p", bundle.X_T, coeffs.M, bundle.X_T)
    return CostEstimate.from_samples(bundle.running + terminal, bundle.pairs)


def write_paths_csv(bundle: PathBundle, path) -> Path:
    """Columns: path_id, t, X_1..X_n, u_1..u_m, jump_flag, mark_id."""
    if bundle.record is None:
        raise ValueError("bundle was simulated without record=True")
    r = bundle.record
    n, m = r["X"].shape[1], r["u"].shape[1]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "t", *(f"X_{i + 1}" for i in range(n)), *(f"u_{i + 1}" for i in range(m)), "jump_flag", "mark_id"])
        for p, t, X, U, f, e in zip(r["path_id"], r["t"], r["X"], r["u"], r["jump_flag"], r["mark"]):
            w.writerow([int(p), repr(float(t)), *(repr(float(v)) for v in X), *(repr(float(v)) for v in U),
                        int(f), bundle.mark_names[e] if e >= 0 else ""])
    return path


# --------------------------------------------------------------------------
# moment oracle
# --------------------------------------------------------------------------


def moment_oracle(coeffs: CoefficientSet, t: float, *, x0: float = 1.0, gain=0.0, offset=0.0, t0: float = 0.0):
    """Exact first and second moments of a scalar state under ``u = g x + h``.

    With ``alpha = a + b g``, ``gamma = c + d g``, ``eps_e = e_e + f_e g``:

        m1' = alpha m1 + b h
        m2' = 2 (alpha m2 + b h m1) + sum_i E[(gamma_i X + d_i h)^2]
              + sum_e nu_e E[(eps_e X + f_e h)^2]

    integrated with a high-order adaptive scheme.
    """
    if coeffs.n != 1 or coeffs.m != 1:
        raise ValueError(f"moment_oracle needs n = m = 1, got n={coeffs.n}, m={coeffs.m}")
    if not coeffs.is_deterministic:
        raise ValueError("moment_oracle needs deterministic coefficients")
    g_fn = gain if callable(gain) else (lambda s, g=float(gain): g)
    h_fn = offset if callable(offset) else (lambda s, c=float(offset): c)

    def rhs(s, y):
        m1, m2 = y
        c = coeffs.at(s)
        g, h = float(np.asarray(g_fn(s)).reshape(-1)[0]), float(np.asarray(h_fn(s)).reshape(-1)[0])
        a, b = c.A[0, 0], c.B[0, 0]
        alpha = a + b * g
        d1 = alpha * m1 + b * h
        d2 = 2.0 * (alpha * m2 + b * h * m1)
        for ci, di in zip(c.C[:, 0, 0], c.D[:, 0, 0]):
            gam = ci + di * g
            d2 += gam * gam * m2 + 2.0 * gam * di * h * m1 + (di * h) ** 2
        for nu, ei, fi in zip(c.nu, c.E[:, 0, 0], c.F[:, 0, 0]):
            eps = ei + fi * g
            d2 += nu * (eps * eps * m2 + 2.0 * eps * fi * h * m1 + (fi * h) ** 2)
        return [d1, d2]

    if t == t0:
        return float(x0), float(x0) ** 2
    sol = solve_ivp(rhs, (t0, t), [float(x0), float(x0) ** 2], method="DOP853", rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise RuntimeError(f"moment ODE failed: {sol.message}")
    return float(sol.y[0, -1]), float(sol.y[1, -1])
