"""Deterministic-coefficient Riccati integro-differential equation.

With deterministic coefficients the martingale parts vanish (L = R = 0) and K
solves the backward matrix ODE

    dK/dt = -G(t, K, 0, 0),   K(T) = M,

which is integrated here with classical fixed-step RK4.  Coefficients are
sampled at the stage times, so the fourth-order claims assume they are smooth
in t; piecewise-continuous data works but loses order at the kinks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import NonFiniteState, RiccatiJumpError
from .model import CoefficientSet, Snapshot, _sym, generator, lyapunov_part, script_N

PSD_FLOOR = 1e-9


class PositivityError(RiccatiJumpError):
    """A solved K left the PSD cone by more than round-off."""


@dataclass
class RiccatiGrid:
    times: np.ndarray  # (Nt + 1,)
    K: np.ndarray  # (Nt + 1, n, n)
    min_scriptN_eig: np.ndarray  # (Nt + 1,)
    step_stats: dict = field(default_factory=dict)
    _interp: object = field(default=None, repr=False)

    @property
    def K_values(self) -> list[np.ndarray]:
        return list(self.K)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def Nt(self) -> int:
        return len(self.times) - 1

    @property
    def n(self) -> int:
        return self.K.shape[1]


def _zeros_LR(s: Snapshot):
    return np.zeros((s.d, s.n, s.n)), np.zeros((s.k, s.n, s.n))


def _require_deterministic(coeffs: CoefficientSet):
    if not coeffs.is_deterministic:
        raise ValueError("the Riccati IDE solver needs deterministic coefficients; use the lattice for path functionals")


def _riccati_rhs(coeffs: CoefficientSet) -> Callable[[float, np.ndarray], np.ndarray]:
    """Returns t, K -> dK/dt = -G(t, K, 0, 0)."""
    _require_deterministic(coeffs)
    s0 = coeffs.at(0.0)
    L0, R0 = _zeros_LR(s0)

    def rhs(t, K):
        return -generator(coeffs.at(t), K, L0, R0)

    return rhs


def _lyapunov_rhs(coeffs: CoefficientSet):
    """dK/dt for the uncontrolled (u = 0) cost: the generator without the minimization."""
    s0 = coeffs.at(0.0)
    L0, R0 = _zeros_LR(s0)

    def rhs(t, K):
        s = coeffs.at(t)
        return -_sym(lyapunov_part(s, K, L0, R0) + s.Q)

    return rhs


def _rk4_step(rhs, t_hi: float, h: float, K: np.ndarray) -> np.ndarray:
    """One RK4 step from t_hi down to t_hi - h; stages are symmetrized."""
    k1 = rhs(t_hi, K)
    k2 = rhs(t_hi - 0.5 * h, _sym(K - 0.5 * h * k1))
    k3 = rhs(t_hi - 0.5 * h, _sym(K - 0.5 * h * k2))
    k4 = rhs(t_hi - h, _sym(K - h * k3))
    return _sym(K - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def _integrate_backward(coeffs: CoefficientSet, Nt: int, rhs, error_estimate: bool):
    if Nt < 1:
        raise ValueError("Nt must be >= 1")
    T = coeffs.T
    times = np.array([T * i / Nt for i in range(Nt + 1)])
    times[-1] = T
    n = coeffs.n
    Ks = np.empty((Nt + 1, n, n))
    Ks[Nt] = coeffs.M
    max_err = 0.0
    for i in range(Nt - 1, -1, -1):
        h = times[i + 1] - times[i]
        K_next = Ks[i + 1]
        K = _rk4_step(rhs, times[i + 1], h, K_next)
        if error_estimate:
            half = _rk4_step(rhs, times[i + 1], 0.5 * h, K_next)
            half = _rk4_step(rhs, times[i + 1] - 0.5 * h, 0.5 * h, half)
            max_err = max(max_err, float(np.abs(half - K).max()) / 15.0)
        if not np.all(np.isfinite(K)):
            raise NonFiniteState(f"non-finite K at t={times[i]!r}")
        Ks[i] = K
    stats = {"accepted": Nt, "rejected": 0}
    if error_estimate:
        stats["max_local_error"] = max_err
    return times, Ks, stats


def _scriptN_floor(coeffs: CoefficientSet, times, Ks) -> np.ndarray:
    out = np.empty(len(times))
    for i, (t, K) in enumerate(zip(times, Ks)):
        s = coeffs.at(float(t))
        _, R0 = _zeros_LR(s)
        out[i] = np.linalg.eigvalsh(_sym(script_N(s, K, R0))).min()
    return out


def solve_riccati_ide(coeffs: CoefficientSet, Nt: int, *, error_estimate: bool = False, check_psd: bool = True) -> RiccatiGrid:
    """Integrate dK/dt = -G(t, K, 0, 0), K(T) = M backward on a uniform grid.

    ``error_estimate`` adds a step-doubling local error estimate (three times
    the work).  Raises :class:`NonPositiveScriptN` if the control Hessian loses
    definiteness at any stage and :class:`PositivityError` if K leaves the PSD
    cone by more than ``1e-9 * (1 + |K|)``.
    """
    times, Ks, stats = _integrate_backward(coeffs, Nt, _riccati_rhs(coeffs), error_estimate)
    floors = _scriptN_floor(coeffs, times, Ks)
    flagged = [float(t) for t, v in zip(times, floors) if v < 0.5 * coeffs.delta]
    stats["scriptN_flags"] = flagged
    grid = RiccatiGrid(times, Ks, floors, stats)
    if check_psd:
        bad = psd_violations(grid)
        if bad:
            t, ev = bad[0]
            raise PositivityError(f"K not PSD at t={t!r} (min eig {ev:.3e}); {len(bad)} nodes affected")
    return grid


def solve_lyapunov_ide(coeffs: CoefficientSet, Nt: int) -> RiccatiGrid:
    """Cost-to-go matrix of the zero control: dK/dt = -(A'K + KA + ... + Q)."""
    _require_deterministic(coeffs)
    times, Ks, stats = _integrate_backward(coeffs, Nt, _lyapunov_rhs(coeffs), False)
    return RiccatiGrid(times, Ks, np.full(len(times), np.nan), stats)


def psd_violations(grid: RiccatiGrid) -> list[tuple[float, float]]:
    out = []
    for t, K in zip(grid.times, grid.K):
        ev = float(np.linalg.eigvalsh(K).min())
        if ev < -PSD_FLOOR * (1.0 + np.linalg.norm(K, 2)):
            out.append((float(t), ev))
    return out


def riccati_residual(grid: RiccatiGrid, coeffs: CoefficientSet) -> float:
    """Max over nodes of ``|K(t_i) - M - int_{t_i}^T G(s, K(s), 0, 0) ds|``.

    The integral uses Simpson's rule per interval with the midpoint value of K
    from the cubic Hermite interpolant whose slopes are -G at the nodes, so the
    quadrature itself is fourth order.  Norm: Frobenius.
    """
    times, Ks = grid.times, grid.K
    Nt = len(times) - 1
    s0 = coeffs.at(0.0)
    L0, R0 = _zeros_LR(s0)
    G = np.array([generator(coeffs.at(float(t)), K, L0, R0) for t, K in zip(times, Ks)])
    h = np.diff(times)
    pieces = np.empty_like(Ks[:-1])
    for i in range(Nt):
        K_mid = 0.5 * (Ks[i] + Ks[i + 1]) + (h[i] / 8.0) * (-G[i] + G[i + 1])
        t_mid = 0.5 * (times[i] + times[i + 1])
        G_mid = generator(coeffs.at(t_mid), _sym(K_mid), L0, R0)
        pieces[i] = (h[i] / 6.0) * (G[i] + 4.0 * G_mid + G[i + 1])
    # compensated reverse cumulative sum
    acc = np.zeros_like(Ks[0])
    comp = np.zeros_like(Ks[0])
    worst = float(np.linalg.norm(Ks[Nt] - coeffs.M))
    for i in range(Nt - 1, -1, -1):
        y = pieces[i] - comp
        tot = acc + y
        comp = (tot - acc) - y
        acc = tot
        worst = max(worst, float(np.linalg.norm((Ks[i] - coeffs.M) - acc)))
    return worst


def interpolate_K(grid: RiccatiGrid, t) -> np.ndarray:
    """Monotone piecewise-cubic (PCHIP) interpolation of K, entrywise.

    Exact at grid nodes.  ``t`` may be a scalar (returns (n, n)) or an array
    (returns (len(t), n, n)).
    """
    t_arr = np.asarray(t, dtype=float)
    lo, hi = grid.times[0], grid.times[-1]
    if np.any(t_arr < lo) or np.any(t_arr > hi) or not np.all(np.isfinite(t_arr)):
        raise ValueError(f"t={t!r} outside [{lo}, {hi}]")
    if grid._interp is None:
        grid._interp = PchipInterpolator(grid.times, grid.K, axis=0)
    out = np.array(grid._interp(t_arr))
    # PPoly evaluates the right end from the last interval; pin nodes exactly
    idx = np.clip(np.searchsorted(grid.times, t_arr), 0, len(grid.times) - 1)
    hit = grid.times[idx] == t_arr
    if np.ndim(t_arr) == 0:
        if hit:
            out = grid.K[idx].copy()
    elif np.any(hit):
        out[hit] = grid.K[idx[hit]]
    return _sym(out)


# --------------------------------------------------------------------------
# CSV round-trip
# --------------------------------------------------------------------------


def vech_labels(n: int, prefix: str = "K") -> list[str]:
    return [f"{prefix}_{i + 1}_{j + 1}" for j in range(n) for i in range(j, n)]


def vech(X: np.ndarray) -> list[float]:
    n = X.shape[0]
    return [float(X[i, j]) for j in range(n) for i in range(j, n)]


def unvech(values, n: int) -> np.ndarray:
    X = np.empty((n, n))
    it = iter(values)
    for j in range(n):
        for i in range(j, n):
            X[i, j] = X[j, i] = next(it)
    return X


def write_grid_csv(grid: RiccatiGrid, path) -> Path:
    """Columns: t, vech(K) (lower triangle, column-major), min_scriptN_eig.

    Floats are written with ``repr`` so reading back is bit-exact.
    """
    path = Path(path)
    n = grid.n
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *vech_labels(n), "min_scriptN_eig"])
        for t, K, ev in zip(grid.times, grid.K, grid.min_scriptN_eig):
            w.writerow([repr(float(t)), *(repr(v) for v in vech(K)), repr(float(ev))])
    return path


def read_grid_csv(path) -> RiccatiGrid:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    nv = len(header) - 2
    n = int(round((math.sqrt(8 * nv + 1) - 1) / 2))
    if n * (n + 1) // 2 != nv or header[0] != "t" or header[-1] != "min_scriptN_eig":
        raise ValueError(f"{path}: not a Riccati grid file (header {header})")
    times = np.array([float(r[0]) for r in body])
    K = np.array([unvech([float(v) for v in r[1:-1]], n) for r in body])
    ev = np.array([float(r[-1]) for r in body])
    return RiccatiGrid(times, K, ev, {"source": str(path)})
