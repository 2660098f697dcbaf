"""Optimal feedback, closed-loop simulation and the completion-of-squares gap.

The optimal control is ``u(s) = Theta(s) X(s-)`` with
``Theta = -scriptN^{-1} scriptM'``.  For any other admissible control ``u``

    J(u) - <K(t0) x0, x0> = E int_{t0}^T <scriptN(s)(u - u~), u - u~> ds,
    u~(s) = Theta(s) X(s-),

where X is the state driven by ``u`` itself.  :func:`optimality_gap`
estimates both sides on the same simulated paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import NonPositiveScriptN
from .model import CoefficientSet, eval_script_N, feedback_gain
from .riccati import RiccatiGrid, interpolate_K
from .simulator import CostEstimate, PathBundle, SimConfig, simulate_paths


@dataclass(frozen=True)
class TripleKnot:
    """Lattice output on one time cell ``[t, t + dt)``: K, L (d, n, n), R (k, n, n)."""

    t: float
    K: np.ndarray
    L: np.ndarray
    R: np.ndarray


def _distinct(t: np.ndarray):
    """Distinct times and the inverse map; most batches share a single time."""
    lo, hi = t.min(), t.max()
    if lo == hi:
        return t[:1], np.zeros(t.shape, dtype=np.intp)
    return np.unique(t, return_inverse=True)


class FeedbackLaw:
    """``Theta(t)`` together with the K (and L, R) it was built from.

    Use the instance directly as a simulator policy: ``law(t, X) -> U``.
    """

    def __init__(self, coeffs: CoefficientSet, source, K_fn, L_fn=None, R_fn=None):
        self.coeffs = coeffs
        self.source = source
        self._K = K_fn
        self._L = L_fn
        self._R = R_fn
        self._gain = lru_cache(maxsize=8192)(self._gain_uncached)
        self._scriptN = lru_cache(maxsize=8192)(self._scriptN_uncached)
        # piecewise-constant sources map a time to a cell index
        self._cell = None
        self._cell_t = None

    def K(self, t: float) -> np.ndarray:
        return self._K(float(t))

    def L(self, t: float):
        return None if self._L is None else self._L(float(t))

    def R(self, t: float):
        return None if self._R is None else self._R(float(t))

    def _gain_uncached(self, t: float) -> np.ndarray:
        G = feedback_gain(self.coeffs, t, self.K(t), self.L(t), self.R(t))
        if not np.all(np.isfinite(G)):
            raise FloatingPointError(f"non-finite feedback gain at t={t!r}")
        G.setflags(write=False)
        return G

    def _scriptN_uncached(self, t: float) -> np.ndarray:
        out = eval_script_N(self.coeffs, t, self.K(t), self.R(t))
        out.setflags(write=False)
        return out

    def gain(self, t: float) -> np.ndarray:
        """Theta(t), shape (m, n)."""
        return self._gain(float(t))

    def scriptN(self, t: float) -> np.ndarray:
        return self._scriptN(float(t))

    def value(self, x, t: float = 0.0) -> float:
        """<K(t) x, x>."""
        x = np.asarray(x, dtype=float).reshape(-1)
        return float(x @ self.K(t) @ x)

    def _batch(self, t):
        """(Theta, scriptN) at a (P,) array of times: shapes (P, m, n), (P, m, m)."""
        t = np.asarray(t, dtype=float)
        if self._cell is not None:
            cells = self._cell(t)
            uc, inv = np.unique(cells, return_inverse=True)
            ts = [self._cell_t[c] for c in uc]
            G = np.stack([self.gain(s) for s in ts])[inv]
            Nm = np.stack([self.scriptN(s) for s in ts])[inv]
            return G, Nm
        if self._L is not None or self._R is not None:
            ts, inv = _distinct(t)
            return np.stack([self.gain(s) for s in ts])[inv], np.stack([self.scriptN(s) for s in ts])[inv]
        # K from a grid, L = R = 0: one snapshot per distinct time, batched algebra
        ts, inv = _distinct(t)
        P = len(ts)
        if self.coeffs.time_invariant:
            s0 = self.coeffs.at(0.0)

            def stack(name):
                a = getattr(s0, name)
                return np.broadcast_to(a, (P, *a.shape))
        else:
            snaps = [self.coeffs.at(float(x)) for x in ts]

            def stack(name):
                return np.stack([getattr(sn, name) for sn in snaps])
        nu = self.coeffs.marks.nu
        K = self._K(ts)
        B, C, D, E, F = (stack(x) for x in "BCDEF")
        Nm = stack("N") + np.einsum("pika,pkl,pilb->pab", D, K, D) + np.einsum("e,peka,pkl,pelb->pab", nu, F, K, F)
        Nm = 0.5 * (Nm + np.swapaxes(Nm, 1, 2))
        Mm = K @ B + np.einsum("pika,pkl,pilb->pab", C, K, D) + np.einsum("e,peka,pkl,pelb->pab", nu, E, K, F)
        try:
            np.linalg.cholesky(Nm)
        except np.linalg.LinAlgError as exc:
            raise NonPositiveScriptN(float(ts.min()), "batched Cholesky failed") from exc
        G = -np.linalg.solve(Nm, np.swapaxes(Mm, 1, 2))
        if not np.all(np.isfinite(G)):
            raise FloatingPointError("non-finite feedback gain")
        return G[inv], Nm[inv]

    def __call__(self, t, X):
        if np.ndim(t) == 0:
            return X @ self.gain(t).T
        G, _ = self._batch(t)
        return np.einsum("pij,pj->pi", G, X)

    def gap_integrand(self, t, X, U):
        """``<scriptN(t)(U - Theta(t) X), U - Theta(t) X>`` per path."""
        if np.ndim(t) == 0:
            dev = U - X @ self.gain(t).T
            return np.einsum("pi,ij,pj->p", dev, self.scriptN(t), dev)
        G, Nm = self._batch(t)
        dev = U - np.einsum("pij,pj->pi", G, X)
        return np.einsum("pi,pij,pj->p", dev, Nm, dev)


def synthesize_feedback(source, coeffs: CoefficientSet) -> FeedbackLaw:
    """Build the feedback law from a :class:`RiccatiGrid` or from lattice knots.

    Grids are interpolated (PCHIP) and use L = R = 0.  A sequence of
    :class:`TripleKnot` is read as piecewise constant on each cell.  The
    control Hessian is checked at every source node; a failure raises
    :class:`NonPositiveScriptN`.
    """
    if isinstance(source, RiccatiGrid):
        if not coeffs.is_deterministic:
            raise ValueError("a Riccati grid only describes deterministic coefficients")
        law = FeedbackLaw(coeffs, source, lambda t: interpolate_K(source, t))
        for t in source.times:
            law.gain(float(t))
        return law
    knots: Sequence[TripleKnot] = list(source)
    if not knots:
        raise ValueError("no lattice knots given")
    times = np.array([k.t for k in knots])
    if np.any(np.diff(times) <= 0):
        raise ValueError("lattice knots must have increasing times")

    def cell(t):
        return knots[max(0, int(np.searchsorted(times, t, side="right")) - 1)]

    law = FeedbackLaw(coeffs, knots, lambda t: cell(t).K, lambda t: cell(t).L, lambda t: cell(t).R)
    law._cell = lambda t: np.maximum(np.searchsorted(times, t, side="right") - 1, 0)
    law._cell_t = [float(x) for x in times]
    for t in times:
        law.gain(float(t))
    return law


def simulate_closed_loop(coeffs: CoefficientSet, law: FeedbackLaw, cfg: SimConfig, **kw) -> PathBundle:
    """:func:`simulate_paths` under ``u = Theta(t) X(t-)``."""
    return simulate_paths(coeffs, law, cfg, **kw)


@dataclass
class GapResult:
    """Direct gap J(alt) - V, its completion-of-squares prediction, and their paired difference."""

    V: float
    cost: CostEstimate
    direct: CostEstimate
    predicted: CostEstimate
    difference: CostEstimate

    def consistent(self, k: float = 3.0, allowance: float = 0.0) -> bool:
        return abs(self.difference.mean) <= k * self.difference.std_error + allowance


def optimality_gap(coeffs: CoefficientSet, law: FeedbackLaw, alt_policy: Callable, cfg: SimConfig) -> GapResult:
    """Simulate ``alt_policy`` and compare J(alt) - <K(t0) x0, x0> with the predictor.

    Both estimators use the same paths (paired), so their difference has its
    own, usually much smaller, standard error.
    """
    V = law.value(cfg.x0, cfg.t0)
    bundle = simulate_paths(coeffs, alt_policy, cfg, aux={"gap": law.gap_integrand})
    pairs = bundle.pairs
    cost = bundle.cost
    pred = bundle.aux["gap"]
    return GapResult(
        V=V,
        cost=CostEstimate.from_samples(cost, pairs),
        direct=CostEstimate.from_samples(cost - V, pairs),
        predicted=CostEstimate.from_samples(pred, pairs),
        difference=CostEstimate.from_samples(cost - V - pred, pairs),
    )


def discretization_allowance(estimate: Callable[[float], float], dt: float, k: float = 3.0) -> float:
    """``k |Q(dt) - Q(dt/2)|``: a step-halving error scale for noise-free estimates.

    Used only when the Monte Carlo standard error is exactly zero, where a
    time-discretized estimator cannot meet a pure ``k * std_error`` band.
    """
    return k * abs(estimate(dt) - estimate(0.5 * dt))


def perturbed(law: FeedbackLaw, gain_shift=None, offset=None) -> Callable:
    """Affine alternative ``(Theta(t) + gain_shift) x + offset``."""
    shift = None if gain_shift is None else np.atleast_2d(np.asarray(gain_shift, float))
    c = None if offset is None else np.atleast_1d(np.asarray(offset, float))

    def policy(t, X):
        U = law(t, X)
        if shift is not None:
            U = U + X @ shift.T
        if c is not None:
            U = U + c
        return U

    return policy

