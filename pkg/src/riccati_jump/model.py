"""Problem data and the pointwise operators of the jump Riccati equation.

The controlled state is

    dX = (A X + B u) dt + sum_i (C_i X + D_i u) dW_i + int (E(e) X + F(e) u) mu~(de, dt)

with running cost <Q x, x> + <N u, u> and terminal cost <M x, x>.  Marks live in
a finite set with weights nu({e}), so every integral against nu is a finite sum.

Operators (K symmetric, L a d-tuple of symmetric matrices, R a symmetric
matrix per mark):

    scriptN(K, R)    = N + sum D_i' K D_i + sum_e nu_e F_e'(K + R_e) F_e
    scriptM(K, L, R) = K B + sum L_i D_i + sum C_i' K D_i
                       + sum_e nu_e [E_e' K F_e + (I + E_e') R_e F_e]
    G(K, L, R)       = A'K + K A + sum (L_i C_i + C_i' L_i + C_i' K C_i)
                       + sum_e nu_e [R_e E_e + E_e' R_e + E_e'(K + R_e) E_e]
                       + Q - scriptM scriptN^{-1} scriptM'
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .errors import DimensionError, NonPositiveScriptN
from .functionals import PathFunctional

logger = logging.getLogger(__name__)

TimeMap = Callable[[float], np.ndarray]
MarkMap = Callable[[float, Hashable], np.ndarray]


# --------------------------------------------------------------------------
# time maps
# --------------------------------------------------------------------------


class Constant:
    """Time map returning one fixed (read-only) matrix."""

    def __init__(self, value):
        arr = np.array(value, dtype=float, ndmin=2)
        arr.setflags(write=False)
        self.value = arr

    def __call__(self, t):
        return self.value

    def __repr__(self):
        return f"Constant({self.value.tolist()})"


class Polynomial:
    """Time map ``sum_k coeffs[k] * t**k``."""

    def __init__(self, coeffs: Sequence):
        if len(coeffs) == 0:
            raise ValueError("polynomial needs at least one coefficient matrix")
        self.coeffs = [np.array(c, dtype=float, ndmin=2) for c in coeffs]
        shapes = {c.shape for c in self.coeffs}
        if len(shapes) != 1:
            raise ValueError(f"polynomial coefficients have mixed shapes {sorted(shapes)}")

    def __call__(self, t):
        out = np.zeros_like(self.coeffs[0])
        for c in reversed(self.coeffs):
            out = out * t + c
        return out

    def __repr__(self):
        return f"Polynomial({[c.tolist() for c in self.coeffs]})"


def as_time_map(value) -> TimeMap:
    if isinstance(value, (Constant, Polynomial)) or callable(value):
        return value
    return Constant(value)


def _is_constant(fn) -> bool:
    return isinstance(fn, Constant)


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MarkMeasure:
    """Finite mark space with positive weights nu({e})."""

    marks: tuple
    weights: tuple

    def __post_init__(self):
        marks = tuple(self.marks)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)
        if len(marks) != len(weights):
            raise ValueError("marks and weights differ in length")
        if len(set(marks)) != len(marks):
            raise ValueError(f"duplicate marks in {marks}")
        for e, w in zip(marks, weights):
            if not (w > 0.0 and math.isfinite(w)):
                raise ValueError(f"mark {e!r}: weight must be positive and finite, got {w}")

    @classmethod
    def from_mapping(cls, weights: Mapping) -> "MarkMeasure":
        return cls(tuple(weights), tuple(weights.values()))

    @classmethod
    def empty(cls) -> "MarkMeasure":
        return cls((), ())

    @property
    def total(self) -> float:
        return math.fsum(self.weights)

    @property
    def nu(self) -> np.ndarray:
        return np.array(self.weights, dtype=float)

    def __len__(self):
        return len(self.marks)

    def index(self, mark) -> int:
        return self.marks.index(mark)

    def weight(self, mark) -> float:
        return self.weights[self.index(mark)]


@dataclass(frozen=True, eq=False)
class Snapshot:
    """All coefficients evaluated at one time (and, on a lattice, one node)."""

    t: float
    A: np.ndarray  # (n, n)
    B: np.ndarray  # (n, m)
    C: np.ndarray  # (d, n, n)
    D: np.ndarray  # (d, n, m)
    E: np.ndarray  # (k, n, n)
    F: np.ndarray  # (k, n, m)
    Q: np.ndarray  # (n, n)
    N: np.ndarray  # (m, m)
    nu: np.ndarray  # (k,)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def d(self) -> int:
        return self.C.shape[0]

    @property
    def k(self) -> int:
        return self.nu.shape[0]


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Model data.  Matrix coefficients are time maps ``t -> array``; E and F
    map ``(t, mark) -> array``.  ``path`` optionally overrides any of
    ``A, B, Q, N, C1..Cd, D1..Dd`` with a :class:`PathFunctional`; only the
    lattice solver accepts such coefficients.
    """

    n: int
    m: int
    d: int
    A: TimeMap
    B: TimeMap
    C: tuple
    D: tuple
    E: MarkMap
    F: MarkMap
    Q: TimeMap
    N: TimeMap
    M: np.ndarray
    marks: MarkMeasure
    T: float
    delta: float
    bound: float = math.inf
    path: Mapping[str, PathFunctional] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def is_deterministic(self) -> bool:
        return not self.path

    @property
    def time_invariant(self) -> bool:
        if "ti" not in self._cache:
            maps = [self.A, self.B, self.Q, self.N, *self.C, *self.D]
            flag = all(_is_constant(f) for f in maps) and isinstance(self.E, _MarkTable) and isinstance(self.F, _MarkTable)
            flag = flag and self.E.is_constant and self.F.is_constant
            self._cache["ti"] = flag
        return self._cache["ti"]

    def at(self, t: float, path_state: Mapping | None = None, dt: float | None = None) -> Snapshot:
        """Evaluate every coefficient at ``t``.

        ``path_state`` maps overridden symbols to their functional states; it is
        required when the set has path-functional coefficients.
        """
        if self.path and path_state is None:
            raise ValueError(
                "coefficient set has path-functional entries "
                f"({sorted(self.path)}); a node path_state is required"
            )
        if not self.path and self.time_invariant and "snap" in self._cache:
            snap = self._cache["snap"]
            return snap if snap.t == t else _retime(snap, t)

        def pick(symbol, fn):
            if self.path and symbol in self.path:
                return np.atleast_2d(self.path[symbol].value(path_state[symbol], t, dt))
            return np.atleast_2d(fn(t))

        n, m, d = self.n, self.m, self.d
        A = _check(pick("A", self.A), (n, n), "A")
        B = _check(pick("B", self.B), (n, m), "B")
        C = np.stack([_check(pick(f"C{i + 1}", c), (n, n), f"C{i + 1}") for i, c in enumerate(self.C)]) if d else np.zeros((0, n, n))
        D = np.stack([_check(pick(f"D{i + 1}", c), (n, m), f"D{i + 1}") for i, c in enumerate(self.D)]) if d else np.zeros((0, n, m))
        k = len(self.marks)
        if k:
            E = np.stack([_check(np.atleast_2d(self.E(t, e)), (n, n), f"E[{e}]") for e in self.marks.marks])
            F = np.stack([_check(np.atleast_2d(self.F(t, e)), (n, m), f"F[{e}]") for e in self.marks.marks])
        else:
            E = np.zeros((0, n, n))
            F = np.zeros((0, n, m))
        Q = _check(pick("Q", self.Q), (n, n), "Q")
        N = _check(pick("N", self.N), (m, m), "N")
        snap = Snapshot(float(t), A, B, C, D, E, F, Q, N, self.marks.nu)
        if not self.path and self.time_invariant:
            self._cache["snap"] = snap
        return snap

    def replace(self, **changes) -> "CoefficientSet":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__ if f != "_cache"}
        kw.update(changes)
        return CoefficientSet(**kw)


def _retime(snap: Snapshot, t: float) -> Snapshot:
    return Snapshot(float(t), snap.A, snap.B, snap.C, snap.D, snap.E, snap.F, snap.Q, snap.N, snap.nu)


class _MarkTable:
    """``(t, mark) -> matrix`` backed by one time map per mark."""

    def __init__(self, table: Mapping, shape, symbol):
        self.table = {e: as_time_map(v) for e, v in table.items()}
        self.shape = shape
        self.symbol = symbol
        self.is_constant = all(_is_constant(f) for f in self.table.values())

    def __call__(self, t, mark):
        fn = self.table.get(mark)
        if fn is None:
            return np.zeros(self.shape)
        return fn(t)


def _check(arr: np.ndarray, shape, symbol: str) -> np.ndarray:
    if arr.shape != tuple(shape):
        raise DimensionError(symbol, shape, arr.shape)
    return arr


def build_coefficients(
    *,
    A=None,
    B=None,
    C: Sequence | None = None,
    D: Sequence | None = None,
    Q=None,
    N=None,
    M=None,
    marks: MarkMeasure | Mapping | None = None,
    E=None,
    F=None,
    T: float = 1.0,
    delta: float | None = None,
    bound: float = math.inf,
    n: int | None = None,
    m: int | None = None,
    d: int | None = None,
    path: Mapping[str, PathFunctional] | None = None,
) -> CoefficientSet:
    """Assemble a :class:`CoefficientSet` from arrays, time maps or mark tables.

    Missing coefficients default to zero (``N`` to the identity).  Dimensions
    are inferred from whichever arrays are given; ``E``/``F`` may be mappings
    ``mark -> matrix | time map`` or callables ``(t, mark) -> matrix``.
    ``delta`` defaults to the smallest eigenvalue of ``N(0)``.
    """

    def probe(x):
        if x is None:
            return None
        if isinstance(x, PathFunctional):
            mats = x.matrices()
            return mats[0].shape if mats else None
        if callable(x):
            return np.atleast_2d(x(0.0)).shape
        return np.array(x, dtype=float, ndmin=2).shape

    if n is None:
        for x in (A, Q, M, *(C or ())):
            s = probe(x)
            if s is not None:
                n = s[0]
                break
        else:
            s = probe(B)
            n = s[0] if s is not None else 1
    if m is None:
        if probe(B) is not None:
            m = probe(B)[1]
        elif probe(N) is not None:
            m = probe(N)[0]
        elif D and probe(D[0]) is not None:
            m = probe(D[0])[1]
        else:
            m = 1
    if d is None:
        d = max(len(C or ()), len(D or ()))
    path = dict(path or {})

    def tm(x, default, symbol):
        if symbol in path:
            return Constant(np.zeros(default))
        if x is None:
            return Constant(np.zeros(default))
        if isinstance(x, PathFunctional):
            path[symbol] = x
            return Constant(np.zeros(default))
        return as_time_map(x)

    A_ = tm(A, (n, n), "A")
    B_ = tm(B, (n, m), "B")
    Q_ = tm(Q, (n, n), "Q")
    N_ = tm(N if N is not None else np.eye(m), (m, m), "N")
    C = list(C or [])
    D = list(D or [])
    if len(C) not in (0, d) or len(D) not in (0, d):
        raise DimensionError("C/D", (d,), (len(C), len(D)))
    C_ = tuple(tm(C[i] if C else None, (n, n), f"C{i + 1}") for i in range(d))
    D_ = tuple(tm(D[i] if D else None, (n, m), f"D{i + 1}") for i in range(d))
    M_ = np.zeros((n, n)) if M is None else np.array(M, dtype=float, ndmin=2)
    if M_.shape != (n, n):
        raise DimensionError("M", (n, n), M_.shape)
    M_.setflags(write=False)

    if marks is None:
        mm = MarkMeasure.empty()
    elif isinstance(marks, MarkMeasure):
        mm = marks
    else:
        mm = MarkMeasure.from_mapping(marks)

    def mark_map(x, shape, symbol):
        if x is None:
            return _MarkTable({}, shape, symbol)
        if isinstance(x, Mapping):
            unknown = set(x) - set(mm.marks)
            if unknown:
                raise ValueError(f"{symbol}: unknown marks {sorted(map(str, unknown))}")
            return _MarkTable(x, shape, symbol)
        if callable(x):
            return x
        # same matrix for every mark
        return _MarkTable({e: x for e in mm.marks}, shape, symbol)

    E_ = mark_map(E, (n, n), "E")
    F_ = mark_map(F, (n, m), "F")

    if delta is None:
        if "N" in path:
            mats = path["N"].matrices()
            delta = min(float(np.linalg.eigvalsh(_sym(mt)).min()) for mt in mats) if mats else 1.0
        else:
            delta = float(np.linalg.eigvalsh(_sym(np.atleast_2d(N_(0.0)))).min())
    return CoefficientSet(
        n=int(n), m=int(m), d=int(d), A=A_, B=B_, C=C_, D=D_, E=E_, F=F_, Q=Q_, N=N_, M=M_,
        marks=mm, T=float(T), delta=float(delta), bound=float(bound), path=path,
    )


# --------------------------------------------------------------------------
# argument normalization
# --------------------------------------------------------------------------


def _snap(coeffs, t) -> Snapshot:
    if isinstance(coeffs, Snapshot):
        return coeffs
    return coeffs.at(t)


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def _as_K(K, n) -> np.ndarray:
    K = np.array(K, dtype=float, ndmin=2)
    return _check(K, (n, n), "K")


def _as_L(L, snap: Snapshot) -> np.ndarray:
    n, d = snap.n, snap.d
    if L is None:
        return np.zeros((d, n, n))
    L = np.asarray(L, dtype=float)
    if d and L.ndim == 2 and n == L.shape[0]:
        L = L[None]
    if L.size == 0 and d == 0:
        return np.zeros((0, n, n))
    if L.ndim == 1 and n == 1:
        L = L.reshape(-1, 1, 1)
    return _check(L, (d, n, n), "L")


def _as_R(R, snap: Snapshot, marks: Sequence | None = None) -> np.ndarray:
    n, k = snap.n, snap.k
    if R is None:
        return np.zeros((k, n, n))
    if isinstance(R, Mapping):
        if marks is None:
            raise ValueError("R given as a mapping needs the mark order; pass a CoefficientSet")
        missing = [e for e in marks if e not in R]
        if missing:
            raise DimensionError(f"R[{missing[0]}]", (n, n), ())
        return np.stack([_check(np.array(R[e], dtype=float, ndmin=2), (n, n), f"R[{e}]") for e in marks]) if k else np.zeros((0, n, n))
    R = np.asarray(R, dtype=float)
    if k and R.ndim == 2 and k == 1:
        R = R[None]
    if R.ndim == 1 and n == 1:
        R = R.reshape(-1, 1, 1)
    if R.size == 0 and k == 0:
        return np.zeros((0, n, n))
    return _check(R, (k, n, n), "R")


def _prep(coeffs, t, K, L=None, R=None):
    snap = _snap(coeffs, t)
    marks = coeffs.marks.marks if isinstance(coeffs, CoefficientSet) else None
    return snap, _as_K(K, snap.n), _as_L(L, snap), _as_R(R, snap, marks)


# --------------------------------------------------------------------------
# operators (array core)
# --------------------------------------------------------------------------


def script_N(s: Snapshot, K, R) -> np.ndarray:
    out = s.N.copy()
    if s.d:
        Dt = np.swapaxes(s.D, 1, 2)
        out = out + np.sum(Dt @ K @ s.D, axis=0)
    if s.k:
        Ft = np.swapaxes(s.F, 1, 2)
        out = out + np.einsum("e,eij->ij", s.nu, Ft @ (K + R) @ s.F)
    return out


def script_M(s: Snapshot, K, L, R) -> np.ndarray:
    out = K @ s.B
    if s.d:
        Ct = np.swapaxes(s.C, 1, 2)
        out = out + np.sum(L @ s.D, axis=0) + np.sum(Ct @ K @ s.D, axis=0)
    if s.k:
        Et = np.swapaxes(s.E, 1, 2)
        I = np.eye(s.n)
        terms = Et @ K @ s.F + (I + Et) @ R @ s.F
        out = out + np.einsum("e,eij->ij", s.nu, terms)
    return out


def lyapunov_part(s: Snapshot, K, L, R) -> np.ndarray:
    """G without the ``- scriptM scriptN^{-1} scriptM'`` term (and without Q)."""
    out = s.A.T @ K + K @ s.A
    if s.d:
        Ct = np.swapaxes(s.C, 1, 2)
        out = out + np.sum(L @ s.C + Ct @ L + Ct @ K @ s.C, axis=0)
    if s.k:
        Et = np.swapaxes(s.E, 1, 2)
        terms = R @ s.E + Et @ R + Et @ (K + R) @ s.E
        out = out + np.einsum("e,eij->ij", s.nu, terms)
    return out


def spd_solve(Nmat: np.ndarray, rhs: np.ndarray, t: float) -> np.ndarray:
    """Solve ``Nmat X = rhs`` through a Cholesky factor; failure means Nmat is not PD."""
    try:
        c = np.linalg.cholesky(Nmat)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveScriptN(t, f"Cholesky failed, min eig {np.linalg.eigvalsh(_sym(Nmat)).min():.3e}") from exc
    if not np.all(np.isfinite(c)):
        raise NonPositiveScriptN(t, "non-finite Cholesky factor")
    return cho_solve((c, True), rhs)


def generator(s: Snapshot, K, L, R) -> np.ndarray:
    Nop = script_N(s, K, R)
    Mop = script_M(s, K, L, R)
    gain_t = spd_solve(_sym(Nop), Mop.T, s.t)  # N^{-1} M'
    G = lyapunov_part(s, K, L, R) + s.Q - Mop @ gain_t
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("G asymmetry before symmetrization: %.3e", float(np.abs(G - G.T).max()))
    return _sym(G)


# --------------------------------------------------------------------------
# public operators
# --------------------------------------------------------------------------


def eval_script_N(coeffs, t, K, R=None) -> np.ndarray:
    """``N + sum D_i' K D_i + sum_e nu_e F_e'(K + R_e)F_e``, symmetrized."""
    s, K, _, R = _prep(coeffs, t, K, None, R)
    out = script_N(s, K, R)
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("scriptN asymmetry before symmetrization: %.3e", float(np.abs(out - out.T).max()))
    return _sym(out)


def eval_script_M(coeffs, t, K, L=None, R=None) -> np.ndarray:
    s, K, L, R = _prep(coeffs, t, K, L, R)
    return script_M(s, K, L, R)


def eval_G(coeffs, t, K, L=None, R=None) -> np.ndarray:
    """Riccati generator G(t, K, L, R); raises :class:`NonPositiveScriptN`."""
    s, K, L, R = _prep(coeffs, t, K, L, R)
    return generator(s, K, L, R)


def feedback_gain(coeffs, t, K, L=None, R=None) -> np.ndarray:
    """Theta = -scriptN^{-1} scriptM', shape (m, n)."""
    s, K, L, R = _prep(coeffs, t, K, L, R)
    return -spd_solve(_sym(script_N(s, K, R)), script_M(s, K, L, R).T, s.t)


def running_cost(coeffs, t, x, u) -> float:
    """f(t, x, u) = <Q x, x> + <N u, u>."""
    s = _snap(coeffs, t)
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    _check(x, (s.n,), "x")
    _check(u, (s.m,), "u")
    return float(x @ s.Q @ x + u @ s.N @ u)


def hamiltonian(coeffs, t, x, v, K, L=None, R=None) -> float:
    """Drift of <K X, X> plus running cost, at state x and control v.

    Evaluated term by term from the Ito expansion (not from scriptN/scriptM),
    so it serves as an independent check on the minimizer.
    """
    s, K, L, R = _prep(coeffs, t, K, L, R)
    x = np.asarray(x, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    _check(x, (s.n,), "x")
    _check(v, (s.m,), "v")
    val = 2.0 * (K @ x) @ (s.A @ x + s.B @ v)
    for i in range(s.d):
        y = s.C[i] @ x + s.D[i] @ v
        val += 2.0 * (L[i] @ x) @ y + y @ K @ y
    for j in range(s.k):
        z = s.E[j] @ x + s.F[j] @ v
        val += s.nu[j] * (2.0 * (R[j] @ x) @ z + z @ (K + R[j]) @ z)
    return float(val + x @ s.Q @ x + v @ s.N @ v)


def pointwise_minimizer(coeffs, t, x, K, L=None, R=None):
    """Minimize :func:`hamiltonian` over the control: returns ``(u_star, value)``.

    ``u_star = -scriptN^{-1} scriptM' x``; the minimum value equals ``x' G x``.
    """
    s, K, L, R = _prep(coeffs, t, K, L, R)
    x = np.asarray(x, dtype=float).reshape(-1)
    _check(x, (s.n,), "x")
    Nop = _sym(script_N(s, K, R))
    u = -spd_solve(Nop, script_M(s, K, L, R).T @ x, s.t)
    return u, hamiltonian(s, t, x, u, K, L, R)


# --------------------------------------------------------------------------
# assumption checks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Failure:
    symbol: str
    t: float | None
    message: str

    def __str__(self):
        where = "" if self.t is None else f" at t={self.t:g}"
        return f"{self.symbol}: {self.message}{where}"


@dataclass
class ValidationReport:
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def messages(self) -> list[str]:
        return [str(f) for f in self.failures]

    def __bool__(self):
        return self.ok


def _psd_floor(X: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(_sym(X)).min())


def check_snapshot(s: Snapshot, delta: float, bound: float, tol: float = 1e-12) -> list[Failure]:
    """Assumption checks for one set of evaluated coefficients."""
    out = []
    t = s.t
    for name, X in (("Q", s.Q), ("N", s.N)):
        if np.abs(X - X.T).max() > tol * (1.0 + np.abs(X).max()):
            out.append(Failure(name, t, f"{name} not symmetric"))
    qmin = _psd_floor(s.Q)
    if qmin < -tol * (1.0 + np.abs(s.Q).max()):
        out.append(Failure("Q", t, f"Q not PSD (min eig {qmin:.3e})"))
    nmin = _psd_floor(s.N)
    if nmin < delta * (1.0 - 1e-12) or nmin <= 0.0:
        out.append(Failure("N", t, f"N below delta (min eig {nmin:.3e} < {delta:.3e})"))
    if math.isfinite(bound):
        for name, X in (("A", s.A), ("B", s.B), ("C", s.C), ("D", s.D), ("E", s.E), ("F", s.F), ("Q", s.Q), ("N", s.N)):
            if X.size and np.abs(X).max() > bound:
                out.append(Failure(name, t, f"bound exceeded ({np.abs(X).max():.3e} > {bound:.3e})"))
    for name, X in (("A", s.A), ("B", s.B), ("C", s.C), ("D", s.D), ("E", s.E), ("F", s.F), ("Q", s.Q), ("N", s.N)):
        if X.size and not np.all(np.isfinite(X)):
            out.append(Failure(name, t, "non-finite entries"))
    return out


def validate_assumptions(coeffs: CoefficientSet, grid: Sequence[float] | None = None) -> ValidationReport:
    """Sample every deterministic coefficient on ``grid`` and report violations.

    Path-functional coefficients are skipped here; the lattice checks them on
    each node it builds.
    """
    if grid is None:
        grid = np.linspace(0.0, coeffs.T, 11)
    report = ValidationReport()
    M = coeffs.M
    if np.abs(M - M.T).max() > 1e-12 * (1.0 + np.abs(M).max()):
        report.failures.append(Failure("M", None, "M not symmetric"))
    mmin = _psd_floor(M)
    if mmin < -1e-12 * (1.0 + np.abs(M).max()):
        report.failures.append(Failure("M", None, f"M not PSD (min eig {mmin:.3e})"))
    if math.isfinite(coeffs.bound) and np.abs(M).max() > coeffs.bound:
        report.failures.append(Failure("M", None, "bound exceeded"))
    if not coeffs.delta > 0:
        report.failures.append(Failure("delta", None, "delta must be positive"))
    if coeffs.path:
        base = coeffs.replace(path={})
        for t in grid:
            fails = check_snapshot(base.at(float(t)), coeffs.delta, coeffs.bound)
            report.failures.extend(f for f in fails if f.symbol not in coeffs.path)
        return report
    for t in grid:
        report.failures.extend(check_snapshot(coeffs.at(float(t)), coeffs.delta, coeffs.bound))
    return report


@dataclass(frozen=True)
class TriplePoint:
    """One value of the unknown triple (K, L, R) in array form."""

    K: np.ndarray
    L: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name, X in (("K", self.K), ("L", self.L), ("R", self.R)):
            if X.size and np.abs(X - np.swapaxes(X, -1, -2)).max() > 1e-10 * (1.0 + np.abs(X).max()):
                raise ValueError(f"{name} is not symmetric")
