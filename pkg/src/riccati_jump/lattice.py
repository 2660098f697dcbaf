"""Finite lattice for the backward Riccati equation with random coefficients.

Each step of length dt branches on a Brownian sign vector s in {-1, +1}^d
(each component +-sqrt(dt), all vectors equally likely) and, independently, on
a jump outcome j in {none} + marks with P(j = e) = nu_e dt.  On branch (s, j)

    X' = P_b x + Q_b u,
    P_b = I + A dt + sum_i s_i sqrt(dt) C_i + sum_e dmu_e E_e,
    Q_b =     B dt + sum_i s_i sqrt(dt) D_i + sum_e dmu_e F_e,
    dmu_e = 1{j = e} - nu_e dt.

Backward induction minimizes the one-step quadratic exactly, which yields the
node matrix K and the discrete feedback gain.  The discrete Doob split of the
children's K values then gives the drift increment and the martingale
coefficients L (Brownian) and R (jump).

Coefficients may depend on the node history through path functionals
(:mod:`riccati_jump.functionals`).  Nodes with equal functional state at the
same step have identical futures, so by default they are merged
(``collapse=True``); ``collapse=False`` keeps one node per history.  Merging
changes storage only: node values are bit-identical to the explicit tree.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve

from .control import TripleKnot
from .errors import AssumptionError, DiscreteScriptNError, RiccatiJumpError
from .model import CoefficientSet, MarkMeasure, Snapshot, _sym, check_snapshot, generator, script_N
from .riccati import vech, vech_labels

MAX_NODES = 10**6
BRUTE_FORCE_LIMIT = 10**7
PSD_TOL = 1e-9


class LatticeOverflow(RiccatiJumpError):
    """The requested tree or enumeration exceeds its size bound."""


@dataclass(frozen=True)
class Branch:
    signs: tuple
    jump: int | None
    prob: float
    dmu: np.ndarray  # (k,)


@dataclass(frozen=True)
class LatticeSpec:
    Nt: int
    T: float
    d: int
    marks: MarkMeasure = field(default_factory=MarkMeasure.empty)

    @property
    def dt(self) -> float:
        return self.T / self.Nt

    def times(self) -> np.ndarray:
        t = np.array([self.T * i / self.Nt for i in range(self.Nt + 1)])
        t[-1] = self.T
        return t

    def check(self) -> None:
        if self.Nt < 1:
            raise ValueError("Nt must be >= 1")
        if self.d < 0:
            raise ValueError("d must be >= 0")
        load = self.marks.total * self.dt
        if load >= 1.0:
            raise ValueError(f"nu(Lambda)*dt = {load:.4g} >= 1: jump probabilities invalid; increase Nt")
        if load >= 0.2:
            warnings.warn(f"nu(Lambda)*dt = {load:.4g} >= 0.2; single-jump branching is coarse", stacklevel=3)

    def branches(self) -> list[Branch]:
        """All (s, j) outcomes of one step; probabilities sum to 1 exactly."""
        dt = self.dt
        k = len(self.marks)
        p_marks = [w * dt for w in self.marks.weights]
        p_none = 1.0 - math.fsum(p_marks)
        nu_dt = np.array(p_marks)
        p_sign = 0.5**self.d
        out = []
        for signs in itertools.product((1, -1), repeat=self.d):
            out.append(Branch(tuple(signs), None, p_sign * p_none, -nu_dt))
            for e in range(k):
                dmu = -nu_dt.copy()
                dmu[e] += 1.0
                out.append(Branch(tuple(signs), e, p_sign * p_marks[e], dmu))
        total = math.fsum(b.prob for b in out)
        if total != 1.0:
            raise ValueError(f"branch probabilities sum to {total!r}")
        return out

    def explicit_size(self) -> int:
        b = 2**self.d * (1 + len(self.marks))
        return sum(b**i for i in range(self.Nt + 1))


class Node:
    __slots__ = ("step", "index", "state", "address", "prob", "snap", "children",
                 "K", "gain", "Huu", "k_inc", "L", "R", "K_pre", "proj_residual", "bsrej")

    def __init__(self, step, index, state, address):
        self.step = step
        self.index = index
        self.state = state
        self.address = address
        self.prob = 0.0
        self.snap = None
        self.children = None
        self.K = None
        self.gain = None
        self.Huu = None
        self.k_inc = None
        self.L = None
        self.R = None
        self.K_pre = None
        self.proj_residual = None
        self.bsrej = None


@dataclass
class LatticeTree:
    spec: LatticeSpec
    coeffs: CoefficientSet
    branches: list
    levels: list  # levels[k] is a list of Node
    collapsed: bool
    stage: str = "built"
    _branch_mats: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return sum(len(lv) for lv in self.levels)

    @property
    def root(self) -> Node:
        return self.levels[0][0]

    def nodes(self):
        for lv in self.levels:
            yield from lv

    def inner_nodes(self):
        for lv in self.levels[:-1]:
            yield from lv

    def t(self, step: int) -> float:
        return float(self.spec.times()[step])

    def address_label(self, node: Node) -> str:
        return format_address(node.address, self.coeffs.marks.marks)

    def branch_matrices(self, node: Node):
        """(P_b, Q_b) stacked over branches for the node's coefficients."""
        key = id(node.snap)
        hit = self._branch_mats.get(key)
        if hit is not None and hit[0] is node.snap:
            return hit[1], hit[2]
        s = node.snap
        dt = self.spec.dt
        sq = math.sqrt(dt)
        n = s.n
        base_P = np.eye(n) + s.A * dt
        base_Q = s.B * dt
        P = np.empty((len(self.branches), n, n))
        Q = np.empty((len(self.branches), n, s.m))
        for i, b in enumerate(self.branches):
            Pi, Qi = base_P.copy(), base_Q.copy()
            for c, sign in enumerate(b.signs):
                Pi += (sign * sq) * s.C[c]
                Qi += (sign * sq) * s.D[c]
            for e in range(s.k):
                Pi += b.dmu[e] * s.E[e]
                Qi += b.dmu[e] * s.F[e]
            P[i], Q[i] = Pi, Qi
        self._branch_mats[key] = (s, P, Q)
        return P, Q

    def knots(self) -> list[TripleKnot]:
        """(t, K, L, R) per level; only for trees with one node per level."""
        if any(len(lv) != 1 for lv in self.levels[:-1]):
            raise ValueError("knots need one node per level (deterministic coefficients, collapsed tree)")
        if self.stage not in ("decomposed",):
            raise ValueError("run doob_decompose first")
        return [TripleKnot(self.t(k), lv[0].K, lv[0].L, lv[0].R) for k, lv in enumerate(self.levels[:-1])]


def format_address(address: tuple, marks) -> str:
    if not address:
        return "root"
    parts = []
    for signs, j in address:
        tok = "".join("+" if s > 0 else "-" for s in signs) or "0"
        if j is not None:
            tok += ":" + str(marks[j])
        parts.append(tok)
    return "/".join(parts)


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def build_tree(spec: LatticeSpec, coeffs: CoefficientSet, *, collapse: bool = True,
               max_nodes: int = MAX_NODES) -> LatticeTree:
    """Materialize every node with its coefficients evaluated on its history."""
    spec.check()
    if coeffs.d != spec.d:
        raise ValueError(f"lattice d={spec.d} but coefficients have d={coeffs.d}")
    if tuple(coeffs.marks.marks) != tuple(spec.marks.marks) or tuple(coeffs.marks.weights) != tuple(spec.marks.weights):
        raise ValueError("lattice marks differ from the coefficient marks")
    if abs(spec.T - coeffs.T) > 1e-12 * max(1.0, coeffs.T):
        raise ValueError(f"lattice T={spec.T} but coefficients have T={coeffs.T}")
    for sym, f in coeffs.path.items():
        if f.requires_brownian() > spec.d:
            raise ValueError(f"path functional for {sym} reads Brownian component {f.requires_brownian()} but d={spec.d}")
    if not collapse and spec.explicit_size() > max_nodes:
        raise LatticeOverflow(f"explicit tree would have {spec.explicit_size()} nodes > {max_nodes}")
    branches = spec.branches()
    symbols = sorted(coeffs.path)
    funcs = [coeffs.path[s] for s in symbols]
    dt = spec.dt
    times = spec.times()
    snaps: dict = {}
    checked: set = set()

    def snapshot(step, state, address):
        key = (step, state)
        s = snaps.get(key)
        if s is None:
            ps = dict(zip(symbols, state)) if symbols else None
            s = coeffs.at(float(times[step]), ps, dt)
            snaps[key] = s
            if key not in checked:
                checked.add(key)
                fails = check_snapshot(s, coeffs.delta, coeffs.bound)
                if fails:
                    raise AssumptionError([f"{f} at node {format_address(address, coeffs.marks.marks)}" for f in fails])
        return s

    root = Node(0, 0, tuple(f.initial_state() for f in funcs), ())
    root.prob = 1.0
    levels = [[root]]
    count = 1
    for k in range(spec.Nt):
        nxt: dict = {}
        new_level: list = []
        for node in levels[k]:
            node.snap = snapshot(k, node.state, node.address)
            child_ids = np.empty(len(branches), dtype=np.int64)
            for bi, b in enumerate(branches):
                st = tuple(f.advance(s, b.signs, b.jump, dt) for f, s in zip(funcs, node.state))
                key = st if collapse else node.address + ((b.signs, b.jump),)
                child = nxt.get(key)
                if child is None:
                    child = Node(k + 1, len(new_level), st, node.address + ((b.signs, b.jump),))
                    nxt[key] = child
                    new_level.append(child)
                    count += 1
                    if count > max_nodes:
                        raise LatticeOverflow(f"tree exceeds {max_nodes} nodes at step {k + 1}")
                child.prob += node.prob * b.prob
                child_ids[bi] = child.index
            node.children = child_ids
        levels.append(new_level)
    for node in levels[-1]:
        node.K = coeffs.M.copy()
    return LatticeTree(spec, coeffs, branches, levels, collapse)


# --------------------------------------------------------------------------
# dynamic programming
# --------------------------------------------------------------------------


def _child_K(tree: LatticeTree, node: Node) -> np.ndarray:
    nxt = tree.levels[node.step + 1]
    return np.stack([nxt[i].K for i in node.children])


def _one_step(tree: LatticeTree, node: Node):
    """(H_xx, H_uu, H_ux) of the one-step quadratic at the node."""
    s = node.snap
    dt = tree.spec.dt
    P, Q = tree.branch_matrices(node)
    w = np.array([b.prob for b in tree.branches])
    Kc = _child_K(tree, node)
    H_xx = s.Q * dt + np.einsum("b,bji,bjk,bkl->il", w, P, Kc, P)
    H_uu = s.N * dt + np.einsum("b,bji,bjk,bkl->il", w, Q, Kc, Q)
    H_ux = np.einsum("b,bji,bjk,bkl->il", w, Q, Kc, P)
    return _sym(H_xx), _sym(H_uu), H_ux


def backward_induction(tree: LatticeTree) -> LatticeTree:
    """Fill K and the feedback gain at every node, from the leaves up.

    Nodes within a level only read the next level, so the order inside a
    level does not matter.
    """
    for k in range(tree.spec.Nt - 1, -1, -1):
        t = tree.t(k)
        for node in tree.levels[k]:
            H_xx, H_uu, H_ux = _one_step(tree, node)
            try:
                c = np.linalg.cholesky(H_uu)
            except np.linalg.LinAlgError as exc:
                ev = float(np.linalg.eigvalsh(H_uu).min())
                raise DiscreteScriptNError(t, tree.address_label(node), f"min eig {ev:.3e}") from exc
            sol = cho_solve((c, True), H_ux)
            node.gain = -sol
            node.K = _sym(H_xx - H_ux.T @ sol)
            node.Huu = H_uu
    tree.stage = "induced"
    return tree


def doob_decompose(tree: LatticeTree) -> LatticeTree:
    """Split each node's children into drift, Brownian and jump parts.

    ``k_inc = K_node - E[K_next]``; ``R_e = mean_s K(s, e) - mean_s K(s, none)``;
    ``L_i = mean_s [K(s, none) s_i] / sqrt(dt)``.  The weighted RMS of what
    ``sum L_i s_i sqrt(dt) + sum R_e dmu_e`` leaves unexplained in
    ``K_next - E[K_next]`` is stored as ``proj_residual``.
    """
    if tree.stage == "built":
        raise ValueError("run backward_induction first")
    spec = tree.spec
    sq = math.sqrt(spec.dt)
    br = tree.branches
    w = np.array([b.prob for b in br])
    k = len(spec.marks)
    signs = np.array([b.signs for b in br], dtype=float).reshape(len(br), spec.d)
    dmu = np.array([b.dmu for b in br]).reshape(len(br), k)
    none_idx = [i for i, b in enumerate(br) if b.jump is None]
    mark_idx = [[i for i, b in enumerate(br) if b.jump == e] for e in range(k)]
    for node in tree.inner_nodes():
        Kc = _child_K(tree, node)
        EK = np.einsum("b,bij->ij", w, Kc)
        K_none = Kc[none_idx]
        K_pre = K_none.mean(axis=0)
        node.k_inc = node.K - EK
        node.K_pre = K_pre
        node.L = np.einsum("si,sjk->ijk", signs[none_idx], K_none) / (len(none_idx) * sq)
        node.R = np.stack([Kc[idx].mean(axis=0) - K_pre for idx in mark_idx]) if k else np.zeros((0,) + K_pre.shape)
        fitted = sq * np.einsum("bi,ijk->bjk", signs, node.L) + np.einsum("be,ejk->bjk", dmu, node.R)
        dev = Kc - EK - fitted
        node.proj_residual = math.sqrt(float(np.einsum("b,bij,bij->", w, dev, dev)))
    tree.stage = "decomposed"
    return tree


def bsrej_residual(tree: LatticeTree, coeffs: CoefficientSet | None = None):
    """``max`` and ``mean`` over nodes of ``|k_inc - G(t, K, L, R) dt| / dt`` (Frobenius)."""
    if tree.stage != "decomposed":
        raise ValueError("run doob_decompose first")
    dt = tree.spec.dt
    vals = []
    for node in tree.inner_nodes():
        G = generator(node.snap, node.K, node.L, node.R)
        node.bsrej = float(np.linalg.norm(node.k_inc - G * dt)) / dt
        vals.append(node.bsrej)
    return max(vals), float(np.mean(vals))


# --------------------------------------------------------------------------
# structure report
# --------------------------------------------------------------------------


def _min_eig(X: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(_sym(X)).min()) if X.size else math.inf


@dataclass
class StructureReport:
    min_scriptN: float
    min_discrete_scriptN: float
    min_K: float
    min_K_plus_R: float
    min_FKRF: float
    sum_L: float
    sum_R: float
    worst_nodes: dict

    @property
    def floors(self) -> dict:
        return {"scriptN": self.min_scriptN, "discrete_scriptN": self.min_discrete_scriptN, "K": self.min_K,
                "K_plus_R": self.min_K_plus_R, "FKRF": self.min_FKRF}

    @property
    def ok(self) -> bool:
        return all(v >= -PSD_TOL for v in self.floors.values()) and math.isfinite(self.sum_L) and math.isfinite(self.sum_R)


def check_structure(tree: LatticeTree) -> StructureReport:
    """Positivity floors and the discrete BMO-type sums.

    ``K + R(e)`` uses the no-jump average of the children (``K_pre``), so it is
    the Brownian-averaged post-jump value and PSD by construction of K.  The
    continuous scriptN uses the node K with the extracted R.
    """
    if tree.stage != "decomposed":
        raise ValueError("run doob_decompose first")
    dt = tree.spec.dt
    floors = {"scriptN": math.inf, "discrete_scriptN": math.inf, "K": math.inf, "K_plus_R": math.inf, "FKRF": math.inf}
    worst = {}
    sum_L = 0.0
    sum_R = 0.0

    def note(name, value, node):
        if value < floors[name]:
            floors[name] = value
            worst[name] = f"step {node.step} node {node.index}"

    for node in tree.nodes():
        note("K", _min_eig(node.K), node)
    for node in tree.inner_nodes():
        s = node.snap
        note("scriptN", _min_eig(script_N(s, node.K, node.R)), node)
        note("discrete_scriptN", _min_eig(node.Huu / dt), node)
        if s.k:
            KR = node.K_pre + node.R
            note("K_plus_R", min(_min_eig(X) for X in KR), node)
            FKRF = np.einsum("e,eji,ejk,ekl->il", s.nu, s.F, KR, s.F)
            note("FKRF", _min_eig(FKRF), node)
            sum_R += node.prob * float(np.einsum("e,eij,eij->", s.nu, node.R, node.R)) * dt
        sum_L += node.prob * float(np.sum(node.L * node.L)) * dt
    return StructureReport(floors["scriptN"], floors["discrete_scriptN"], floors["K"], floors["K_plus_R"],
                           floors["FKRF"], sum_L, sum_R, worst)


# --------------------------------------------------------------------------
# history expansion: submartingale check and forward policy values
# --------------------------------------------------------------------------

TreePolicy = Callable[[int, float, np.ndarray, np.ndarray], np.ndarray]


def optimal_tree_policy(tree: LatticeTree) -> TreePolicy:
    def policy(k, t, node_ids, X):
        G = np.stack([nd.gain for nd in tree.levels[k]])[node_ids]
        return np.einsum("hij,hj->hi", G, X)

    return policy


def zero_tree_policy(tree: LatticeTree) -> TreePolicy:
    m = tree.coeffs.m

    def policy(k, t, node_ids, X):
        return np.zeros((X.shape[0], m))

    return policy


def random_tree_policy(tree: LatticeTree, rng: np.random.Generator, scale: float = 0.5) -> TreePolicy:
    """Optimal gain plus a random per-level matrix plus a random per-history offset.

    The offsets are drawn level by level in history order, so a control only
    depends on the history up to its node (adapted).
    """
    m, n = tree.coeffs.m, tree.coeffs.n
    shifts = [scale * rng.normal(size=(m, n)) for _ in range(tree.spec.Nt)]
    base = optimal_tree_policy(tree)

    def policy(k, t, node_ids, X):
        return base(k, t, node_ids, X) + X @ shifts[k].T + scale * rng.normal(size=(X.shape[0], m))

    return policy


@dataclass
class SubmartingaleReport:
    policy: str
    min_increment: float
    max_abs_increment: float
    n_nodes: int
    expected_cost: float


def _expand(tree: LatticeTree, x0, policy: TreePolicy, label: str, max_histories: int) -> SubmartingaleReport:
    if tree.stage == "built":
        raise ValueError("run backward_induction first")
    size = tree.spec.explicit_size()
    if size > max_histories:
        raise LatticeOverflow(f"history expansion needs {size} nodes > {max_histories}")
    dt = tree.spec.dt
    w = np.array([b.prob for b in tree.branches])
    B = len(w)
    X = np.asarray(x0, dtype=float).reshape(1, -1)
    node_ids = np.zeros(1, dtype=np.int64)
    J = np.zeros(1)
    prob = np.ones(1)
    lo, hi, count = math.inf, 0.0, 0
    for k in range(tree.spec.Nt):
        level = tree.levels[k]
        nxt = tree.levels[k + 1]
        U = np.asarray(policy(k, tree.t(k), node_ids, X), dtype=float)
        mats = [tree.branch_matrices(nd) for nd in level]
        P = np.stack([p for p, _ in mats])[node_ids]  # (H, B, n, n)
        Q = np.stack([q for _, q in mats])[node_ids]
        Qc = np.stack([nd.snap.Q for nd in level])[node_ids]
        Nc = np.stack([nd.snap.N for nd in level])[node_ids]
        Kn = np.stack([nd.K for nd in level])[node_ids]
        child = np.stack([nd.children for nd in level])[node_ids]  # (H, B)
        Kall = np.stack([nd.K for nd in nxt])
        Kc = Kall[child]  # (H, B, n, n)
        Xc = np.einsum("hbij,hj->hbi", P, X) + np.einsum("hbij,hj->hbi", Q, U)
        f = (np.einsum("hi,hij,hj->h", X, Qc, X) + np.einsum("hi,hij,hj->h", U, Nc, U)) * dt
        ahead = np.einsum("b,hbi,hbij,hbj->h", w, Xc, Kc, Xc)
        now = np.einsum("hi,hij,hj->h", X, Kn, X)
        inc = f + ahead - now
        scale = 1.0 + np.abs(now) + np.abs(ahead)
        lo = min(lo, float(np.min(inc / scale)))
        hi = max(hi, float(np.max(np.abs(inc))))
        count += len(inc)
        X = Xc.reshape(-1, X.shape[1])
        node_ids = child.reshape(-1)
        J = np.repeat(J + f, B)
        prob = (prob[:, None] * w[None, :]).reshape(-1)
    M = tree.coeffs.M
    expected = float(np.sum(prob * (J + np.einsum("hi,ij,hj->h", X, M, X))))
    return SubmartingaleReport(label, lo, hi, count, expected)


def submartingale_check(tree: LatticeTree, x0, policies: dict, *, max_histories: int = MAX_NODES) -> list[SubmartingaleReport]:
    """For each policy, the one-step increment of ``J_k = sum f dt + <K X, X>`` at every history node.

    ``min_increment`` is scaled by ``1 + |<K X, X>| + |E<K X', X'>|``; the
    optimal policy gives ``max_abs_increment`` at round-off level.
    """
    return [_expand(tree, x0, pol, label, max_histories) for label, pol in policies.items()]


def policy_value(tree: LatticeTree, x0, policy: TreePolicy | None = None, *, max_histories: int = MAX_NODES) -> float:
    """Expected total cost of a tree policy by forward enumeration of histories."""
    policy = policy or optimal_tree_policy(tree)
    return _expand(tree, x0, policy, "value", max_histories).expected_cost


# --------------------------------------------------------------------------
# brute force
# --------------------------------------------------------------------------


def brute_force_value(tree: LatticeTree, x, u_grid) -> float:
    """Exhaustive minimization over grid-valued, branch-adapted controls.

    ``u_grid`` is a 1-D array of values per control component (the product
    grid is used when m > 1).  Cost grows as ``sum_k G^(k+1) b^k``.
    """
    spec = tree.spec
    m = tree.coeffs.m
    grid1 = np.asarray(u_grid, dtype=float).reshape(-1)
    U = np.array(list(itertools.product(grid1, repeat=m))) if m > 1 else grid1[:, None]
    G = len(U)
    b = len(tree.branches)
    work = sum(G ** (k + 1) * b**k for k in range(spec.Nt))
    if work > BRUTE_FORCE_LIMIT:
        raise LatticeOverflow(f"brute force needs {work} evaluations > {BRUTE_FORCE_LIMIT}")
    dt = spec.dt
    w = np.array([br.prob for br in tree.branches])
    M = tree.coeffs.M

    def value(step, node, X):
        # X: (H, n) states at this node; returns (H,) minimal costs
        if step == spec.Nt:
            return np.einsum("hi,ij,hj->h", X, M, X)
        s = node.snap
        P, Q = tree.branch_matrices(node)
        H = X.shape[0]
        run = (np.einsum("hi,ij,hj->h", X, s.Q, X)[:, None] + np.einsum("gi,ij,gj->g", U, s.N, U)[None, :]) * dt
        total = run.copy()
        for bi in range(b):
            Xc = (X @ P[bi].T)[:, None, :] + (U @ Q[bi].T)[None, :, :]  # (H, G, n)
            child = tree.levels[step + 1][node.children[bi]]
            total += w[bi] * value(step + 1, child, Xc.reshape(H * G, -1)).reshape(H, G)
        return total.min(axis=1)

    return float(value(0, tree.root, np.asarray(x, dtype=float).reshape(1, -1))[0])


def brute_force_tolerance(tree: LatticeTree, step: float) -> float:
    """Upper bound on the grid-induced excess: sum over levels of E[lambda_max(H_uu)] m (h/2)^2."""
    m = tree.coeffs.m
    tot = 0.0
    for lv in tree.levels[:-1]:
        tot += sum(nd.prob * float(np.linalg.eigvalsh(nd.Huu).max()) for nd in lv)
    return tot * m * (0.5 * step) ** 2


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def write_tree_csv(tree: LatticeTree, path, max_rows: int = 200_000) -> Path:
    """One row per node: address, t, vech(K), vech(L_i), vech(R_e), diagnostics."""
    if tree.n_nodes > max_rows:
        raise LatticeOverflow(f"tree has {tree.n_nodes} nodes; export bound is {max_rows}")
    n = tree.coeffs.n
    d = tree.spec.d
    marks = list(tree.coeffs.marks.marks)
    header = ["step", "node", "address", "prob", "t", *vech_labels(n)]
    for i in range(d):
        header += vech_labels(n, f"L{i + 1}")
    for e in marks:
        header += vech_labels(n, f"R[{e}]")
    header += [f"gain_{i + 1}_{j + 1}" for i in range(tree.coeffs.m) for j in range(n)]
    header += ["proj_residual", "bsrej_residual"]

    def fmt(v):
        return "" if v is None else repr(float(v))

    path = Path(path)
    times = tree.spec.times()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for node in tree.nodes():
            row = [node.step, node.index, tree.address_label(node), repr(float(node.prob)), repr(float(times[node.step]))]
            row += [repr(v) for v in vech(node.K)]
            inner = node.L is not None
            for i in range(d):
                row += [repr(v) for v in vech(node.L[i])] if inner else [""] * (n * (n + 1) // 2)
            for e in range(len(marks)):
                row += [repr(v) for v in vech(node.R[e])] if inner else [""] * (n * (n + 1) // 2)
            row += [repr(float(v)) for v in node.gain.ravel()] if node.gain is not None else [""] * (tree.coeffs.m * n)
            row += [fmt(node.proj_residual), fmt(node.bsrej)]
            w.writerow(row)
    return path


def solve_lattice(coeffs: CoefficientSet, Nt: int, *, collapse: bool = True) -> LatticeTree:
    """Build, induce and decompose in one call."""
    spec = LatticeSpec(Nt, coeffs.T, coeffs.d, coeffs.marks)
    return doob_decompose(backward_induction(build_tree(spec, coeffs, collapse=collapse)))
