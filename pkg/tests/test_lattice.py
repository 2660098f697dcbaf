import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riccati_jump.control import synthesize_feedback
from riccati_jump.errors import AssumptionError, DiscreteScriptNError
from riccati_jump.functionals import BrownianLevelSine, FirstBrownianSign, HistoryFunctional, JumpCountGeometric
from riccati_jump.lattice import (
    LatticeOverflow,
    LatticeSpec,
    backward_induction,
    brute_force_tolerance,
    brute_force_value,
    bsrej_residual,
    build_tree,
    check_structure,
    doob_decompose,
    optimal_tree_policy,
    policy_value,
    random_tree_policy,
    solve_lattice,
    submartingale_check,
    write_tree_csv,
    zero_tree_policy,
)
from riccati_jump.model import MarkMeasure, build_coefficients
from riccati_jump.riccati import solve_riccati_ide

from helpers import jump_control, jump_lyapunov, random_coefficients, tanh_testbed


def one_step():
    return build_coefficients(A=[[0.0]], B=[[1.0]], Q=[[1.0]], N=[[1.0]], M=[[1.0]], T=1.0, d=0)


def first_sign_Q(d=1, marks=None, T=1.0):
    return build_coefficients(
        A=[[0.1]], B=[[1.0]], C=[[[0.2]]] * d, D=[[[0.1]]] * d, N=[[1.0]], M=[[1.0]],
        Q=FirstBrownianSign([[1.0]], [[2.0]]), marks=marks or {}, T=T, n=1, m=1, d=d,
    )


def sine_Q(T=1.0):
    return build_coefficients(
        A=[[0.1]], B=[[1.0]], C=[[[0.3]]], D=[[[0.4]]], Q=BrownianLevelSine([[1.0]], [[0.5]]),
        N=[[1.0]], M=[[1.0]], marks={"e": 0.5}, E={"e": [[0.3]]}, F={"e": [[0.2]]}, T=T, n=1, m=1, d=1,
    )


def zero_cost():
    c = jump_control()
    return c.replace(Q=lambda t: np.zeros((1, 1)), M=np.zeros((1, 1)))


# ---------------------------------------------------------------- tree construction


def test_branch_probabilities_sum_to_one():
    spec = LatticeSpec(7, 1.0, 2, MarkMeasure.from_mapping({"a": 0.3, "b": 1.1}))
    br = spec.branches()
    assert len(br) == 4 * 3
    assert math.fsum(b.prob for b in br) == 1.0


def test_jump_load_limits():
    with pytest.raises(ValueError, match=">= 1"):
        LatticeSpec(1, 1.0, 0, MarkMeasure.from_mapping({"e": 1.0})).check()
    with pytest.warns(UserWarning, match="coarse"):
        LatticeSpec(4, 1.0, 0, MarkMeasure.from_mapping({"e": 1.0})).check()


def test_node_counts_explicit():
    c = build_coefficients(B=[[1.0]], C=[[[0.1]]], N=[[1.0]], M=[[1.0]], marks={"e": 0.5}, T=1.0)
    t = build_tree(LatticeSpec(1, 1.0, 1, c.marks), c, collapse=False)
    assert t.n_nodes == 5
    c2 = build_coefficients(B=[[1.0]], C=[[[0.1]]], N=[[1.0]], M=[[1.0]], T=1.0)
    t2 = build_tree(LatticeSpec(2, 1.0, 1), c2, collapse=False)
    assert [len(lv) for lv in t2.levels] == [1, 2, 4] and t2.n_nodes == 7


def test_deterministic_collapses_to_chain():
    c = jump_control()
    t = build_tree(LatticeSpec(30, 1.0, 1, c.marks), c)
    assert all(len(lv) == 1 for lv in t.levels)
    assert t.levels[-1][0].prob == pytest.approx(1.0, abs=1e-14)


def test_path_functional_distinct_Q():
    c = first_sign_Q()
    t = build_tree(LatticeSpec(2, 1.0, 1), c, collapse=False)
    qs = sorted(float(nd.snap.Q[0, 0]) for nd in t.levels[1])
    assert qs == [1.0, 2.0]


def test_overflow_guard():
    c = random_coefficients(np.random.default_rng(0), n=1, m=1, d=2, k=2)
    with pytest.raises(LatticeOverflow):
        build_tree(LatticeSpec(12, 1.0, 2, c.marks), c, collapse=False)


def test_invalid_functional_output():
    c = build_coefficients(B=[[1.0]], C=[[[0.0]]], N=[[1.0]], n=1, m=1, d=1,
                           Q=HistoryFunctional(lambda t, h: np.eye(2), example=np.eye(1)))
    with pytest.raises(ValueError, match="Q"):
        build_tree(LatticeSpec(2, 1.0, 1), c)


def test_node_assumption_violation_names_node():
    c = build_coefficients(B=[[1.0]], C=[[[0.0]]], N=[[1.0]], n=1, m=1, d=1,
                           Q=FirstBrownianSign([[1.0]], [[-1.0]]))
    with pytest.raises(AssumptionError, match="Q not PSD.*node -"):
        build_tree(LatticeSpec(2, 1.0, 1), c)


# ---------------------------------------------------------------- backward induction


def test_one_step_closed_form():
    t = solve_lattice(one_step(), 1)
    assert t.root.K[0, 0] == pytest.approx(1.5, abs=1e-14)
    assert t.root.gain[0, 0] == pytest.approx(-0.5, abs=1e-14)


def test_zero_cost_gives_zero_tree():
    t = solve_lattice(zero_cost(), 10)
    for nd in t.nodes():
        assert np.all(nd.K == 0.0)
        if nd.gain is not None:
            assert np.all(nd.gain == 0.0)
    assert bsrej_residual(t) == (0.0, 0.0)


def test_collapsed_equals_explicit_bitwise():
    for c, spec in ((first_sign_Q(marks={"e": 0.7}), None), (sine_Q(), None)):
        spec = LatticeSpec(4, 1.0, 1, c.marks)
        a = doob_decompose(backward_induction(build_tree(spec, c, collapse=True)))
        b = doob_decompose(backward_induction(build_tree(spec, c, collapse=False)))
        index = {(nd.step, nd.state): nd for nd in a.nodes()}
        assert b.n_nodes > a.n_nodes
        for nd in b.nodes():
            m = index[(nd.step, nd.state)]
            assert np.array_equal(nd.K, m.K)
            if nd.L is not None:
                assert np.array_equal(nd.L, m.L) and np.array_equal(nd.R, m.R)


def test_discrete_hessian_failure_names_node():
    c = one_step().replace(N=lambda t: np.array([[-5.0]]))
    spec = LatticeSpec(1, 1.0, 0)
    tree = build_tree(spec, c.replace(N=lambda t: np.array([[1.0]])))
    tree.root.snap = c.at(0.0)
    with pytest.raises(DiscreteScriptNError, match="root"):
        backward_induction(tree)


@pytest.mark.parametrize("make", [tanh_testbed, jump_control])
def test_root_converges_to_riccati(make):
    c = make()
    K_ref = solve_riccati_ide(c, 1000).K[0, 0, 0]
    e1 = abs(solve_lattice(c, 50).root.K[0, 0] - K_ref)
    e2 = abs(solve_lattice(c, 100).root.K[0, 0] - K_ref)
    assert 1.6 <= e1 / e2 <= 2.5


def test_jump_lyapunov_lattice_closed_form():
    Nt = 40
    dt = 1.0 / Nt
    t = solve_lattice(jump_lyapunov(), Nt)
    assert t.root.K[0, 0] == pytest.approx((1 + dt - dt**2) ** Nt, rel=1e-12)


# ---------------------------------------------------------------- brute force


def test_brute_force_one_step():
    t = solve_lattice(one_step(), 1)
    v = brute_force_value(t, [1.0], np.round(np.arange(-2000, 2001) * 1e-3, 12))
    assert abs(v - 1.5) <= 1e-6


def test_brute_force_zero_cost():
    t = solve_lattice(zero_cost(), 2)
    assert brute_force_value(t, [1.0], np.linspace(-1, 1, 11)) == 0.0


def test_brute_force_two_step_random_Q():
    c = first_sign_Q()
    t = solve_lattice(c, 2)
    h = 1e-2
    v = brute_force_value(t, [1.0], np.arange(-200, 201) * h)
    dp = float(t.root.K[0, 0])
    assert dp - 1e-12 <= v <= dp + brute_force_tolerance(t, h)


def test_brute_force_two_step_with_jumps():
    rng = np.random.default_rng(3)
    c = random_coefficients(rng, n=1, m=1, d=1, k=1, T=2.0)
    t = solve_lattice(c, 2)
    h = 0.02
    v = brute_force_value(t, [1.0], np.arange(-150, 151) * h)
    dp = float(t.root.K[0, 0])
    assert dp - 1e-12 <= v <= dp + brute_force_tolerance(t, h)


def test_brute_force_overflow():
    t = solve_lattice(first_sign_Q(), 3)
    with pytest.raises(LatticeOverflow):
        brute_force_value(t, [1.0], np.linspace(-2, 2, 1001))


# ---------------------------------------------------------------- Doob decomposition


@pytest.mark.parametrize("make", [tanh_testbed, jump_lyapunov, jump_control])
def test_deterministic_martingale_parts_vanish(make):
    t = solve_lattice(make(), 25)
    for nd in t.inner_nodes():
        assert np.abs(nd.L).max(initial=0.0) <= 1e-12
        assert np.abs(nd.R).max(initial=0.0) <= 1e-12


def test_L_first_sign_two_node_arithmetic():
    c = first_sign_Q()
    t = solve_lattice(c, 3)
    dt = t.spec.dt
    up = t.levels[1][t.root.children[0]]
    down = t.levels[1][t.root.children[1]]
    assert t.branches[0].signs == (1,) and t.branches[1].signs == (-1,)
    expected = (up.K - down.K) / (2 * math.sqrt(dt))
    assert t.root.L[0] == pytest.approx(expected, abs=1e-14)
    assert abs(t.root.L[0, 0, 0]) > 0


def test_jump_identity_exact_without_brownian():
    c = build_coefficients(A=[[0.2]], B=[[1.0]], N=[[1.0]], M=[[1.0]], n=1, m=1, d=0,
                           Q=JumpCountGeometric([[1.0]], [[1.0]], 0.5), marks={"a": 0.6, "b": 1.3},
                           E={"a": [[0.4]], "b": [[-0.3]]}, F={"a": [[0.2]], "b": [[0.5]]})
    t = solve_lattice(c, 6)
    for nd in t.inner_nodes():
        nxt = t.levels[nd.step + 1]
        K_none = nxt[nd.children[0]].K
        for e in range(2):
            K_e = nxt[nd.children[1 + e]].K
            assert np.abs(K_e - K_none - nd.R[e]).max() <= 1e-12
        assert nd.proj_residual <= 1e-12


def test_residual_ratio_band():
    for c in (tanh_testbed(), jump_lyapunov()):
        r1 = bsrej_residual(solve_lattice(c, 100))[0]
        r2 = bsrej_residual(solve_lattice(c, 200))[0]
        assert 1.5 <= r1 / r2 <= 3.0


@pytest.mark.slow
def test_residual_ratio_random_coefficients():
    c = sine_Q()
    r1 = bsrej_residual(solve_lattice(c, 50))[0]
    r2 = bsrej_residual(solve_lattice(c, 100))[0]
    assert 1.5 <= r1 / r2 <= 3.0


# ---------------------------------------------------------------- structure


def test_structure_random_Q():
    rep = check_structure(solve_lattice(first_sign_Q(marks={"e": 0.5}), 12))
    assert rep.ok
    assert rep.sum_L > 0 and math.isfinite(rep.sum_R)


def test_structure_adversarial():
    c = build_coefficients(A=[[0.3]], B=[[1.0]], C=[[[0.2]]], D=[[[0.5]]], Q=[[1.0]], N=[[0.1]], M=[[2.0]],
                           marks={"e": 2.0}, E={"e": [[-0.8]]}, F={"e": [[3.0]]}, delta=0.1)
    rep = check_structure(solve_lattice(c, 40))
    assert rep.ok
    assert rep.min_scriptN >= 0.0


def test_structure_deterministic_K_plus_R_is_K():
    t = solve_lattice(jump_control(), 20)
    for nd in t.inner_nodes():
        assert np.abs(nd.K_pre + nd.R[0] - nd.K_pre).max() <= 1e-12


# ---------------------------------------------------------------- DPP checks


def test_martingale_under_optimal_policy():
    c = first_sign_Q(marks={"e": 0.5})
    t = solve_lattice(c, 5)
    rep = submartingale_check(t, [1.0], {"optimal": optimal_tree_policy(t)})[0]
    assert rep.max_abs_increment <= 1e-10
    assert rep.expected_cost == pytest.approx(float(t.root.K[0, 0]), abs=1e-10)


def test_zero_policy_strict_submartingale():
    # M > 0 keeps the optimal gain nonzero at every step, so u = 0 is strictly worse everywhere
    t = solve_lattice(jump_control(), 6)
    rep = submartingale_check(t, [1.0], {"zero": zero_tree_policy(t)})[0]
    assert rep.min_increment > 0.0


def test_random_policies_submartingale():
    c = sine_Q()
    t = solve_lattice(c, 4)
    rng = np.random.default_rng(17)
    pols = {f"r{i}": random_tree_policy(t, rng) for i in range(20)}
    for rep in submartingale_check(t, [1.0], pols):
        assert rep.min_increment >= -1e-10
        assert rep.expected_cost >= float(t.root.K[0, 0]) - 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2.0, 3.0]))
def test_quadratic_form_purity(seed, alpha):
    rng = np.random.default_rng(seed)
    c = random_coefficients(rng, n=2, m=1, d=1, k=1)
    t = solve_lattice(c, 3)
    x = rng.normal(size=2)
    v = policy_value(t, x)
    assert policy_value(t, -x) == pytest.approx(v, abs=1e-10)
    assert policy_value(t, alpha * x) == pytest.approx(alpha**2 * v, rel=1e-10, abs=1e-10)
    assert v == pytest.approx(x @ t.root.K @ x, rel=1e-10, abs=1e-10)


# ---------------------------------------------------------------- export / knots


def test_tree_csv(tmp_path):
    c = first_sign_Q(marks={"e": 0.5})
    t = solve_lattice(c, 3)
    bsrej_residual(t)
    p = write_tree_csv(t, tmp_path / "tree.csv")
    lines = p.read_text().splitlines()
    assert lines[0].startswith("step,node,address,prob,t,K_1_1,L1_1_1,R[e]_1_1,gain_1_1")
    assert len(lines) == t.n_nodes + 1
    assert lines[1].split(",")[2] == "root"


def test_knots_feed_control():
    c = jump_control()
    t = solve_lattice(c, 100)
    law = synthesize_feedback(t.knots(), c)
    ref = synthesize_feedback(solve_riccati_ide(c, 1000), c)
    assert law.gain(0.0)[0, 0] == pytest.approx(ref.gain(0.0)[0, 0], abs=0.05)
