import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riccati_jump.errors import DimensionError, NonPositiveScriptN
from riccati_jump.model import (
    MarkMeasure,
    Polynomial,
    build_coefficients,
    eval_G,
    eval_script_M,
    eval_script_N,
    hamiltonian,
    pointwise_minimizer,
    running_cost,
    script_N,
    validate_assumptions,
)

from helpers import random_coefficients, random_psd, tanh_testbed


def scalar(**kw):
    kw.setdefault("N", [[1.0]])
    return build_coefficients(**kw)


# ---------------------------------------------------------------- scriptN


def test_script_N_no_quadratic_terms():
    c = scalar(D=[[[0.0]]])
    assert eval_script_N(c, 0.0, [[5.0]])[0, 0] == 1.0


def test_script_N_diffusion_control():
    c = scalar(D=[[[2.0]]])
    assert eval_script_N(c, 0.0, [[1.0]])[0, 0] == pytest.approx(5.0)


def test_script_N_jump_term():
    c = scalar(marks={"e": 2.0}, F={"e": [[1.0]]})
    assert eval_script_N(c, 0.0, [[1.0]], {"e": [[0.5]]})[0, 0] == pytest.approx(4.0)


# ---------------------------------------------------------------- scriptM


def test_script_M_zero_without_control_coupling():
    rng = np.random.default_rng(0)
    c = build_coefficients(A=rng.normal(size=(2, 2)), C=[rng.normal(size=(2, 2))], D=[np.zeros((2, 1))],
                           N=[[1.0]], B=np.zeros((2, 1)), marks={"a": 1.0}, E={"a": np.eye(2)})
    K = random_psd(rng, 2)
    M = eval_script_M(c, 0.0, K, [random_psd(rng, 2)], {"a": random_psd(rng, 2)})
    assert M.shape == (2, 1)
    assert np.all(M == 0.0)


def test_script_M_only_KB():
    c = scalar(B=[[1.0]])
    assert eval_script_M(c, 0.0, [[2.0]])[0, 0] == 2.0


def test_script_M_all_terms():
    c = scalar(B=[[0.0]], C=[[[1.0]]], D=[[[1.0]]], marks={"e": 1.0}, E={"e": [[1.0]]}, F={"e": [[1.0]]})
    assert eval_script_M(c, 0.0, [[1.0]], [[[1.0]]], {"e": [[1.0]]})[0, 0] == pytest.approx(5.0)


# ---------------------------------------------------------------- G


def test_G_zero_propagation():
    rng = np.random.default_rng(1)
    for _ in range(20):
        c = random_coefficients(rng)
        c = c.replace(Q=lambda t, n=c.n: np.zeros((n, n)))
        assert np.all(eval_G(c, 0.3, np.zeros((c.n, c.n))) == 0.0)


@pytest.mark.parametrize("k", [0.0, 0.3, 0.9, 2.0])
def test_G_tanh_testbed(k):
    assert eval_G(tanh_testbed(), 0.0, [[k]])[0, 0] == pytest.approx(1.0 - k * k, abs=1e-15)


@pytest.mark.parametrize("k", [0.0, 0.7, 3.0])
def test_G_jump_lyapunov(k):
    c = scalar(marks={"e": 1.0}, E={"e": [[1.0]]})
    assert eval_G(c, 0.0, [[k]])[0, 0] == pytest.approx(k)


def test_G_raises_on_singular_script_N():
    c = build_coefficients(N=[[1.0]], B=[[1.0]], delta=1.0).replace(N=lambda t: np.zeros((1, 1)))
    with pytest.raises(NonPositiveScriptN):
        eval_G(c, 0.0, [[1.0]])


def test_dimension_error_names_symbol():
    c = tanh_testbed()
    with pytest.raises(DimensionError, match="K"):
        eval_G(c, 0.0, np.eye(2))
    with pytest.raises(DimensionError, match="L"):
        eval_G(c, 0.0, [[1.0]], L=np.zeros((2, 1, 1)))


# ---------------------------------------------------------------- minimizer


def test_minimizer_at_origin():
    c = random_coefficients(np.random.default_rng(2), n=2, m=2)
    u, v = pointwise_minimizer(c, 0.0, np.zeros(2), np.eye(2))
    assert np.all(u == 0.0) and v == 0.0


@pytest.mark.parametrize("k", [0.2, 0.76])
def test_minimizer_tanh_testbed(k):
    u, v = pointwise_minimizer(tanh_testbed(), 0.0, [1.0], [[k]])
    assert u[0] == pytest.approx(-k)
    assert v == pytest.approx(1.0 - k * k)


def test_minimizer_against_grid_search():
    rng = np.random.default_rng(3)
    grid = np.arange(-5.0, 5.0 + 1e-12, 1e-2)
    for _ in range(5):
        c = random_coefficients(rng, n=1, m=1, d=1, k=1)
        K = random_psd(rng, 1)
        R = {"e0": np.array([[rng.uniform(-0.5, 0.5) * K[0, 0]]])}
        L = [np.array([[rng.normal()]])]
        u, best = pointwise_minimizer(c, 0.0, [1.0], K, L, R)
        vals = [hamiltonian(c, 0.0, [1.0], [g], K, L, R) for g in grid]
        assert best <= min(vals) + 1e-12
        # the grid can only miss the optimum by half a step
        assert min(vals) - best <= eval_script_N(c, 0.0, K, R)[0, 0] * 0.25e-4 + 1e-12


def test_minimizer_value_equals_xGx():
    rng = np.random.default_rng(4)
    for _ in range(50):
        c = random_coefficients(rng)
        K = random_psd(rng, c.n)
        L = [0.1 * random_psd(rng, c.n) for _ in range(c.d)]
        R = {e: 0.1 * random_psd(rng, c.n) for e in c.marks.marks}
        x = rng.normal(size=c.n)
        _, val = pointwise_minimizer(c, 0.0, x, K, L, R)
        G = eval_G(c, 0.0, K, L, R)
        assert val == pytest.approx(x @ G @ x, rel=1e-9, abs=1e-10)


def test_minimizer_beats_random_controls():
    rng = np.random.default_rng(5)
    for i in range(1000):
        n = 1 if i % 2 == 0 else 2
        c = random_coefficients(rng, n=n, m=n)
        s = c.at(0.0)
        K = random_psd(rng, n)
        L = np.array([0.2 * random_psd(rng, n) for _ in range(c.d)]).reshape(c.d, n, n)
        R = np.array([0.2 * random_psd(rng, n) for _ in c.marks.marks]).reshape(len(c.marks), n, n)
        x = rng.normal(size=n)
        _, best = pointwise_minimizer(s, 0.0, x, K, L, R)
        for v in rng.normal(scale=3.0, size=(200, n)):
            assert best <= hamiltonian(s, 0.0, x, v, K, L, R) + 1e-10


# ---------------------------------------------------------------- symmetry / monotonicity


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_operators_return_symmetric(seed):
    rng = np.random.default_rng(seed)
    c = random_coefficients(rng)
    K = random_psd(rng, c.n)
    L = [0.3 * random_psd(rng, c.n) for _ in range(c.d)]
    R = {e: 0.3 * random_psd(rng, c.n) for e in c.marks.marks}
    s = c.at(0.0)
    from riccati_jump.model import _as_R

    raw = script_N(s, K, _as_R(R, s, c.marks.marks))
    assert np.abs(raw - raw.T).max() <= 1e-12 * (1 + np.abs(raw).max())
    for X in (eval_script_N(c, 0.0, K, R), eval_G(c, 0.0, K, L, R)):
        assert np.array_equal(X, X.T)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_script_N_monotone_in_K(seed):
    rng = np.random.default_rng(seed)
    c = random_coefficients(rng)
    K1 = random_psd(rng, c.n)
    K2 = K1 + random_psd(rng, c.n)
    R = {e: 0.1 * random_psd(rng, c.n) for e in c.marks.marks}
    diff = eval_script_N(c, 0.0, K2, R) - eval_script_N(c, 0.0, K1, R)
    assert np.linalg.eigvalsh(diff).min() >= -1e-12


# ---------------------------------------------------------------- running cost


def test_running_cost_values():
    c = tanh_testbed()
    assert running_cost(c, 0.0, [0.0], [0.0]) == 0.0
    assert running_cost(c, 0.0, [2.0], [3.0]) == 13.0
    c2 = build_coefficients(N=0.3 * np.eye(2), Q=np.zeros((2, 2)), B=np.zeros((2, 2)))
    u = np.array([1.5, -2.0])
    assert running_cost(c2, 0.0, [4.0, 5.0], u) == pytest.approx(0.3 * u @ u)


# ---------------------------------------------------------------- validation


def test_validate_tanh_passes():
    assert validate_assumptions(tanh_testbed()).ok


def test_validate_flags_N_below_delta():
    c = build_coefficients(N=[[0.0]], delta=0.1)
    rep = validate_assumptions(c)
    assert not rep.ok
    assert any("N below delta" in m for m in rep.messages())


def test_validate_flags_Q_not_psd():
    c = build_coefficients(Q=[[-1.0]], N=[[1.0]])
    assert any("Q not PSD" in m for m in validate_assumptions(c).messages())


def test_validate_flags_bound_and_time_dependence():
    c = build_coefficients(N=Polynomial([[[1.0]], [[-2.0]]]), delta=0.5, T=1.0)
    msgs = validate_assumptions(c, np.linspace(0, 1, 5)).messages()
    assert any("N below delta" in m for m in msgs)
    c = build_coefficients(A=[[10.0]], N=[[1.0]], bound=5.0)
    assert any("bound exceeded" in m for m in validate_assumptions(c).messages())


def test_mark_measure_invariants():
    mm = MarkMeasure.from_mapping({"a": 0.25, "b": 0.5})
    assert mm.total == 0.75
    with pytest.raises(ValueError, match="'a'"):
        MarkMeasure.from_mapping({"a": -1.0})
    with pytest.raises(ValueError, match="duplicate"):
        MarkMeasure(("a", "a"), (1.0, 1.0))
