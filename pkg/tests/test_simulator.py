import math
import warnings

import numpy as np
import pytest

from riccati_jump.errors import AssumptionError, NonFiniteState
from riccati_jump.model import build_coefficients
from riccati_jump.simulator import (
    BLOCK,
    CostEstimate,
    SimConfig,
    evaluate_cost,
    linear_policy,
    moment_oracle,
    simulate_paths,
    write_paths_csv,
    zero_policy,
)

from helpers import jump_control, jump_lyapunov, random_coefficients, tanh_testbed


def geometric(a=0.1, c=0.2, e=0.5, nu=1.0, T=1.0):
    return build_coefficients(
        A=[[a]], B=[[0.0]], C=[[[c]]], D=[[[0.0]]], N=[[1.0]],
        marks={"e": nu}, E={"e": [[e]]}, F={"e": [[0.0]]}, T=T,
    )


def zero_dynamics(Q=1.0):
    return build_coefficients(n=1, m=1, d=1, Q=[[Q]], N=[[1.0]], marks={"e": 1.0})


def within(est_mean, se, target, k=3.0):
    return abs(est_mean - target) <= k * se


# ---------------------------------------------------------------- moment oracle


def test_oracle_trivial():
    assert moment_oracle(zero_dynamics(), 1.0, x0=2.0) == (2.0, 4.0)


def test_oracle_geometric_closed_form():
    m1, m2 = moment_oracle(geometric(), 1.0)
    assert m1 == pytest.approx(math.exp(0.1), rel=1e-11)
    assert m2 == pytest.approx(math.exp(0.2 + 0.04 + 0.25), rel=1e-11)


def test_oracle_pure_jump_matches_lyapunov():
    _, m2 = moment_oracle(jump_lyapunov(), 1.0, x0=3.0)
    assert m2 == pytest.approx(9.0 * math.e, rel=1e-11)


def test_oracle_rejects_vectors():
    with pytest.raises(ValueError, match="n = m = 1"):
        moment_oracle(random_coefficients(np.random.default_rng(0), n=2, m=1), 1.0)


def test_oracle_with_feedback_matches_closed_form():
    # u = g x turns the geometric drift into a + b g and the jump size into e + f g
    c = jump_control()
    g = -0.4
    alpha, gam, eps = 0.1 + g, 0.2, 0.5 + 0.3 * g
    m1, m2 = moment_oracle(c, 1.0, gain=g)
    assert m1 == pytest.approx(math.exp(alpha), rel=1e-10)
    assert m2 == pytest.approx(math.exp(2 * alpha + gam**2 + eps**2), rel=1e-10)


# ---------------------------------------------------------------- simulate_paths


def test_zero_dynamics_constant_state():
    b = simulate_paths(zero_dynamics(), zero_policy(1), SimConfig(dt=0.01, n_paths=50, seed=1, x0=(0.7,), record=True))
    assert np.all(b.X_T == 0.7)
    assert np.all(b.record["X"] == 0.7)
    assert b.jump_counts.sum() > 0


def test_geometric_moments():
    b = simulate_paths(geometric(), zero_policy(1), SimConfig(dt=1e-2, n_paths=40000, seed=5))
    m1, m2 = moment_oracle(geometric(), 1.0)
    x = b.X_T[:, 0]
    assert within(x.mean(), x.std(ddof=1) / math.sqrt(len(x)), m1)
    assert within((x**2).mean(), (x**2).std(ddof=1) / math.sqrt(len(x)), m2)


def test_seed_determinism_and_workers():
    c = random_coefficients(np.random.default_rng(4), n=2, m=1, d=2, k=2)
    pol = linear_policy(np.array([[0.3, -0.2]]))
    cfg = SimConfig(dt=0.05, n_paths=BLOCK + 123, seed=42, x0=(1.0, -1.0))
    a = simulate_paths(c, pol, cfg)
    b = simulate_paths(c, pol, cfg)
    w = simulate_paths(c, pol, SimConfig(**{**cfg.__dict__, "workers": 3}))
    for other in (b, w):
        assert np.array_equal(a.X_T, other.X_T)
        assert np.array_equal(a.running, other.running)
        assert np.array_equal(a.jump_times, other.jump_times)
    d = simulate_paths(c, pol, SimConfig(**{**cfg.__dict__, "seed": 43}))
    assert not np.array_equal(a.X_T, d.X_T)


def test_martingale_check():
    c = geometric(a=0.0)
    b = simulate_paths(c, zero_policy(1), SimConfig(dt=1e-2, n_paths=40000, seed=9, x0=(2.0,)))
    x = b.X_T[:, 0]
    assert within(x.mean(), x.std(ddof=1) / math.sqrt(len(x)), 2.0, k=4.0)


def test_jump_count_law():
    c = build_coefficients(B=[[0.0]], N=[[1.0]], marks={"a": 0.8, "b": 1.7}, T=2.0)
    cfg = SimConfig(dt=0.1, n_paths=50000, seed=11, t0=0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = simulate_paths(c, zero_policy(1), cfg)
    lam = 2.5 * 1.5
    counts = b.jump_counts
    n = len(counts)
    assert within(counts.mean(), math.sqrt(lam / n), lam, k=4.0)
    assert within(counts.var(ddof=1), math.sqrt((lam + 2 * lam**2) / n), lam, k=4.0)
    share_a = np.mean(b.jump_marks == 0)
    p = 0.8 / 2.5
    assert within(share_a, math.sqrt(p * (1 - p) / len(b.jump_marks)), p, k=4.0)
    for p_ in range(0, n, 997):
        ts, _ = b.jumps_of(p_)
        assert np.all(np.diff(ts) > 0) and np.all((ts >= 0.5) & (ts < 2.0))


def test_weak_convergence():
    c = geometric()
    m1, _ = moment_oracle(c, 1.0)
    errs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for dt in (0.25, 0.125):
            x = simulate_paths(c, zero_policy(1), SimConfig(dt=dt, n_paths=200000, seed=3)).X_T[:, 0]
            errs.append(abs(x.mean() - m1))
    assert errs[1] < errs[0]


def test_jump_identity_exact():
    c = jump_control()
    pol = linear_policy([[-0.6]], [0.1])
    b = simulate_paths(c, pol, SimConfig(dt=0.02, n_paths=200, seed=2, record=True))
    r = b.record
    post = np.nonzero(r["jump_flag"] == 1)[0]
    assert post.size > 0
    s = c.at(0.0)
    for i in post:
        pre = i - 1
        assert r["path_id"][pre] == r["path_id"][i] and r["t"][pre] == r["t"][i]
        e = r["mark"][i]
        Xm, u = r["X"][pre], r["u"][i]
        assert np.array_equal(r["u"][pre], u)
        assert r["X"][i] - Xm == pytest.approx(s.E[e] @ Xm + s.F[e] @ u, abs=1e-15)


def test_record_times_increase_and_finite():
    c = random_coefficients(np.random.default_rng(8), n=2, m=2, d=1, k=1)
    b = simulate_paths(c, zero_policy(2), SimConfig(dt=0.1, n_paths=30, seed=0, x0=(1.0, 0.5), record=True))
    r = b.record
    for p in range(30):
        t = r["t"][r["path_id"] == p]
        assert np.all(np.diff(t) >= 0)
        assert t[0] == 0.0 and t[-1] == 1.0
    assert np.all(np.isfinite(r["X"]))


def test_policy_dimension_checked():
    with pytest.raises(ValueError, match="policy returned shape"):
        simulate_paths(tanh_testbed(), zero_policy(2), SimConfig(dt=0.1, n_paths=3))


def test_blow_up_detected():
    c = build_coefficients(A=[[3000.0]], N=[[1.0]])
    with pytest.raises(NonFiniteState):
        simulate_paths(c, zero_policy(1), SimConfig(dt=0.001, n_paths=4))


def test_coarse_compensator_warns():
    with pytest.warns(UserWarning, match="compensator"):
        simulate_paths(jump_control(), zero_policy(1), SimConfig(dt=0.5, n_paths=2))


def test_rejects_invalid_assumptions():
    with pytest.raises(AssumptionError, match="Assumption 1"):
        simulate_paths(build_coefficients(Q=[[-1.0]], N=[[1.0]]), zero_policy(1), SimConfig(dt=0.1, n_paths=2))


def test_antithetic_pairs_mirror():
    c = geometric()
    n = BLOCK + 1000
    b = simulate_paths(c, zero_policy(1), SimConfig(dt=0.05, n_paths=n, seed=1, antithetic=True))
    pairs = b.pairs
    assert pairs.shape == (n // 2, 2)
    assert np.array_equal(np.sort(pairs.ravel()), np.arange(n))
    assert np.array_equal(b.jump_counts[pairs[:, 0]], b.jump_counts[pairs[:, 1]])
    est = CostEstimate.from_samples(b.X_T[:, 0], pairs)
    assert est.n_paths == n and est.std_error > 0
    m1, _ = moment_oracle(c, 1.0)
    assert within(est.mean, est.std_error, m1, k=4.0)


# ---------------------------------------------------------------- evaluate_cost


def test_cost_zero_when_Q_M_zero():
    c = build_coefficients(A=[[0.3]], C=[[[0.5]]], N=[[4.0]], marks={"e": 1.0}, E={"e": [[0.2]]})
    est = evaluate_cost(simulate_paths(c, zero_policy(1), SimConfig(dt=0.05, n_paths=100, seed=3)), c)
    assert est.mean == 0.0 and est.std_error == 0.0


def test_cost_zero_dynamics_unit():
    c = zero_dynamics()
    b = simulate_paths(c, zero_policy(1), SimConfig(dt=0.01, n_paths=20, seed=3))
    assert np.all(np.abs(b.cost - 1.0) <= 1e-12)


def test_cost_tanh_uncontrolled():
    c = tanh_testbed()
    est = evaluate_cost(simulate_paths(c, zero_policy(1), SimConfig(dt=1e-3, n_paths=100, seed=0)), c)
    # the state never moves, so the estimate is deterministic (std error 0)
    assert est.std_error == 0.0
    assert est.mean == pytest.approx(1.0, abs=1e-12)


def test_cost_estimate_fields():
    v = np.array([1.0, 2.0, 3.0, 6.0])
    est = CostEstimate.from_samples(v)
    assert est.mean == 3.0 and est.n_paths == 4
    assert est.std_error == pytest.approx(np.std(v, ddof=1) / 2.0)


def test_aux_integrand_trapezoid():
    # integrate t -> t along the path: exactly 1/2 under the trapezoid rule
    c = zero_dynamics()
    b = simulate_paths(c, zero_policy(1), SimConfig(dt=0.1, n_paths=7, seed=1),
                       aux={"t": lambda t, X, U: np.broadcast_to(np.asarray(t, float), (X.shape[0],))})
    assert np.allclose(b.aux["t"], 0.5, atol=1e-14)


def test_paths_csv(tmp_path):
    c = jump_control()
    b = simulate_paths(c, zero_policy(1), SimConfig(dt=0.25, n_paths=5, seed=2, record=True))
    p = write_paths_csv(b, tmp_path / "paths.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "path_id,t,X_1,u_1,jump_flag,mark_id"
    assert len(lines) - 1 == len(b.record["t"])
    b2 = simulate_paths(c, zero_policy(1), SimConfig(dt=0.25, n_paths=5, seed=2, record=True))
    assert write_paths_csv(b2, tmp_path / "again.csv").read_bytes() == p.read_bytes()
