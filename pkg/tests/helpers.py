"""Shared builders for test scenarios."""

from __future__ import annotations

import numpy as np

from riccati_jump.model import build_coefficients


def tanh_testbed(T=1.0, M=0.0):
    """n=m=d=1, only B=Q=N=1: dK/dt = K^2 - 1, K(T)=M."""
    return build_coefficients(B=[[1.0]], Q=[[1.0]], N=[[1.0]], M=[[M]], C=[[[0.0]]], D=[[[0.0]]], T=T)


def jump_lyapunov(T=1.0):
    """Uncontrolled dX = X dmu~ with nu=1: K(t) = exp(T - t)."""
    return build_coefficients(
        B=[[0.0]], N=[[1.0]], M=[[1.0]], C=[[[0.0]]], D=[[[0.0]]],
        marks={"e": 1.0}, E={"e": [[1.0]]}, F={"e": [[0.0]]}, T=T,
    )


def jump_control(T=1.0):
    """Scalar scenario with Brownian and jump noise and control in the jump term."""
    return build_coefficients(
        A=[[0.1]], B=[[1.0]], C=[[[0.2]]], D=[[[0.0]]], Q=[[1.0]], N=[[1.0]], M=[[1.0]],
        marks={"e": 1.0}, E={"e": [[0.5]]}, F={"e": [[0.3]]}, T=T,
    )


def random_psd(rng, n, scale=1.0, floor=0.0):
    G = rng.normal(size=(n, n)) * scale
    return G @ G.T / n + floor * np.eye(n)


def random_coefficients(rng, n=None, m=None, d=None, k=None, T=1.0, scale=0.5, delta=0.5):
    """Bounded random deterministic scenario satisfying the standing assumptions."""
    n = n or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 4))
    d = int(rng.integers(0, 3)) if d is None else d
    k = int(rng.integers(0, 3)) if k is None else k
    marks = {f"e{j}": float(rng.uniform(0.2, 1.5)) for j in range(k)}
    return build_coefficients(
        A=rng.normal(size=(n, n)) * scale,
        B=rng.normal(size=(n, m)) * scale,
        C=[rng.normal(size=(n, n)) * scale for _ in range(d)],
        D=[rng.normal(size=(n, m)) * scale for _ in range(d)],
        Q=random_psd(rng, n),
        N=random_psd(rng, m, floor=delta),
        M=random_psd(rng, n),
        marks=marks,
        E={e: rng.normal(size=(n, n)) * scale for e in marks},
        F={e: rng.normal(size=(n, m)) * scale for e in marks},
        T=T,
        delta=delta,
        n=n, m=m, d=d,
    )
