"""Path-functional (random) coefficients for the lattice solver.

A path functional maps the history of lattice outcomes to a coefficient
matrix.  Each functional carries a small hashable *state* that it updates one
step at a time; two lattice nodes at the same step with equal states have
identical conditional futures, which is what lets the lattice merge them.

Outcomes are ``(signs, jump)`` pairs: ``signs`` is a tuple of +-1 of length d,
``jump`` is a mark index or ``None``.
"""

from __future__ import annotations

import math
from typing import Callable, Hashable

import numpy as np


class PathFunctional:
    """Interface: ``initial_state``, ``advance`` and ``value``."""

    name = "abstract"

    def initial_state(self) -> Hashable:
        raise NotImplementedError

    def advance(self, state, signs: tuple, jump: int | None, dt: float):
        raise NotImplementedError

    def value(self, state, t: float, dt: float) -> np.ndarray:
        raise NotImplementedError

    def matrices(self) -> list[np.ndarray]:
        """Every matrix the functional can return (used for shape checks)."""
        return []

    def requires_brownian(self) -> int:
        """Number of Brownian components the functional reads (0 if none)."""
        return 0


class FirstBrownianSign(PathFunctional):
    """``plus`` if the first Brownian increment of ``component`` is positive, else ``minus``.

    Before the first step the value is ``initial`` (defaults to ``plus``).
    """

    name = "sign-of-first-brownian-step"

    def __init__(self, plus, minus, component: int = 0, initial=None):
        self.plus = np.atleast_2d(np.asarray(plus, dtype=float))
        self.minus = np.atleast_2d(np.asarray(minus, dtype=float))
        self.initial = self.plus if initial is None else np.atleast_2d(np.asarray(initial, dtype=float))
        self.component = int(component)

    def initial_state(self):
        return 0

    def advance(self, state, signs, jump, dt):
        if state != 0:
            return state
        return 1 if signs[self.component] > 0 else -1

    def value(self, state, t, dt):
        if state == 0:
            return self.initial
        return self.plus if state > 0 else self.minus

    def matrices(self):
        return [self.plus, self.minus, self.initial]

    def requires_brownian(self):
        return self.component + 1


class BrownianLevelSine(PathFunctional):
    """``base + amplitude * sin(frequency * W_i(t))`` with W the lattice random walk.

    The state is the integer level; ``W = level * sqrt(dt)``.  Smooth in W, so
    the lattice martingale part L stays O(1) as the step shrinks.
    """

    name = "brownian-level-sine"

    def __init__(self, base, amplitude, component: int = 0, frequency: float = 1.0):
        self.base = np.atleast_2d(np.asarray(base, dtype=float))
        self.amplitude = np.atleast_2d(np.asarray(amplitude, dtype=float))
        self.component = int(component)
        self.frequency = float(frequency)

    def initial_state(self):
        return 0

    def advance(self, state, signs, jump, dt):
        return state + int(signs[self.component])

    def value(self, state, t, dt):
        return self.base + self.amplitude * math.sin(self.frequency * state * math.sqrt(dt))

    def matrices(self):
        return [self.base, self.amplitude]

    def requires_brownian(self):
        return self.component + 1


class JumpCountGeometric(PathFunctional):
    """``base + scale * ratio**count`` where count is the number of jumps so far."""

    name = "jump-count-geometric"

    def __init__(self, base, scale, ratio: float):
        self.base = np.atleast_2d(np.asarray(base, dtype=float))
        self.scale = np.atleast_2d(np.asarray(scale, dtype=float))
        self.ratio = float(ratio)

    def initial_state(self):
        return 0

    def advance(self, state, signs, jump, dt):
        return state + (jump is not None)

    def value(self, state, t, dt):
        return self.base + self.scale * self.ratio**state

    def matrices(self):
        return [self.base, self.scale]


class HistoryFunctional(PathFunctional):
    """Arbitrary ``func(t, history) -> matrix``; the state is the full history.

    Nothing merges under this functional, so lattices using it grow as the
    explicit tree.
    """

    name = "history"

    def __init__(self, func: Callable[[float, tuple], np.ndarray], example=None):
        self.func = func
        self.example = example

    def initial_state(self):
        return ()

    def advance(self, state, signs, jump, dt):
        return state + ((tuple(signs), jump),)

    def value(self, state, t, dt):
        return np.atleast_2d(np.asarray(self.func(t, state), dtype=float))

    def matrices(self):
        return [] if self.example is None else [np.atleast_2d(np.asarray(self.example, dtype=float))]


CATALOG: dict[str, type[PathFunctional]] = {
    FirstBrownianSign.name: FirstBrownianSign,
    BrownianLevelSine.name: BrownianLevelSine,
    JumpCountGeometric.name: JumpCountGeometric,
}
