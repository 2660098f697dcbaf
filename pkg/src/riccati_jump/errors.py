"""Exception types shared across the toolkit."""

from __future__ import annotations


class RiccatiJumpError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RiccatiJumpError, ValueError):
    """An array does not have the shape implied by ``(n, m, d)``."""

    def __init__(self, symbol: str, expected, got):
        self.symbol = symbol
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"{symbol}: expected shape {self.expected}, got {self.got}")


class NonPositiveScriptN(RiccatiJumpError):
    """The control Hessian N + sum D'KD + int F'(K+R)F nu is not positive definite."""

    def __init__(self, t: float, detail: str = ""):
        self.t = t
        msg = f"control Hessian not positive definite at t={t!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DiscreteScriptNError(NonPositiveScriptN):
    """Lattice analogue of :class:`NonPositiveScriptN`, carrying the node address."""

    def __init__(self, t: float, address, detail: str = ""):
        self.address = address
        super().__init__(t, f"node {address}" + (f"; {detail}" if detail else ""))


class NonFiniteState(RiccatiJumpError, FloatingPointError):
    """A solver or simulator produced inf/nan."""


class AssumptionError(RiccatiJumpError, ValueError):
    """Coefficient data violates the standing assumptions (Q, M PSD; N >= delta I)."""

    def __init__(self, failures):
        self.failures = list(failures)
        lines = "; ".join(str(f) for f in self.failures)
        super().__init__(f"standing assumptions violated (Assumption 1): {lines}")
