"""Scenario files: YAML documents describing one model plus run settings.

Layout (all keys except ``name``, ``dimensions`` and ``coefficients`` optional)::

    name: tanh-testbed
    description: free text
    dimensions: {n: 1, m: 1, d: 1}
    T: 1.0
    delta: 1.0                  # defaults to the smallest eigenvalue of N(0)
    x0: [1.0]                   # defaults to all ones
    coefficients:
      A: [[0.0]]                # constant matrix, rows as lists
      B: {polynomial: [[[1.0]], [[0.5]]]}   # B(t) = B0 + B1 t
      C: [[[0.0]]]              # list of d matrices (same for D)
      Q: {functional: sign-of-first-brownian-step, plus: [[1.0]], minus: [[2.0]]}
      N: [[1.0]]
      M: [[0.0]]
    marks:                      # ordered; weight is nu({e})
      e: {weight: 1.0, E: [[0.5]], F: [[0.3]]}
    riccati: {nt: 1000}
    simulate: {paths: 20000, dt: 0.01, seed: 0}
    verify: {paths: 20000, dt: 0.002, alternatives: [...]}
    lattice: {nt: [50, 100]}
    compare: {nt: [25, 50, 100]}
    expect: {K_exact: tanh, K0: 0.7615941559557649}

Errors carry the file, the line and the dotted field name.
"""

from __future__ import annotations

import hashlib
import inspect
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import AssumptionError, RiccatiJumpError
from .functionals import CATALOG
from .model import CoefficientSet, MarkMeasure, Polynomial, build_coefficients, validate_assumptions


class ScenarioError(RiccatiJumpError, ValueError):
    """Malformed scenario file; names the file, line and field."""

    def __init__(self, source: str, line: int | None, fieldname: str, message: str):
        self.source = source
        self.line = line
        self.field = fieldname
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {fieldname}: {message}")


TOP_KEYS = {"name", "description", "dimensions", "T", "delta", "x0", "coefficients", "marks",
            "riccati", "simulate", "verify", "lattice", "compare", "expect"}
COEFF_KEYS = {"A", "B", "C", "D", "Q", "N", "M"}
MATRIX_PARAMS = {"plus", "minus", "initial", "base", "amplitude", "scale"}

DEFAULTS = {
    "riccati": {"nt": 1000},
    "simulate": {"paths": 20000, "dt": 1e-2, "seed": 0, "antithetic": False, "record_paths": 0, "k": 3.0},
    "verify": {"paths": 20000, "dt": 2e-3, "seed": 0, "nt": 1000, "k": 3.0, "antithetic": False,
               "alternatives": [{"name": "zero", "zero": True}]},
    "lattice": {"nt": [25, 50], "residual_ratio": False, "dpp_nt": 4, "random_policies": 20, "seed": 0,
                "brute_force": None, "tree_rows": 200000},
    "compare": {"nt": [25, 50, 100], "reference_nt": 1000},
    "expect": {},
}

# closed-form K(t) references for scalar scenarios
EXACT_K = {
    "tanh": lambda t, T: math.tanh(T - t),
    "exp": lambda t, T: math.exp(T - t),
}


@dataclass
class Scenario:
    name: str
    description: str
    source: str
    digest: str
    n: int
    m: int
    d: int
    T: float
    x0: tuple
    coeffs: CoefficientSet
    settings: dict = field(default_factory=dict)

    @property
    def deterministic(self) -> bool:
        return self.coeffs.is_deterministic

    def section(self, name: str) -> dict:
        return self.settings[name]


def git_blob_hash(data: bytes) -> str:
    """Content hash as ``git hash-object`` computes it."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("riccati_jump") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".yaml")}


def resolve(spec: str) -> Path:
    """A file path, or the name of a bundled scenario."""
    p = Path(spec)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    if spec in bundled:
        return bundled[spec]
    raise ScenarioError(spec, None, "scenario", "no such file or bundled scenario "
                        f"(bundled: {', '.join(bundled)})")


# --------------------------------------------------------------------------
# line tracking
# --------------------------------------------------------------------------


def _lines(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            _lines(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _lines(v, path + (i,), out)
    return out


class _Ctx:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def error(self, path: tuple, message: str) -> ScenarioError:
        p = tuple(path)
        while p and p not in self.lines:
            p = p[:-1]
        name = ".".join(str(x) for x in path) or "<document>"
        return ScenarioError(self.source, self.lines.get(p), name, message)


# --------------------------------------------------------------------------
# parsing helpers
# --------------------------------------------------------------------------


def _matrix(ctx, value, shape, path) -> np.ndarray:
    if isinstance(value, bool):
        raise ctx.error(path, "expected a matrix, got a boolean")
    if isinstance(value, (int, float)):
        if shape != (1, 1):
            raise ctx.error(path, f"scalar given where a {shape[0]}x{shape[1]} matrix is needed")
        value = [[value]]
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ctx.error(path, "matrix must be a list of numeric rows") from None
    if arr.ndim == 1 and shape[0] == 1:
        arr = arr[None, :]
    if arr.shape != tuple(shape):
        raise ctx.error(path, f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ctx.error(path, "non-finite entries")
    return arr


def _coefficient(ctx, value, shape, path, *, allow_functional=True):
    if isinstance(value, dict):
        keys = set(value)
        if keys == {"polynomial"}:
            terms = value["polynomial"]
            if not isinstance(terms, list) or not terms:
                raise ctx.error(path + ("polynomial",), "expected a non-empty list of matrices")
            return Polynomial([_matrix(ctx, c, shape, path + ("polynomial", i)) for i, c in enumerate(terms)])
        if "functional" in keys:
            if not allow_functional:
                raise ctx.error(path, "path functionals are not allowed here")
            return _functional(ctx, value, shape, path)
        raise ctx.error(path, f"unknown coefficient form {sorted(keys)}; use a matrix, "
                        "{polynomial: [...]} or {functional: name, ...}")
    return _matrix(ctx, value, shape, path)


def _functional(ctx, value, shape, path):
    name = value["functional"]
    cls = CATALOG.get(name)
    if cls is None:
        raise ctx.error(path + ("functional",), f"unknown functional {name!r}; catalog: {', '.join(sorted(CATALOG))}")
    params = inspect.signature(cls.__init__).parameters
    allowed = [p for p in params if p != "self"]
    kwargs = {}
    for key, v in value.items():
        if key == "functional":
            continue
        if key not in allowed:
            raise ctx.error(path + (key,), f"unknown parameter for {name}; expected one of {allowed}")
        kwargs[key] = _matrix(ctx, v, shape, path + (key,)) if key in MATRIX_PARAMS else v
    missing = [p for p, spec in params.items()
               if p != "self" and spec.default is inspect.Parameter.empty and p not in kwargs]
    if missing:
        raise ctx.error(path, f"{name} needs {missing}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ctx.error(path, str(exc)) from None


def _number(ctx, value, path, *, positive=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ctx.error(path, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ctx.error(path, f"expected an integer, got {value!r}")
    if not math.isfinite(value):
        raise ctx.error(path, "must be finite")
    if positive and value <= 0:
        raise ctx.error(path, f"must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _alternatives(ctx, items, n, m):
    path = ("verify", "alternatives")
    if not isinstance(items, list):
        raise ctx.error(path, "expected a list of {name, zero | gain_shift | offset}")
    out = []
    for i, alt in enumerate(items):
        p = path + (i,)
        if not isinstance(alt, dict) or "name" not in alt:
            raise ctx.error(p, "each alternative needs a name")
        extra = set(alt) - {"name", "zero", "gain_shift", "offset"}
        if extra:
            raise ctx.error(p + (sorted(extra)[0],), "unknown field; expected zero, gain_shift or offset")
        parsed = {"name": str(alt["name"]), "zero": bool(alt.get("zero", False)), "gain_shift": None, "offset": None}
        if parsed["zero"] and len(alt) > 2:
            raise ctx.error(p, "zero cannot be combined with gain_shift or offset")
        if "gain_shift" in alt:
            parsed["gain_shift"] = _matrix(ctx, alt["gain_shift"], (m, n), p + ("gain_shift",))
        if "offset" in alt:
            parsed["offset"] = _matrix(ctx, alt["offset"], (1, m), p + ("offset",))[0]
        if not (parsed["zero"] or parsed["gain_shift"] is not None or parsed["offset"] is not None):
            raise ctx.error(p, "give zero: true, gain_shift or offset")
        out.append(parsed)
    return out


def _merge_settings(ctx, doc, n, m):
    out = {}
    for section, defaults in DEFAULTS.items():
        given = doc.get(section) or {}
        if not isinstance(given, dict):
            raise ctx.error((section,), "expected a mapping")
        if section != "expect":
            unknown = set(given) - set(defaults)
            if unknown:
                raise ctx.error((section, sorted(unknown)[0]), f"unknown setting; expected one of {sorted(defaults)}")
        merged = dict(defaults)
        merged.update(given)
        out[section] = merged
    lat = out["lattice"]
    if isinstance(lat["nt"], int):
        lat["nt"] = [lat["nt"]]
    for i, nt in enumerate(lat["nt"]):
        _number(ctx, nt, ("lattice", "nt", i), positive=True, integer=True)
    for i, nt in enumerate(out["compare"]["nt"]):
        _number(ctx, nt, ("compare", "nt", i), positive=True, integer=True)
    for sec in ("simulate", "verify"):
        _number(ctx, out[sec]["paths"], (sec, "paths"), positive=True, integer=True)
        _number(ctx, out[sec]["dt"], (sec, "dt"), positive=True)
    out["verify"]["alternatives"] = _alternatives(ctx, out["verify"]["alternatives"], n, m)
    bf = out["lattice"]["brute_force"]
    if bf is not None:
        if not isinstance(bf, dict) or set(bf) - {"nt", "step", "range"}:
            raise ctx.error(("lattice", "brute_force"), "expected {nt, step, range}")
        bf.setdefault("nt", 2)
        bf.setdefault("step", 1e-2)
        bf.setdefault("range", 2.0)
        _number(ctx, bf["nt"], ("lattice", "brute_force", "nt"), positive=True, integer=True)
        _number(ctx, bf["step"], ("lattice", "brute_force", "step"), positive=True)
        _number(ctx, bf["range"], ("lattice", "brute_force", "range"), positive=True)
    exact = out["expect"].get("K_exact")
    if exact is not None:
        if exact not in EXACT_K:
            raise ctx.error(("expect", "K_exact"), f"unknown closed form {exact!r}; known: {sorted(EXACT_K)}")
        if n != 1:
            raise ctx.error(("expect", "K_exact"), "closed forms are scalar (n = 1)")
    return out


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def parse_scenario(path) -> Scenario:
    """Read, validate and assemble a scenario file.

    Raises :class:`ScenarioError` for malformed content and
    :class:`AssumptionError` when the coefficients violate the standing
    assumptions (Q, M PSD; N >= delta I with delta > 0).
    """
    path = Path(path)
    source = str(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ScenarioError(source, None, "file", exc.strerror or str(exc)) from None
    text = data.decode("utf-8")
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError(source, line, "<yaml>", str(getattr(exc, "problem", exc))) from None
    if not isinstance(doc, dict):
        raise ScenarioError(source, 1, "<document>", "expected a mapping at top level")
    ctx = _Ctx(source, _lines(node))

    unknown = set(doc) - TOP_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ctx.error((key,), f"unknown key; expected one of {sorted(TOP_KEYS)}")
    for key in ("name", "dimensions", "coefficients"):
        if key not in doc:
            raise ctx.error((key,), "missing required field")
    name = str(doc["name"])
    dims = doc["dimensions"]
    if not isinstance(dims, dict) or set(dims) != {"n", "m", "d"}:
        raise ctx.error(("dimensions",), "expected {n: .., m: .., d: ..}")
    n = _number(ctx, dims["n"], ("dimensions", "n"), positive=True, integer=True)
    m = _number(ctx, dims["m"], ("dimensions", "m"), positive=True, integer=True)
    d = _number(ctx, dims["d"], ("dimensions", "d"), integer=True)
    if d < 0:
        raise ctx.error(("dimensions", "d"), "must be >= 0")
    T = _number(ctx, doc.get("T", 1.0), ("T",), positive=True)

    coeffs = doc["coefficients"]
    if not isinstance(coeffs, dict):
        raise ctx.error(("coefficients",), "expected a mapping")
    bad = set(coeffs) - COEFF_KEYS
    if bad:
        raise ctx.error(("coefficients", sorted(bad)[0]), f"unknown coefficient; expected one of {sorted(COEFF_KEYS)}")
    shapes = {"A": (n, n), "B": (n, m), "Q": (n, n), "N": (m, m)}
    kw = {}
    for sym, shape in shapes.items():
        if sym in coeffs:
            kw[sym] = _coefficient(ctx, coeffs[sym], shape, ("coefficients", sym))
    for sym, shape in (("C", (n, n)), ("D", (n, m))):
        if sym in coeffs:
            items = coeffs[sym]
            if not isinstance(items, list) or len(items) != d:
                raise ctx.error(("coefficients", sym), f"expected a list of d = {d} matrices")
            kw[sym] = [_coefficient(ctx, v, shape, ("coefficients", sym, i)) for i, v in enumerate(items)]
    if "M" in coeffs:
        kw["M"] = _matrix(ctx, coeffs["M"], (n, n), ("coefficients", "M"))

    marks = doc.get("marks") or {}
    if not isinstance(marks, dict):
        raise ctx.error(("marks",), "expected a mapping mark -> {weight, E, F}")
    weights, E, F = {}, {}, {}
    for e, spec in marks.items():
        p = ("marks", e)
        if not isinstance(spec, dict) or "weight" not in spec:
            raise ctx.error(p, "expected {weight: .., E: .., F: ..}")
        extra = set(spec) - {"weight", "E", "F"}
        if extra:
            raise ctx.error(p + (sorted(extra)[0],), "unknown mark field")
        w = _number(ctx, spec["weight"], p + ("weight",))
        if not w > 0:
            raise ctx.error(p + ("weight",), f"mark {e!r} needs a positive weight, got {w!r}")
        weights[e] = w
        if "E" in spec:
            E[e] = _coefficient(ctx, spec["E"], (n, n), p + ("E",), allow_functional=False)
        if "F" in spec:
            F[e] = _coefficient(ctx, spec["F"], (n, m), p + ("F",), allow_functional=False)

    delta = None
    if "delta" in doc:
        delta = _number(ctx, doc["delta"], ("delta",))
    x0 = doc.get("x0", [1.0] * n)
    x0 = _matrix(ctx, x0, (1, n), ("x0",))[0]

    settings = _merge_settings(ctx, doc, n, m)
    cs = build_coefficients(n=n, m=m, d=d, T=T, delta=delta, marks=MarkMeasure.from_mapping(weights),
                            E=E, F=F, **kw)
    report = validate_assumptions(cs)
    if not report.ok:
        raise AssumptionError(report.failures)
    return Scenario(
        name=name, description=str(doc.get("description", "")), source=source, digest=git_blob_hash(data),
        n=n, m=m, d=d, T=T, x0=tuple(float(v) for v in x0), coeffs=cs, settings=settings,
    )
