"""Command line front end: scenario in, CSV artifacts and a pass/fail report out.

    riccati-jump <subcommand> --scenario FILE [--seed S] [--paths N] [--dt DT] [--nt NT] [--out DIR]

Subcommands: solve-riccati, simulate, verify, lattice, compare, list.
Exit codes: 0 every check passed, 1 a check failed (or a solver error),
2 bad input.  Timings go to stdout only, so CSV files are reproducible.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import discretization_allowance, optimality_gap, perturbed, simulate_closed_loop, synthesize_feedback
from .errors import AssumptionError, RiccatiJumpError
from .lattice import (
    LatticeOverflow,
    bsrej_residual,
    brute_force_tolerance,
    brute_force_value,
    check_structure,
    optimal_tree_policy,
    random_tree_policy,
    solve_lattice,
    submartingale_check,
    write_tree_csv,
)
from .riccati import interpolate_K, riccati_residual, solve_riccati_ide, vech, vech_labels, write_grid_csv
from .scenario import EXACT_K, Scenario, ScenarioError, bundled_scenarios, parse_scenario, resolve
from .simulator import CostEstimate, SimConfig, evaluate_cost, moment_oracle, simulate_paths, write_paths_csv, zero_policy

SUBCOMMANDS = ("solve-riccati", "simulate", "verify", "lattice", "compare")
NOISE_FREE_SE = 1e-12
PSD_TOL = 1e-9
RESIDUAL_RTOL = 1e-8
LR_TOL = 1e-12
DPP_TOL = 1e-10
RATIO_BAND = (1.5, 3.0)


class InputError(RiccatiJumpError, ValueError):
    """The scenario cannot be run by the requested subcommand."""


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    tolerance: str
    detail: str = ""


@dataclass
class RunReport:
    scenario: str
    digest: str
    subcommand: str
    checks: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, passed, measured, tolerance, detail=""):
        if any(c.name == name for c in self.checks):
            raise ValueError(f"check {name!r} reported twice")
        self.checks.append(Check(name, bool(passed), float(measured), str(tolerance), detail))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "scenario_hash", "subcommand", "check", "passed", "measured", "tolerance", "detail"])
            for c in self.checks:
                w.writerow([self.scenario, self.digest, self.subcommand, c.name, str(c.passed).lower(),
                            repr(c.measured), c.tolerance, c.detail])
        return path


@dataclass
class Overrides:
    seed: int | None = None
    paths: int | None = None
    dt: float | None = None
    nt: int | None = None
    workers: int = 1


class _Timer:
    def __init__(self, report: RunReport, label: str):
        self.report, self.label = report, label

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.report.timing[self.label] = time.perf_counter() - self.t0


def _write_values(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


def _est_row(name, est: CostEstimate):
    return [name, float(est.mean), float(est.std_error), est.n_paths]


def _require_deterministic(sc: Scenario, sub: str):
    if not sc.deterministic:
        raise InputError(f"{sub} needs deterministic coefficients; scenario {sc.name!r} has path functionals "
                         f"({', '.join(sorted(sc.coeffs.path))}); use the lattice subcommand")


def _sim_settings(sc: Scenario, section: str, ov: Overrides) -> dict:
    s = dict(sc.section(section))
    for key in ("seed", "paths", "dt"):
        v = getattr(ov, key)
        if v is not None:
            s[key] = v
    return s


def _sim_config(sc: Scenario, s: dict, ov: Overrides, **kw) -> SimConfig:
    base = dict(dt=float(s["dt"]), n_paths=int(s["paths"]), seed=int(s["seed"]), x0=sc.x0,
                antithetic=bool(s["antithetic"]), workers=ov.workers)
    base.update(kw)
    return SimConfig(**base)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _solve_riccati(sc: Scenario, out: Path, rep: RunReport, ov: Overrides):
    _require_deterministic(sc, "solve-riccati")
    nt = ov.nt or int(sc.section("riccati")["nt"])
    with _Timer(rep, "solve"):
        grid = solve_riccati_ide(sc.coeffs, nt, check_psd=False)
    rep.artifacts.append(write_grid_csv(grid, out / "grid.csv"))
    with _Timer(rep, "residual"):
        res = riccati_residual(grid, sc.coeffs)
    scale = 1.0 + float(np.max(np.linalg.norm(grid.K, axis=(1, 2))))
    rep.add("riccati_residual", res <= RESIDUAL_RTOL * scale, res, f"<= {RESIDUAL_RTOL * scale:.3e}",
            f"Nt={nt}; integral form, Frobenius norm")
    kmin = float(min(np.linalg.eigvalsh(K).min() for K in grid.K))
    rep.add("K_psd_floor", kmin >= -PSD_TOL, kmin, f">= {-PSD_TOL:g}")
    nmin = float(np.min(grid.min_scriptN_eig))
    rep.add("scriptN_floor", nmin > 0.0, nmin, "> 0", f"delta={sc.coeffs.delta:g}")
    expect = sc.section("expect")
    if "K_exact" in expect:
        f = EXACT_K[expect["K_exact"]]
        err = max(abs(float(K[0, 0]) - f(float(t), sc.T)) for t, K in zip(grid.times, grid.K))
        tol = float(expect.get("K_tol", 1e-8))
        rep.add("K_closed_form_max_error", err <= tol, err, f"<= {tol:g}", f"K(t) = {expect['K_exact']}(T - t)")
    if "K0" in expect:
        err = float(np.max(np.abs(grid.K[0] - np.atleast_2d(expect["K0"]))))
        tol = float(expect.get("K_tol", 1e-8))
        rep.add("K0_error", err <= tol, err, f"<= {tol:g}")


def _simulate(sc: Scenario, out: Path, rep: RunReport, ov: Overrides):
    _require_deterministic(sc, "simulate")
    s = _sim_settings(sc, "simulate", ov)
    cfg = _sim_config(sc, s, ov)
    pol = zero_policy(sc.m)
    with _Timer(rep, "simulate"):
        b = simulate_paths(sc.coeffs, pol, cfg)
    cost = evaluate_cost(b, sc.coeffs)
    finite = bool(np.all(np.isfinite(b.X_T)))
    rep.add("state_finite", finite, float(np.max(np.abs(b.X_T))), "finite", f"{b.n_paths} paths, dt={cfg.dt:g}")
    rows = [_est_row("cost_zero_control", cost)]
    for i in range(sc.n):
        rows.append(_est_row(f"mean_X{i + 1}", CostEstimate.from_samples(b.X_T[:, i], b.pairs)))
    k = float(s["k"])
    if sc.n == 1 and sc.m == 1:
        m1, m2 = moment_oracle(sc.coeffs, sc.T, x0=sc.x0[0], t0=0.0)
        e1 = CostEstimate.from_samples(b.X_T[:, 0], b.pairs)
        e2 = CostEstimate.from_samples(b.X_T[:, 0] ** 2, b.pairs)
        rows += [_est_row("second_moment_X1", e2), ["oracle_mean", m1, 0.0, 0], ["oracle_second_moment", m2, 0.0, 0]]
        small = min(cfg.n_paths, 16)
        for power, name, est, ref in ((1, "first_moment", e1, m1), (2, "second_moment", e2, m2)):
            err = abs(est.mean - ref)
            allow = 0.0
            if est.std_error <= NOISE_FREE_SE:
                def q(dt, power=power):
                    x = simulate_paths(sc.coeffs, pol, _sim_config(sc, s, ov, dt=dt, n_paths=small)).X_T[:, 0]
                    return float(np.mean(x**power))

                allow = discretization_allowance(q, cfg.dt)
            tol = k * est.std_error + allow
            rep.add(f"{name}_vs_oracle", err <= tol, err, f"<= {tol:.3e}",
                    f"estimate {est.mean!r}, oracle {ref!r}, se={est.std_error:.3e}"
                    + (f"; noise-free, step-halving allowance {allow:.3e}" if allow else ""))
    rep.artifacts.append(_write_values(out / "values.csv", ["quantity", "mean", "std_error", "n_paths"], rows))
    if int(s["record_paths"]) > 0:
        rec = simulate_paths(sc.coeffs, pol, _sim_config(sc, s, ov, n_paths=int(s["record_paths"]), record=True))
        rep.artifacts.append(write_paths_csv(rec, out / "paths.csv"))


def _alt_policy(law, alt, m):
    if alt["zero"]:
        return zero_policy(m)
    return perturbed(law, gain_shift=alt["gain_shift"], offset=alt["offset"])


def _verify(sc: Scenario, out: Path, rep: RunReport, ov: Overrides):
    _require_deterministic(sc, "verify")
    s = _sim_settings(sc, "verify", ov)
    nt = ov.nt or int(s["nt"])
    k = float(s["k"])
    with _Timer(rep, "solve"):
        law = synthesize_feedback(solve_riccati_ide(sc.coeffs, nt), sc.coeffs)
    cfg = _sim_config(sc, s, ov)
    V = law.value(sc.x0)
    small = min(cfg.n_paths, 16)

    def closed_loop(dt):
        return evaluate_cost(simulate_closed_loop(sc.coeffs, law, _sim_config(sc, s, ov, dt=dt, n_paths=small)), sc.coeffs).mean

    with _Timer(rep, "closed_loop"):
        est = evaluate_cost(simulate_closed_loop(sc.coeffs, law, cfg), sc.coeffs)
    err = abs(est.mean - V)
    allowance = discretization_allowance(closed_loop, cfg.dt) if est.std_error <= NOISE_FREE_SE else 0.0
    tol = k * est.std_error + allowance
    detail = f"V={V!r}, J={est.mean!r}, se={est.std_error:.3e}"
    if allowance:
        detail += f"; noise-free, step-halving allowance {allowance:.3e}"
    rep.add("value_identity", err <= tol, err, f"<= {tol:.3e}", detail)
    rows = [["V_formula", V, 0.0, 0], _est_row("closed_loop_cost", est)]
    for alt in s["alternatives"]:
        pol = _alt_policy(law, alt, sc.m)
        name = alt["name"]
        with _Timer(rep, f"gap[{name}]"):
            r = optimality_gap(sc.coeffs, law, pol, cfg)
        rows += [_est_row(f"{name}.cost", r.cost), _est_row(f"{name}.direct_gap", r.direct),
                 _est_row(f"{name}.predicted_gap", r.predicted), _est_row(f"{name}.difference", r.difference)]
        noise_free = r.difference.std_error <= NOISE_FREE_SE

        def diff(dt, pol=pol):
            return optimality_gap(sc.coeffs, law, pol, _sim_config(sc, s, ov, dt=dt, n_paths=small)).difference.mean

        allow = discretization_allowance(diff, cfg.dt) if noise_free else 0.0
        lo = -k * r.direct.std_error - allow
        rep.add(f"dominance[{name}]", r.direct.mean >= lo, r.direct.mean, f">= {lo:.3e}",
                f"J(alt) - V, se={r.direct.std_error:.3e}")
        tol = k * r.difference.std_error + allow
        rep.add(f"gap_consistency[{name}]", abs(r.difference.mean) <= tol, abs(r.difference.mean), f"<= {tol:.3e}",
                f"direct={r.direct.mean!r}, predicted={r.predicted.mean!r}"
                + (f"; noise-free, step-halving allowance {allow:.3e}" if allow else ""))
    rep.artifacts.append(_write_values(out / "values.csv", ["quantity", "mean", "std_error", "n_paths"], rows))


def _lattice(sc: Scenario, out: Path, rep: RunReport, ov: Overrides):
    s = dict(sc.section("lattice"))
    nts = [int(x) for x in s["nt"]]
    if ov.nt:
        nts = [ov.nt, 2 * ov.nt] if s["residual_ratio"] else [ov.nt]
    if ov.seed is not None:
        s["seed"] = ov.seed
    expect = sc.section("expect")
    n = sc.n
    header = ["Nt", "nodes", *vech_labels(n), "residual_max", "residual_mean",
              "floor_scriptN", "floor_K", "floor_K_plus_R", "floor_FKRF", "sum_L", "sum_R"]
    rows, residuals = [], []
    first_tree = None
    for nt in nts:
        with _Timer(rep, f"lattice[Nt={nt}]"):
            tree = solve_lattice(sc.coeffs, nt)
            rmax, rmean = bsrej_residual(tree)
            st = check_structure(tree)
        if first_tree is None:
            first_tree = tree
        residuals.append(rmax)
        fl = st.floors
        rows.append([nt, tree.n_nodes, *vech(tree.root.K), rmax, rmean, fl["scriptN"], fl["K"], fl["K_plus_R"],
                     fl["FKRF"], st.sum_L, st.sum_R])
        worst_name = min(fl, key=fl.get)
        rep.add(f"structure_floors[Nt={nt}]", st.ok, fl[worst_name], f">= {-PSD_TOL:g}",
                f"lowest {worst_name}" + (f" at {st.worst_nodes[worst_name]}" if worst_name in st.worst_nodes else ""))
        total = st.sum_L + st.sum_R
        rep.add(f"bmo_sums_finite[Nt={nt}]", math.isfinite(total), total, "finite",
                f"sum|L|^2 dt={st.sum_L!r}, sum|R|^2 nu dt={st.sum_R!r}")
        if sc.deterministic:
            lr = max(max(float(np.abs(nd.L).max(initial=0.0)), float(np.abs(nd.R).max(initial=0.0)))
                     for nd in tree.inner_nodes())
            rep.add(f"deterministic_LR_zero[Nt={nt}]", lr <= LR_TOL, lr, f"<= {LR_TOL:g}")
        if expect.get("zero_tree"):
            kmax = max(float(np.abs(nd.K).max()) for nd in tree.nodes())
            rep.add(f"zero_tree[Nt={nt}]", kmax == 0.0 and rmax == 0.0, max(kmax, rmax), "== 0")
    if s["residual_ratio"]:
        if len(nts) < 2:
            raise InputError("residual_ratio needs at least two lattice Nt values")
        for a, b, ra, rb in zip(nts, nts[1:], residuals, residuals[1:]):
            ratio = ra / rb if rb > 0 else math.inf
            rep.add(f"residual_ratio[Nt={a}/{b}]", RATIO_BAND[0] <= ratio <= RATIO_BAND[1], ratio,
                    f"in [{RATIO_BAND[0]}, {RATIO_BAND[1]}]", f"residuals {ra!r}, {rb!r}")
    if "lattice_K0" in expect:
        err = float(np.max(np.abs(first_tree.root.K - np.atleast_2d(expect["lattice_K0"]))))
        rep.add(f"lattice_K0[Nt={nts[0]}]", err <= 1e-12, err, "<= 1e-12")
    dpp_nt = int(s["dpp_nt"])
    if dpp_nt > 0:
        with _Timer(rep, "dpp"):
            tree = solve_lattice(sc.coeffs, dpp_nt)
            rng = np.random.default_rng(int(s["seed"]))
            pols = {"optimal": optimal_tree_policy(tree)}
            pols.update({f"random{i}": random_tree_policy(tree, rng) for i in range(int(s["random_policies"]))})
            reps = submartingale_check(tree, sc.x0, pols)
        opt = reps[0]
        rep.add("martingale_optimal", opt.max_abs_increment <= DPP_TOL, opt.max_abs_increment, f"<= {DPP_TOL:g}",
                f"Nt={dpp_nt}, {opt.n_nodes} history nodes")
        if len(reps) > 1:
            worst = min(reps[1:], key=lambda r: r.min_increment)
            rep.add("submartingale_random", worst.min_increment >= -DPP_TOL, worst.min_increment, f">= {-DPP_TOL:g}",
                    f"{len(reps) - 1} random adapted policies, worst {worst.policy}")
    bf = s["brute_force"]
    if bf is not None:
        h, rng_ = float(bf["step"]), float(bf["range"])
        grid = np.arange(-round(rng_ / h), round(rng_ / h) + 1) * h
        with _Timer(rep, "brute_force"):
            tree = solve_lattice(sc.coeffs, int(bf["nt"]))
            v = brute_force_value(tree, sc.x0, grid)
        x = np.asarray(sc.x0)
        dp = float(x @ tree.root.K @ x)
        tol = brute_force_tolerance(tree, h)
        excess = v - dp
        ok = -1e-12 * (1.0 + abs(dp)) <= excess <= tol
        rep.add(f"brute_force[Nt={bf['nt']}]", ok, excess, f"in [0, {tol:.3e}]",
                f"grid step {h:g}, brute={v!r}, induction={dp!r}")
    rep.artifacts.append(_write_values(out / "values.csv", header, rows))
    try:
        rep.artifacts.append(write_tree_csv(first_tree, out / "tree.csv", max_rows=int(s["tree_rows"])))
    except LatticeOverflow as exc:
        print(f"tree.csv skipped: {exc}")


def _compare(sc: Scenario, out: Path, rep: RunReport, ov: Overrides):
    _require_deterministic(sc, "compare")
    s = sc.section("compare")
    nts = [int(x) for x in s["nt"]]
    if ov.nt:
        nts = [ov.nt, 2 * ov.nt, 4 * ov.nt]
    expect = sc.section("expect")
    if "K_exact" in expect:
        K_ref = np.array([[EXACT_K[expect["K_exact"]](0.0, sc.T)]])
        ref = f"closed form {expect['K_exact']}"
    elif "K0" in expect:
        K_ref = np.atleast_2d(np.asarray(expect["K0"], dtype=float))
        ref = "expected K0"
    else:
        with _Timer(rep, "riccati"):
            K_ref = interpolate_K(solve_riccati_ide(sc.coeffs, int(s["reference_nt"])), 0.0)
        ref = f"Riccati Nt={s['reference_nt']}"
    errs, rows = [], []
    for nt in nts:
        with _Timer(rep, f"lattice[Nt={nt}]"):
            tree = solve_lattice(sc.coeffs, nt)
        e = float(np.linalg.norm(tree.root.K - K_ref))
        errs.append(e)
        rows.append([nt, *vech(tree.root.K), e])
    shrinking = all(b < a or b <= LR_TOL for a, b in zip(errs, errs[1:]))
    rep.add("root_K_error_shrinks", shrinking, errs[-1], "strictly decreasing in Nt",
            f"reference {ref}; errors " + " ".join(f"{e:.3e}" for e in errs))
    rep.artifacts.append(_write_values(out / "values.csv", ["Nt", *vech_labels(sc.n), "root_error"], rows))


RUNNERS = {
    "solve-riccati": _solve_riccati,
    "simulate": _simulate,
    "verify": _verify,
    "lattice": _lattice,
    "compare": _compare,
}


def run_experiment(sc: Scenario, subcommand: str, out, overrides: Overrides | None = None) -> RunReport:
    """Run one subcommand, write its CSV artifacts and ``report.csv`` under ``out``.

    :class:`InputError` is raised when the subcommand does not apply to the
    scenario; solver errors propagate with the scenario name attached.
    """
    if subcommand not in RUNNERS:
        raise InputError(f"unknown subcommand {subcommand!r}")
    ov = overrides or Overrides()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rep = RunReport(sc.name, sc.digest, subcommand)
    try:
        RUNNERS[subcommand](sc, out, rep, ov)
    except InputError:
        raise
    except (AssumptionError, ScenarioError) as exc:
        raise InputError(str(exc)) from exc
    except (RiccatiJumpError, FloatingPointError, np.linalg.LinAlgError) as exc:
        rep.add("run", False, math.nan, "no error", f"{type(exc).__name__}: {exc}")
        rep.artifacts.append(rep.write_csv(out / "report.csv"))
        raise RunFailed(f"scenario {sc.name!r} ({subcommand}): {type(exc).__name__}: {exc}", rep) from exc
    except ValueError as exc:
        raise InputError(f"{subcommand}: {exc}") from exc
    rep.artifacts.append(rep.write_csv(out / "report.csv"))
    return rep


class RunFailed(RiccatiJumpError):
    def __init__(self, message: str, report: RunReport):
        self.report = report
        super().__init__(message)


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riccati-jump", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "solve-riccati": "integrate the deterministic Riccati equation; writes grid.csv",
        "simulate": "simulate the uncontrolled state; compares moments with the exact oracle when n = m = 1",
        "verify": "optimal feedback, closed-loop cost against <K(0)x, x>, optimality gaps",
        "lattice": "tree solver: backward induction, Doob split, residuals, structure and DPP checks",
        "compare": "lattice root K against the Riccati solution as Nt grows",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--paths", type=int, help="override the number of Monte Carlo paths")
        sp.add_argument("--dt", type=float, help="override the simulation step")
        sp.add_argument("--nt", type=int, help="override the time grid (lattice: Nt and 2 Nt when ratios are checked)")
        sp.add_argument("--workers", type=int, default=1, help="simulation threads (results do not depend on it)")
        sp.add_argument("--out", help="output directory (default out/<scenario>/<subcommand>)")
    sub.add_parser("list", help="list bundled scenarios")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        for name, path in bundled_scenarios().items():
            print(f"{name}\t{path}")
        return 0
    try:
        sc = parse_scenario(resolve(args.scenario))
    except (ScenarioError, AssumptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for key in ("paths", "nt", "workers"):
        v = getattr(args, key)
        if v is not None and v < 1:
            print(f"error: --{key} must be >= 1", file=sys.stderr)
            return 2
    if args.dt is not None and not args.dt > 0:
        print("error: --dt must be positive", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path("out") / sc.name / args.command
    ov = Overrides(seed=args.seed, paths=args.paths, dt=args.dt, nt=args.nt, workers=args.workers)
    start = time.perf_counter()
    try:
        rep = run_experiment(sc, args.command, out, ov)
    except InputError as exc:
        print(f"error: scenario {sc.name!r}: {exc}", file=sys.stderr)
        return 2
    except RunFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  measured={c.measured:.6g}  tol {c.tolerance}  {c.detail}")
    for label, sec in rep.timing.items():
        print(f"time  {label}  {sec:.3f}s")
    print(f"time  total  {time.perf_counter() - start:.3f}s")
    print(f"{sc.name} {args.command}: {'all checks passed' if rep.ok else 'CHECK FAILED'} -> {out}")
    return 0 if rep.ok else 1


if __name__ == "__main__":
    sys.exit(main())
