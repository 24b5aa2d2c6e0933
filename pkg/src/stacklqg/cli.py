"""Command-line interface: ``stacklqg {validate,solve,simulate,verify,example}``.

Exit codes: 0 ok, 2 usage/parse, 3 validation, 4 solver, 5 simulation,
6 verification.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .augment import augment
from .errors import (DimensionError, DivergenceError, FixedPointError, GridError, InversionError, NotConvergedError,
                     ParameterError, ScenarioParseError, SimulationError, StackLQGError)
from .integrators import MatrixPath, TimeGrid
from .io import dump_scenario, load_scenario, write_json, write_matrix_path_csv
from .problem import FIXTURES, build_example_debt, build_example_servo, validate_assumptions
from .riccati import FixedPointConfig, RiccatiBundle, residuals, solve_riccati
from .simulation import ClosedLoop, monte_carlo, resolve_threads, run_batch, simulate_path
from .strategies import build_gains, write_gains_csv

log = logging.getLogger("stacklqg")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_SOLVER, EXIT_SIMULATION, EXIT_VERIFY = 0, 2, 3, 4, 5, 6

DEFAULT_N = 2000
DEFAULT_M = 2000
DEFAULT_SEED = 0

SERVO_DEFAULTS = {
    "A1": [[-1.0]], "A2": [[-1.0]], "L": [[0.0]], "B1": [[1.0]], "B2": [[1.0]],
    "D1": [[0.2]], "D2": [[0.2]], "h1": [[1.0, 0.0]], "h2": [[0.0, 1.0]],
    "G11": [[1.0]], "G12": [[0.0]], "G21": [[1.0]], "G22": [[0.0]],
    "theta": 0.5, "T": 1.0, "x0_mean": [0.0, 0.0, 1.0], "x0_cov": [[0.1, 0, 0], [0, 0.1, 0], [0, 0, 0]],
}


class CLIError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    scenario: str
    scenario_sha256: str
    T: float
    N: int
    seed: int | None
    M: int | None
    out_dir: str
    threads: int
    bit_exact: bool
    version: str
    wall_time: float = 0.0

    def write(self, out_dir):
        write_json(asdict(self), Path(out_dir) / "manifest.json")


# -- helpers ------------------------------------------------------------------

def resolve_scenario(ref: str):
    """A scenario file path, or the name of a builtin (scalar, debt, det, servo)."""
    builtins = dict(FIXTURES)
    builtins["servo"] = lambda: build_example_servo(**SERVO_DEFAULTS)
    name = ref[len("builtin:"):] if ref.startswith("builtin:") else ref
    path = Path(ref)
    if path.exists():
        return load_scenario(path)
    if name in builtins:
        return builtins[name]()
    raise ScenarioParseError(f"no scenario file or builtin named '{ref}' "
                             f"(builtins: {', '.join(sorted(builtins))})")


def _grid(spec, N):
    try:
        return TimeGrid(spec.T, N)
    except GridError as exc:
        raise CLIError(f"grid too coarse: {exc}", EXIT_USAGE) from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _validate_or_fail(spec):
    report = validate_assumptions(spec)
    if not report.passed:
        raise CLIError(f"scenario violates the standing assumptions:\n{report}", EXIT_VALIDATION)
    return report


def _solve(spec, grid, damping=0.5):
    try:
        aug = augment(spec)
        bundle = solve_riccati(aug, grid, FixedPointConfig(damping=damping))
    except FixedPointError as exc:
        raise CLIError(str(exc), EXIT_SOLVER) from exc
    except (DivergenceError, InversionError) as exc:
        raise CLIError(f"solver failed: {exc}", EXIT_SOLVER) from exc
    return aug, bundle


def _manifest(args, spec, grid, out, seed=None, M=None):
    text = dump_scenario(spec)
    return RunManifest(
        command=args.command, scenario=str(args.scenario), scenario_sha256=hashlib.sha256(text.encode()).hexdigest(),
        T=grid.T, N=grid.N, seed=seed, M=M, out_dir=str(out), threads=resolve_threads(args.threads),
        bit_exact=bool(args.bit_exact), version=__version__,
    )


def write_bundle(bundle: RiccatiBundle, gains, out: Path):
    for name, path in bundle.paths().items():
        write_matrix_path_csv(path, out / f"{name}.csv", name)
    write_gains_csv(gains, out / "gains")
    write_json(bundle.fp_report.as_dict(), out / "fixed_point.json")


# -- commands -----------------------------------------------------------------

def cmd_validate(args) -> int:
    spec = resolve_scenario(args.scenario)
    report = validate_assumptions(spec)
    print(report)
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_solve(args, spec=None) -> int:
    t0 = time.perf_counter()
    spec = spec or resolve_scenario(args.scenario)
    _validate_or_fail(spec)
    grid = _grid(spec, args.steps)
    out = _out_dir(args)
    aug, bundle = _solve(spec, grid, args.damping)
    gains = build_gains(bundle, aug)
    dump_scenario(spec, out / "scenario.yaml")
    write_bundle(bundle, gains, out)
    rep = bundle.fp_report
    print(f"fixed point: {'converged' if rep.converged else 'NOT converged'} after {rep.iterations} "
          f"sweeps (final delta {rep.final_delta:.3e}, tol {rep.tol:.1e})")
    man = _manifest(args, spec, grid, out)
    man.wall_time = time.perf_counter() - t0
    man.write(out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    if args.paths < 1:
        raise CLIError("--paths must be at least 1", EXIT_USAGE)
    spec = resolve_scenario(args.scenario)
    _validate_or_fail(spec)
    grid = _grid(spec, args.steps)
    out = _out_dir(args)
    aug, bundle = _solve(spec, grid, args.damping)
    gains = build_gains(bundle, aug)
    try:
        report = monte_carlo(spec, aug, bundle, gains, grid, args.paths, args.seed,
                             threads=args.threads, bit_exact=args.bit_exact, diagnostics=args.paths >= 2)
        for p in range(min(args.trajectories, args.paths)):
            simulate_path(spec, aug, bundle, gains, grid, (args.seed, p)).to_csv(out / f"trajectory_{p:04d}.csv")
    except (SimulationError, DivergenceError) as exc:
        raise CLIError(f"simulation failed: {exc}", EXIT_SIMULATION) from exc
    dump_scenario(spec, out / "scenario.yaml")
    write_json(report.as_dict(), out / "cost_report.json")
    if report.filter_stats is not None:
        write_json(report.filter_stats.as_dict(), out / "diagnostics.json")
    se = lambda v: "n/a" if v is None else f"{v:.3e}"
    print(f"J_F = {report.J_F_mean:.6g} (SE {se(report.J_F_se)}), "
          f"J_L = {report.J_L_mean:.6g} (SE {se(report.J_L_se)}), M = {report.M}")
    man = _manifest(args, spec, grid, out, seed=args.seed, M=args.paths)
    man.wall_time = time.perf_counter() - t0
    man.write(out)
    return EXIT_OK


def _check(name, observed, bound, passed=None, **extra):
    ok = bool(observed <= bound) if passed is None else bool(passed)
    return {"name": name, "observed": float(observed), "bound": float(bound), "passed": ok, **extra}


def tamper(bundle: RiccatiBundle, factor: float) -> RiccatiBundle:
    """Copy of ``bundle`` with ``P`` scaled (fault injection for the verifier)."""
    g = bundle.grid
    P = MatrixPath(g, bundle.P.values * factor)
    return RiccatiBundle(aug=bundle.aug, grid=g, P=P, Pdag=bundle.Pdag,
                         Pddag=MatrixPath(g, P.values - bundle.Pdag.values), Sigma=bundle.Sigma,
                         Xi=bundle.Xi, Xi11=bundle.Xi11, fp_report=bundle.fp_report)


def noise_free_agreement(spec, grid):
    """Relative gaps between the noise-free pipeline and the boundary-value oracle."""
    from .oracles import deterministic_tpbvp_oracle
    # a zero initial mean makes the comparison vacuous, so start from ones instead
    mean = spec.x0_mean if np.any(spec.x0_mean) else np.ones_like(spec.x0_mean)
    det = spec.replace(D=np.zeros_like(spec.D), x0_cov=np.zeros_like(spec.x0_cov), x0_mean=mean)
    aug = augment(det)
    bundle = solve_riccati(aug, grid)
    gains = build_gains(bundle, aug)
    loop = ClosedLoop.build(aug, bundle, gains)
    dims = det.dims
    res = run_batch(loop, det.x0_mean[None], np.zeros((1, grid.N, dims.w + dims.l + dims.m)), record=True)
    a = res.arrays
    orc = deterministic_tpbvp_oracle(det, grid)

    def rel(x, y):
        scale = np.abs(y).max()
        return float(np.abs(x - y).max() / scale) if scale > 0 else float(np.abs(x - y).max())

    return {
        "state": rel(a["X"][0], np.hstack([orc.X, orc.Y])),
        "u_F": rel(a["u_F"][0], orc.u_F),
        "u_L": rel(a["u_L"][0], orc.u_L),
        "J_F": rel(np.array([res.J_F[0]]), np.array([orc.J_F])),
        "J_L": rel(np.array([res.J_L[0]]), np.array([orc.J_L])),
    }


def cmd_verify(args) -> int:
    from .oracles import (filter_consistency_test, follower_stationarity_test, innovation_whiteness,
                          leader_stationarity_test, random_layer_probes)
    t0 = time.perf_counter()
    spec = resolve_scenario(args.scenario)
    _validate_or_fail(spec)
    grid = _grid(spec, args.steps)
    out = _out_dir(args)
    aug, bundle = _solve(spec, grid, args.damping)
    if args.tamper_P is not None:
        bundle = tamper(bundle, args.tamper_P)
    checks = []
    res = residuals(bundle)
    for name, value in res.items():
        checks.append(_check(f"residual_{name}", value, 1e-5))
    inner = random_layer_probes(bundle, aug, grid, 20, args.seed)
    checks.append(_check("inner_layer", max(r.rel_error for r in inner), 1e-4))
    outer = random_layer_probes(bundle, aug, grid, 20, args.seed, outer=True)
    checks.append(_check("outer_layer", max(r.rel_error for r in outer), 1e-3))
    try:
        agree = noise_free_agreement(spec, grid)
        for key, value in agree.items():
            checks.append(_check(f"tpbvp_{key}", value, 1e-3))
    except StackLQGError as exc:
        checks.append({"name": "tpbvp", "passed": False, "error": str(exc)})

    if args.level == "full":
        try:
            gains = build_gains(bundle, aug)
            n2 = 2 * spec.dims.n
            e1 = np.zeros((spec.dims.k, n2))
            e1[0, 0] = 1.0
            fs = follower_stationarity_test(spec, bundle, gains, grid, args.paths, e1, master_seed=args.seed,
                                            threads=args.threads)
            checks.append(_check("follower_stationarity", -fs.min_delta, 0.0, passed=fs.passed, report=fs.as_dict()))
            eL = np.zeros((spec.dims.d, n2))
            eL[0, 0] = 1.0
            for direction, label in (((eL, None), "tilde"), ((None, eL), "hat")):
                ls = leader_stationarity_test(spec, bundle, gains, grid, args.paths, direction,
                                              master_seed=args.seed, threads=args.threads)
                checks.append(_check(f"leader_stationarity_{label}", -ls.min_delta, 0.0, passed=ls.passed,
                                     report=ls.as_dict()))
            mc = monte_carlo(spec, aug, bundle, gains, grid, args.paths, args.seed, threads=args.threads,
                             bit_exact=args.bit_exact)
            cps = [grid.N // 4, grid.N // 2, grid.N]
            fc = filter_consistency_test(mc.filter_stats, bundle, cps)
            checks.append(_check("filter_consistency", max(fc.max_excess_hat, fc.max_excess_tilde), 0.0,
                                 passed=fc.passed))
            wh = innovation_whiteness(mc.filter_stats)
            checks.append(_check("innovation_whiteness", max(wh["max_abs"].values()), wh["band"]))
        except (NotConvergedError, SimulationError, DivergenceError) as exc:
            checks.append({"name": "full_level", "passed": False, "error": str(exc)})

    passed = all(c["passed"] for c in checks)
    for c in checks:
        obs = c.get("observed")
        detail = f"{obs:.3e} <= {c['bound']:.1e}" if obs is not None else c.get("error", "")
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']:<28} {detail}")
    write_json({"level": args.level, "passed": passed, "checks": checks}, out / "verification.json")
    man = _manifest(args, spec, grid, out, seed=args.seed, M=args.paths if args.level == "full" else None)
    man.wall_time = time.perf_counter() - t0
    man.write(out)
    return EXIT_OK if passed else EXIT_VERIFY


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CLIError(f"cannot parse parameter value {text!r} (use JSON, e.g. 0.5 or [[1,0]])",
                       EXIT_USAGE) from exc


def cmd_example(args) -> int:
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise CLIError(f"--param expects key=value, got {item!r}", EXIT_USAGE)
        key, value = item.split("=", 1)
        params[key.strip()] = _parse_value(value)
    try:
        if args.name == "debt":
            spec = build_example_debt(**params)
        else:
            spec = build_example_servo(**{**SERVO_DEFAULTS, **params})
    except TypeError as exc:
        raise CLIError(f"bad example parameter: {exc}", EXIT_USAGE) from exc
    except (ParameterError, DimensionError) as exc:
        raise CLIError(f"bad example parameter: {exc}", EXIT_USAGE) from exc
    out = _out_dir(args)
    dump_scenario(spec, out / "scenario.yaml")
    args.scenario = str(out / "scenario.yaml")
    return cmd_solve(args, spec=spec)


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stacklqg", description="Leader-follower LQG games under nested observations.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True, mc=False):
        if scenario:
            sp.add_argument("scenario", help="scenario file (YAML/JSON) or builtin: scalar, debt, det, servo")
        sp.add_argument("--steps", "-N", type=int, default=DEFAULT_N, help="grid steps (default %(default)s)")
        sp.add_argument("--out", "-o", default="stacklqg_out", help="output directory")
        sp.add_argument("--damping", type=float, default=0.5, help="fixed-point damping")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (env STACKLQG_THREADS)")
        sp.add_argument("--bit-exact", action="store_true", help="ordered reduction of Monte Carlo statistics")
        if mc:
            sp.add_argument("--paths", "-M", type=int, default=DEFAULT_M, help="Monte Carlo paths")
            sp.add_argument("--seed", type=int, default=DEFAULT_SEED, help="master seed")

    sp = sub.add_parser("validate", help="check the standing assumptions")
    sp.add_argument("scenario")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("solve", help="solve the Riccati system and export gains")
    common(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("simulate", help="solve, then Monte Carlo the closed loop")
    common(sp, mc=True)
    sp.add_argument("--trajectories", type=int, default=0, help="also export this many sample paths")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("verify", help="run the verification oracles")
    common(sp, mc=True)
    sp.add_argument("--level", choices=("fast", "full"), default="fast")
    sp.add_argument("--tamper-P", type=float, default=None, metavar="FACTOR",
                    help="debug: scale P before the checks (fault injection)")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("example", help="materialize a worked example and solve it")
    sp.add_argument("name", choices=("debt", "servo"))
    common(sp, scenario=False)
    sp.add_argument("--param", action="append", metavar="KEY=VALUE", help="builder parameter (JSON value)")
    sp.set_defaults(func=cmd_example)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "command", None) != "validate" and getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FixedPointError, DivergenceError, InversionError, NotConvergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
