"""Command-line entry point: ``ma-plate <command> [options]``.

Every command writes ``summary.json`` plus CSV artifacts into ``--out``.
Exit status: 0 success, 2 validation error, 3 solver non-convergence.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import csv
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import sympy as sy

from . import __version__
from .discretization import (
    ConfigurationError,
    DomainError,
    Grid2D,
    ScalarField,
    SymMatrixField,
    det2,
    hessian,
    make_grid,
)
from .elasticity3d import X1, X2, GrowthSpec, compat_check
from .families import IntegrabilityError, family_table, saddle_family
from .harness import ScalingExperiment, manufacture, run_scaling
from .radial import (
    NotAdmissibleError,
    RadialProfile,
    eps_step,
    lambda_multiplier,
    radial_admissible,
    radial_el_check,
    radial_energy,
    radial_minimizer,
)
from .solver import (
    NonConvergenceError,
    PenalizedObjective,
    SolverConfig,
    constrained_minimize,
    el_residual,
    matching_correct,
    relaxed_minimize,
)

log = logging.getLogger("ma_plate")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3

COMMANDS = ("solve", "radial", "family", "scaling", "check-el", "check-compat", "matching")

# ----------------------------------------------------------------------------
# f expressions


class ParseError(ConfigurationError):
    def __init__(self, msg: str, pos: int | None = None):
        self.pos = pos
        super().__init__(msg if pos is None else f"{msg} at position {pos}")


_FUNCS = {"exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos, "sqrt": np.sqrt, "abs": np.abs}
_CONSTS = {"pi": math.pi, "e": math.e}
_VARS = ("r", "x1", "x2")
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide, ast.Pow: np.power}
_UNOPS = {ast.USub: np.negative, ast.UAdd: np.positive}


@dataclass(frozen=True)
class FExpr:
    """A compiled constraint expression in r, x1, x2 (x in the unit disk)."""

    text: str
    tree: ast.Expression | None
    names: frozenset
    breakpoints: tuple[float, ...] = ()
    profile_factory: Callable[[int], RadialProfile] | None = None
    of_radius: Callable[[np.ndarray], np.ndarray] | None = None

    @property
    def radial(self) -> bool:
        return self.profile_factory is not None or not (self.names & {"x1", "x2"})

    def __call__(self, x1, x2):
        x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
        if self.of_radius is not None:
            return np.broadcast_to(self.of_radius(np.hypot(x1, x2)), np.broadcast(x1, x2).shape)
        env = {"x1": x1, "x2": x2, "r": np.hypot(x1, x2)}
        with np.errstate(divide="raise", invalid="raise", over="raise", under="ignore"):
            try:
                out = _eval(self.tree.body, env)
            except FloatingPointError as err:
                raise DomainError(f"evaluating {self.text!r}: {err}") from err
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(x1, x2).shape)

    def of_r(self, r):
        """Radial samples, extended evenly to r < 0.

        Overflow to +inf is allowed (a singularity at the origin is data for
        the admissibility test); a value undefined exactly at r = 0 is stored
        as +inf, anywhere else it is a domain error.
        """
        r = np.abs(np.asarray(r, dtype=float))
        if self.of_radius is not None:
            return np.asarray(self.of_radius(r), dtype=float)
        env = {"x1": r, "x2": np.zeros_like(r), "r": r}
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(_eval(self.tree.body, env), dtype=float), r.shape).copy()
        bad = np.isnan(out)
        if np.any(bad & (r > 0)):
            raise DomainError(f"evaluating {self.text!r}: undefined at r = {float(r[bad & (r > 0)][0]):.6g}")
        out[bad] = np.inf
        return out

    def field(self, grid: Grid2D) -> ScalarField:
        vals = np.full((grid.n, grid.n), np.nan)
        a = grid.active
        vals[a] = self(grid.x1[a], grid.x2[a])
        return ScalarField(grid, vals)

    def profile(self, m: int = 2001) -> RadialProfile:
        if not self.radial:
            raise ConfigurationError(f"f = {self.text!r} is not radial")
        if self.profile_factory is not None:
            return self.profile_factory(m)
        return RadialProfile.from_function(self.of_r, m, breakpoints=self.breakpoints)


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTS[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        return _UNOPS[type(node.op)](_eval(node.operand, env))
    if isinstance(node, ast.Call):
        return _FUNCS[node.func.id](_eval(node.args[0], env))
    raise ParseError("unsupported node")  # unreachable after validation


def _validate(node, names: set):
    if isinstance(node, ast.Expression):
        return _validate(node.body, names)
    pos = getattr(node, "col_offset", None)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ParseError(f"unsupported constant {node.value!r}", pos)
    elif isinstance(node, ast.Name):
        if node.id not in _VARS and node.id not in _CONSTS:
            raise ParseError(f"unknown name {node.id!r}", pos)
        names.add(node.id)
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ParseError("unsupported operator", pos)
        _validate(node.left, names)
        _validate(node.right, names)
    elif isinstance(node, ast.UnaryOp):
        if type(node.op) not in _UNOPS:
            raise ParseError("unsupported unary operator", pos)
        _validate(node.operand, names)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ParseError("unknown function", pos)
        if len(node.args) != 1 or node.keywords:
            raise ParseError(f"{node.func.id} takes exactly one argument", pos)
        _validate(node.args[0], names)
    else:
        raise ParseError(f"unsupported syntax {type(node).__name__}", pos)


def compile_expr(text: str) -> FExpr:
    """Compile an arithmetic expression over r, x1, x2 with + - * / ^ and
    exp, log, sin, cos, sqrt, abs."""
    src = text.strip()
    if not src:
        raise ParseError("empty expression", 0)
    if "**" in src:
        raise ParseError("use ^ for powers", src.index("**"))
    try:
        tree = ast.parse(src.replace("^", "**"), mode="eval")
    except SyntaxError as err:
        raise ParseError("syntax error", (err.offset or 1) - 1) from None
    names: set = set()
    _validate(tree, names)
    return FExpr(src, tree, frozenset(names))


_NAMED_F = {
    "paraboloid": "1",
    "saddle": "-1",
    "decreasing": "2-r",
    "holomorphic": "-exp(2*x1)",
    "quadratic": "1+r^2/4",
}


def compile_f(spec: str) -> FExpr:
    """Resolve ``const:c``, ``expr:<e>``, ``eps_step:<eps>``, ``preset:<name>``
    or a bare expression."""
    spec = spec.strip()
    kind, sep, arg = spec.partition(":")
    if not sep:
        kind, arg = ("preset", spec) if spec in _NAMED_F else ("expr", spec)
    if kind == "const":
        try:
            c = float(arg)
        except ValueError:
            raise ParseError(f"bad constant {arg!r}", len(kind) + 1) from None
        return compile_expr(repr(c))
    if kind == "expr":
        return compile_expr(arg)
    if kind == "preset":
        if arg not in _NAMED_F:
            raise ConfigurationError(f"unknown f preset {arg!r}; known: {sorted(_NAMED_F)}")
        return compile_expr(_NAMED_F[arg])
    if kind == "eps_step":
        try:
            eps = float(arg)
        except ValueError:
            raise ParseError(f"bad eps {arg!r}", len(kind) + 1) from None
        if not eps > 0:
            raise ConfigurationError("eps_step needs eps > 0")
        return FExpr(
            f"eps_step:{eps!r}",
            None,
            frozenset({"r"}),
            (0.5,),
            lambda m: eps_step(eps, m),
            lambda r: np.where(r <= 0.5, eps, 1.0),
        )
    raise ConfigurationError(f"unknown f kind {kind!r}")


def parse_f(text: str, grid: Grid2D | None = None, m: int = 2001):
    """RadialProfile when only r appears and no grid is given; ScalarField otherwise."""
    fx = compile_f(text)
    if grid is None:
        return fx.profile(m)
    return fx.field(grid)


# ----------------------------------------------------------------------------
# growth presets


def _r2():
    return X1 ** 2 + X2 ** 2


def _growth_presets():
    r2 = _r2()
    z = sy.zeros(3, 3)
    return {
        # v = r^2/2 with w = 0: S = grad v (x) grad v / 2, target curvature 1
        "paraboloid": dict(v=r2 / 2, w=(0, 0)),
        # same v with a nonzero in-plane displacement
        "scaling": dict(v=r2 / 2, w=(-X1 * r2 / 8, -X2 * r2 / 8)),
        "saddle": dict(v=(X1 ** 2 - X2 ** 2) / 2, w=(0, 0)),
        "compatible": dict(S=sy.Matrix([[X1 ** 2 / 2, X1 * X2 / 2], [X1 * X2 / 2, X2 ** 2 / 2]]), B=sy.eye(2)),
        # B has a nonzero row curl; S balances det B so only the first condition fails
        "incompatible-B": dict(S=sy.Matrix([[0, 0], [0, X1 ** 4 / 12]]), B=sy.Matrix([[0, X1], [X1, 0]])),
        "incompatible-S": dict(S=sy.Matrix([[X2 ** 2, 0], [0, 0]]), B=z[:2, :2]),
    }


GROWTH_PRESETS = tuple(_growth_presets())


@dataclass(frozen=True)
class GrowthChoice:
    spec: GrowthSpec
    v: sy.Expr | None
    w: tuple | None


def resolve_growth(text: str, gamma: float = 1.5) -> GrowthChoice:
    kind, sep, name = text.partition(":")
    if not sep:
        kind, name = "preset", text
    if kind != "preset" or name not in _growth_presets():
        raise ConfigurationError(f"unknown growth {text!r}; known presets: {', '.join(GROWTH_PRESETS)}")
    p = _growth_presets()[name]
    if "v" in p:
        spec = manufacture(p["v"], p["w"], gamma=gamma, name=name)
        return GrowthChoice(spec, sy.sympify(p["v"]), tuple(sy.sympify(c) for c in p["w"]))
    return GrowthChoice(GrowthSpec(p["S"], p["B"], gamma, name), None, None)


# ----------------------------------------------------------------------------
# artifacts

_GRID_ALIASES = {"disk": "unit_disk", "square": "unit_square", "unit_disk": "unit_disk", "unit_square": "unit_square"}


def parse_grid(text: str) -> tuple[str, int]:
    m = re.fullmatch(r"\s*([a-z_]+)\s*:\s*(\d+)\s*", text)
    if not m or m.group(1) not in _GRID_ALIASES:
        raise ConfigurationError(f"bad grid {text!r}; expected disk:<n> or square:<n>")
    return _GRID_ALIASES[m.group(1)], int(m.group(2))


def write_field_csv(path: Path, v: ScalarField, H: SymMatrixField | None = None) -> None:
    """Rows ``i,j,x1,x2,value[,a11,a12,a22]`` over active nodes, full precision."""
    g = v.grid
    with open(path, "w", newline="") as fh:
        fh.write(f"# grid={g.domain_kind} n={g.n}\n")
        I, J = np.nonzero(g.active)
        for i, j in zip(I, J):
            row = [str(i), str(j), "%.17g" % g.x1[i, j], "%.17g" % g.x2[i, j], "%.17g" % v.values[i, j]]
            if H is not None:
                row += ["%.17g" % H.a11[i, j], "%.17g" % H.a12[i, j], "%.17g" % H.a22[i, j]]
            fh.write(",".join(row) + "\n")


def read_field_csv(path: Path) -> ScalarField:
    with open(path) as fh:
        head = fh.readline()
        m = re.fullmatch(r"# grid=(\w+) n=(\d+)\s*", head)
        if not m:
            raise ConfigurationError(f"{path}: missing '# grid=<kind> n=<n>' header")
        g = make_grid(m.group(1), int(m.group(2)))
        vals = np.full((g.n, g.n), np.nan)
        for row in csv.reader(fh):
            vals[int(row[0]), int(row[1])] = float(row[4])
    if np.any(np.isnan(vals[g.active])):
        raise ConfigurationError(f"{path}: missing active nodes")
    return ScalarField(g, vals)


def write_profile_csv(path: Path, prof: RadialProfile) -> None:
    """Rows ``r,value`` under a ``# kind=<kind>`` header."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# kind={prof.kind}\n")
        for r, val in zip(prof.r_nodes, prof.values):
            fh.write("%.17g,%.17g\n" % (r, val))


def read_profile_csv(path: Path) -> RadialProfile:
    with open(path) as fh:
        head = fh.readline()
        m = re.fullmatch(r"# kind=(\w+)\s*", head)
        if not m:
            raise ConfigurationError(f"{path}: missing '# kind=<kind>' header")
        data = np.array([[float(x) for x in row] for row in csv.reader(fh)])
    return RadialProfile(data[:, 0], data[:, 1], m.group(1))


def write_table_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_summary(out: Path, summary: dict) -> None:
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------------
# commands


def _start_field(choice: str, fx: FExpr, grid: Grid2D) -> ScalarField:
    if choice == "default":
        if fx.radial:
            prof = fx.profile()
            if prof.c > 0:
                return radial_minimizer(prof, check=False).lift(grid)
        choice = "paraboloid"
    if choice == "paraboloid":
        f = fx.field(grid)
        w = grid.quad_weights[grid.active]
        mean = float(np.dot(w, f.vec) / w.sum())
        if mean < 0:
            return saddle_family(0.0, grid) * np.sqrt(-mean)
        return grid.sample(lambda x, y: np.sqrt(mean) * (x * x + y * y) / 2)
    if choice.startswith("saddle:"):
        return saddle_family(float(choice.split(":", 1)[1]), grid)
    if choice.startswith("scaled-paraboloid:"):
        s = float(choice.split(":", 1)[1])
        return grid.sample(lambda x, y: s * (x * x + y * y) / 2)
    raise ConfigurationError(f"unknown start {choice!r}; use default, paraboloid, saddle:<theta>, scaled-paraboloid:<s>")


def _gradient_audit(grid: Grid2D, f: ScalarField, v0: ScalarField, mode: str, seed: int, k: int = 10) -> float:
    """Largest relative error of the analytic directional derivative in k random directions."""
    rng = np.random.default_rng(seed)
    obj = PenalizedObjective(grid, f.vec, mode)
    x = v0.vec
    lam = rng.standard_normal(x.size)
    mu = 10.0
    _, gr = obj.value_grad(x, lam, mu)
    worst = 0.0
    for _ in range(k):
        d = rng.standard_normal(x.size)
        d /= np.linalg.norm(d)
        fd = central_difference(lambda s: obj(x + s * d, lam, mu), 1e-4)
        an = float(gr @ d)
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-300))
    return worst


def central_difference(phi: Callable[[float], float], t: float) -> float:
    """phi'(0) by Richardson-extrapolated central differences (error O(t^4))."""
    d1 = (phi(t) - phi(-t)) / (2 * t)
    d2 = (phi(t / 2) - phi(-t / 2)) / t
    return (4 * d2 - d1) / 3


def cmd_solve(a, out: Path) -> tuple[dict, int]:
    kind, n = parse_grid(a.grid)
    grid = make_grid(kind, n)
    fx = compile_f(a.f)
    f = fx.field(grid)
    cfg = a.solver_config
    v0 = _start_field(a.start, fx, grid)
    fn = constrained_minimize if cfg.mode == "equality" else relaxed_minimize
    rep = fn(f, cfg, v0)
    H = hessian(rep.v)
    summary = {
        "command": "solve",
        "f": fx.text,
        "grid": {"kind": kind, "n": n},
        "mode": cfg.mode,
        "start": a.start,
        **rep.summary(),
        "energy_over_2pi": rep.energy / (2 * np.pi),
        "det_residual_core": (det2(H) - f).max_abs(grid.core),
        "gradient_check_rel_err": _gradient_audit(grid, f, v0, cfg.mode, a.seed),
        "seed": a.seed,
    }
    if fx.radial:
        prof = fx.profile()
        if prof.c > 0 and radial_admissible(prof).admissible:
            summary["radial_energy"] = float(radial_energy(prof))
    write_field_csv(out / "v.csv", rep.v, H)
    write_field_csv(out / "multiplier.csv", rep.multiplier)
    if rep.psi is not None:
        write_field_csv(out / "psi.csv", rep.psi)
    write_table_csv(out / "trace.csv", ["outer", "energy", "violation"], [(k + 1, e, r) for k, (e, r) in enumerate(rep.trace)])
    return summary, EXIT_OK if rep.converged else EXIT_NONCONVERGED


def cmd_radial(a, out: Path) -> tuple[dict, int]:
    fx = compile_f(a.f)
    prof = fx.profile(a.m)
    adm = radial_admissible(prof)
    summary = {"command": "radial", "f": fx.text, "m": a.m, "admissibility": str(adm), "estimates": adm.estimates}
    if not adm.admissible or prof.c <= 0:
        summary["admissible"] = False
        return summary, EXIT_OK
    v = radial_minimizer(prof, check=False)
    lam = lambda_multiplier(prof)
    E = radial_energy(prof)
    el = radial_el_check(v, lam)
    summary.update(
        admissible=True,
        energy=E.total,
        term_hessian_rr=E.term_hessian_rr,
        term_hessian_tt=E.term_hessian_tt,
        term_hessian_tt_check=E.term_hessian_tt_check,
        lambda_at_0=float(lam.values[0]),
        lambda_at_1=float(lam.values[-1]),
        el_interior=el.interior,
        el_boundary_normal=el.boundary_normal,
        el_boundary_third=el.boundary_third,
        el_boundary_tangential=el.boundary_tangential,
    )
    write_table_csv(out / "profile.csv", ["r", "f", "v", "dv", "lambda"],
                    zip(prof.r_nodes, prof.values, v.values, v.meta["dv"], lam.values))
    for name, p in (("f", prof), ("v", v), ("lambda", lam)):
        write_profile_csv(out / f"{name}_profile.csv", p)
    return summary, EXIT_OK


def cmd_family(a, out: Path) -> tuple[dict, int]:
    kind, n = parse_grid(a.grid)
    grid = make_grid(kind, n)
    fx = compile_f(a.f)
    f = fx.field(grid)
    thetas = _floats(a.thetas)
    rows = family_table(f, thetas)
    core = grid.core
    table = []
    for k, row in enumerate(rows):
        H = hessian(row["v"])
        det_core = (det2(H) - f).max_abs(core)
        lap_core = H.trace().max_abs(core)
        table.append((row["theta"], row["energy"], det_core, lap_core))
        write_field_csv(out / f"v_theta{k}.csv", row["v"], H)
    E = np.array([t[1] for t in table])
    summary = {
        "command": "family",
        "f": fx.text,
        "grid": {"kind": kind, "n": n},
        "thetas": thetas,
        "energies": E.tolist(),
        "energy_spread": float((E.max() - E.min()) / E.mean()),
        "det_residual_core": max(t[2] for t in table),
        "laplacian_core": max(t[3] for t in table),
        "h2": grid.h ** 2,
    }
    write_table_csv(out / "family.csv", ["theta", "energy", "det_residual_core", "laplacian_core"], table)
    return summary, EXIT_OK


def cmd_scaling(a, out: Path) -> tuple[dict, int]:
    g = resolve_growth(a.growth, a.gamma)
    if g.v is None:
        raise ConfigurationError(f"growth {a.growth!r} carries no manufactured (v, w); choose a manufactured preset")
    hs = tuple(_floats(a.h_list)) if a.h_list else tuple(2.0 ** -k for k in range(3, 9))
    kind, n = parse_grid(a.grid)
    exp = ScalingExperiment(g.spec, g.v, g.w, hs, (n, a.quad_z), domain_kind=kind)
    res = run_scaling(exp)
    target = a.gamma + 2
    ok_slope = res.slope is not None and abs(res.slope - target) <= 0.15
    ok_limit = res.limit is not None and abs(res.limit - res.expected_limit) <= 0.2 * abs(res.expected_limit)
    summary = {
        "command": "scaling",
        "growth": a.growth,
        "gamma": a.gamma,
        "h_list": list(hs),
        "quad": [n, a.quad_z],
        **res.summary(),
        "target_slope": target,
        "verdict": "pass" if ok_slope and ok_limit else "fail",
    }
    write_table_csv(out / "scaling.csv", ["h", "energy", "ratio"], res.rows())
    return summary, EXIT_OK


def cmd_check_el(a, out: Path) -> tuple[dict, int]:
    fx = compile_f(a.f)
    prof = fx.profile(a.m)
    v = radial_minimizer(prof)
    lam = lambda_multiplier(prof)
    rad = radial_el_check(v, lam)
    rows = []
    for n in _ints(a.ns):
        grid = make_grid("unit_disk", n)
        rows.append((n, grid.h, *el_residual(v.lift(grid), lam.lift(grid))))
    hs = np.array([r[1] for r in rows])
    ei = np.array([r[2] for r in rows])
    order = float(np.polyfit(np.log(hs), np.log(ei), 1)[0]) if len(rows) > 1 and np.all(ei > 0) else None
    summary = {
        "command": "check-el",
        "f": fx.text,
        "radial": {"interior": rad.interior, "boundary_normal": rad.boundary_normal,
                   "boundary_third": rad.boundary_third, "boundary_tangential": rad.boundary_tangential},
        "grid_interior": ei.tolist(),
        "interior_order": order,
    }
    write_table_csv(out / "el.csv", ["n", "h", "interior", "bdry_normal", "bdry_third"], rows)
    return summary, EXIT_OK


def cmd_check_compat(a, out: Path) -> tuple[dict, int]:
    g = resolve_growth(a.growth, a.gamma)
    kind, n = parse_grid(a.grid)
    rep = compat_check(g.spec, make_grid(kind, n))
    summary = {"command": "check-compat", "growth": a.growth, "verdict": str(rep), "compatible": rep.compatible,
               "curl_residual": rep.curl_residual, "gauss_residual": rep.gauss_residual}
    return summary, EXIT_OK


def cmd_matching(a, out: Path) -> tuple[dict, int]:
    g = resolve_growth(a.growth, a.gamma)
    if g.v is None:
        raise ConfigurationError("matching needs a manufactured growth preset")
    kind, n = parse_grid(a.grid)
    grid = make_grid(kind, n)
    vfn = sy.lambdify((X1, X2), g.v, "numpy")
    v = grid.sample(lambda x, y: vfn(x, y) + 0 * x)
    S2 = g.spec.sym_S2
    Sf = [sy.lambdify((X1, X2), S2[i, j], "numpy") for i, j in ((0, 0), (0, 1), (1, 1))]
    S = SymMatrixField(grid, *[np.where(grid.active, fn(grid.x1, grid.x2) + 0 * grid.x1, np.nan) for fn in Sf])
    # second-order metric correction eps * (sym S)^2, so that s_eps vanishes with eps
    SS = SymMatrixField(grid, S.a11 ** 2 + S.a12 ** 2, S.a12 * (S.a11 + S.a22), S.a12 ** 2 + S.a22 ** 2)
    rows = []
    for k, eps in enumerate(_floats(a.eps)):
        res = matching_correct(v, S, SS.scale(eps), eps)
        zr = res.z.max_abs() / eps if eps > 0 else 0.0
        rows.append((eps, res.residual, zr, res.kappa_max, len(res.newton_trace)))
        write_field_csv(out / f"z_eps{k}.csv", res.z)
    ratios = [rows[k][2] / rows[k + 1][2] for k in range(len(rows) - 1) if rows[k + 1][2] > 0]
    summary = {
        "command": "matching",
        "growth": a.growth,
        "grid": {"kind": kind, "n": n},
        "eps": [r[0] for r in rows],
        "phi_residual": [r[1] for r in rows],
        "z_over_eps": [r[2] for r in rows],
        "ratios": ratios,
        "kappa_max": [r[3] for r in rows],
    }
    write_table_csv(out / "matching.csv", ["eps", "phi_residual", "z_over_eps", "kappa_max", "newton_steps"], rows)
    return summary, EXIT_OK


_HANDLERS = {
    "solve": cmd_solve,
    "radial": cmd_radial,
    "family": cmd_family,
    "scaling": cmd_scaling,
    "check-el": cmd_check_el,
    "check-compat": cmd_check_compat,
    "matching": cmd_matching,
}


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    try:
        return [float(eval_scalar(t)) for t in str(text).split(",") if t.strip()]
    except (ValueError, ConfigurationError) as err:
        raise ConfigurationError(f"bad number list {text!r}: {err}") from None


def _ints(text) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"bad integer list {text!r}") from None


def eval_scalar(text: str) -> float:
    """A constant expression such as ``2^-3`` or ``0.7``."""
    fx = compile_expr(text)
    if fx.names & set(_VARS):
        raise ConfigurationError(f"{text!r} is not a constant")
    return float(fx(0.0, 0.0))


# ----------------------------------------------------------------------------
# argument handling

_DEFAULTS = {
    "f": "const:1",
    "grid": "disk:65",
    "mode": "eq",
    "out": "ma_plate_out",
    "seed": "0",
    "gamma": "1.5",
    "h_list": "",
    "growth": "preset:scaling",
    "start": "default",
    "thetas": "0,0.7,1.4,2.1",
    "m": "2001",
    "ns": "65,129,257",
    "eps": "0.02,0.01,0.005",
    "quad_z": "3",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ma-plate", description="Monge-Ampere constrained plate experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI file with [run] and [solver] sections")
        s.add_argument("--f", help="const:<c>, expr:<e>, eps_step:<eps>, preset:<name> or a bare expression")
        s.add_argument("--grid", help="<kind>:<n>, kind in disk, square")
        s.add_argument("--mode", choices=("eq", "ineq"))
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--gamma", type=float)
        s.add_argument("--h-list", dest="h_list", help="comma-separated, e.g. 2^-3,2^-4")
        s.add_argument("--growth", help="preset:<name>")
        s.add_argument("--start", help="default, paraboloid, saddle:<theta>, scaled-paraboloid:<s>")
        s.add_argument("--thetas")
        s.add_argument("--m", type=int)
        s.add_argument("--ns")
        s.add_argument("--eps")
        s.add_argument("--quad-z", dest="quad_z", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _solver_config(section: dict, mode: str) -> SolverConfig:
    kw = {}
    types = {f.name: f.type for f in fields(SolverConfig)}
    for key, raw in section.items():
        if key == "mode":
            raise ConfigurationError("set mode under [run] as eq or ineq")
        if key not in types:
            raise ConfigurationError(f"unknown solver key {key!r}")
        t = types[key]
        if t in ("bool", bool):
            kw[key] = str(raw).strip().lower() in ("1", "true", "on", "yes")
        elif t in ("int", int):
            kw[key] = int(raw)
        elif t in ("float", float):
            kw[key] = float(raw)
        else:
            kw[key] = str(raw).strip()
    kw["mode"] = "equality" if mode == "eq" else "inequality"
    return SolverConfig(**kw)


def resolve_args(ns: argparse.Namespace) -> argparse.Namespace:
    """Merge defaults < config file < command-line flags."""
    run = dict(_DEFAULTS)
    solver: dict = {}
    if ns.config:
        cp = configparser.ConfigParser()
        if not cp.read(ns.config):
            raise ConfigurationError(f"cannot read config {ns.config!r}")
        for sec in cp.sections():
            if sec not in ("run", "solver"):
                raise ConfigurationError(f"unknown config section [{sec}]")
        if cp.has_section("run"):
            for k, v in cp.items("run"):
                k = k.replace("-", "_")
                if k not in run:
                    raise ConfigurationError(f"unknown run key {k!r}")
                run[k] = v
        if cp.has_section("solver"):
            solver = dict(cp.items("solver"))
    for k in run:
        val = getattr(ns, k, None)
        if val is not None:
            run[k] = val
    out = argparse.Namespace(command=ns.command, verbose=ns.verbose, **run)
    out.seed = int(out.seed)
    out.gamma = float(out.gamma)
    out.m = int(out.m)
    out.quad_z = int(out.quad_z)
    if out.mode not in ("eq", "ineq"):
        raise ConfigurationError("mode must be eq or ineq")
    out.solver_config = _solver_config(solver, out.mode)
    return out


def _limit_threads():
    raw = os.environ.get("MA_PLATE_THREADS")
    if not raw:
        return None
    try:
        k = int(raw)
    except ValueError:
        raise ConfigurationError(f"MA_PLATE_THREADS must be an integer, got {raw!r}") from None
    if k < 1:
        raise ConfigurationError("MA_PLATE_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=k)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        a = resolve_args(ns)
        limiter = _limit_threads()
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        try:
            summary, status = _HANDLERS[a.command](a, out)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (ConfigurationError, DomainError, NotAdmissibleError, IntegrabilityError, ValueError) as err:
        print(f"ma-plate: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except NonConvergenceError as err:
        print(f"ma-plate: not converged: {err}", file=sys.stderr)
        out.mkdir(parents=True, exist_ok=True)
        write_summary(out, {"command": a.command, "converged": False, "error": str(err)})
        return EXIT_NONCONVERGED
    summary["version"] = __version__
    summary["exit_status"] = status
    write_summary(out, summary)
    print(json.dumps(_jsonable({k: v for k, v in summary.items() if not isinstance(v, (list, dict))}), sort_keys=True))
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
