"""Convergence studies, error norms, rate fits and CSV/JSON output."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fespace import Evaluable, SmoothFunction, hessian_oscillation, to_reference
from .forms import HESS, HESS_WEIGHTS, SchemeParams, jump_terms
from .mesh import build_lshape, build_structured_square, containing_triangles, uniform_refine
from .problems import (
    DiscreteProblem, ProblemSpec, SourceFunctional, manufactured,
)
from .quadrature import parent_points, split_points
from .reference import DX, DY, VALUE
from .solver import newton_solve
from .transfer import morley_interpolate

NORMS = ("energy_pw", "H1_broken", "L2", "energy_h")
DEFAULT_NORMS = ("energy_pw", "H1_broken", "L2")
ERROR_DEGREE = 10


class StudyError(RuntimeError):
    """Failure inside a study, annotated with the level."""

    def __init__(self, level, cause):
        super().__init__(f"level {level}: {type(cause).__name__}: {cause}")
        self.level = level
        self.cause = cause


# --- evaluable combinations ------------------------------------------------------------

class Combination(Evaluable):
    """Linear combination ``sum c_i f_i`` of evaluable functions on one mesh."""

    def __init__(self, terms):
        self.terms = [(float(c), f) for c, f in terms]
        self.mesh = self.terms[0][1].mesh
        self.piecewise_split = any(getattr(f, "piecewise_split", False) for _, f in self.terms)

    def evaluate_cells(self, cells, ref_points, sub=None):
        return sum(c * f.evaluate_cells(cells, ref_points, sub) for c, f in self.terms)

    def tabulate(self, ref_points, sub=None):
        return sum(c * f.tabulate(ref_points, sub) for c, f in self.terms)


class NestedFunction(Evaluable):
    """Function of a coarse mesh seen on a nested finer mesh.

    Every fine triangle must lie inside one coarse triangle; the ancestor is
    found geometrically from the fine centroids.
    """

    def __init__(self, coarse, fine_mesh):
        self.coarse = coarse
        self.mesh = fine_mesh
        self.ancestors = containing_triangles(
            coarse.mesh, fine_mesh.vertices[fine_mesh.triangles].mean(axis=1))
        self.piecewise_split = getattr(coarse, "piecewise_split", False)

    def evaluate_cells(self, cells, ref_points, sub=None):
        cells = np.asarray(cells)
        p0 = self.mesh.vertices[self.mesh.triangles[cells, 0]]
        x = p0 + np.einsum("nij,nj->ni", self.mesh.jacobians[cells], ref_points)
        parents = self.ancestors[cells]
        xi = to_reference(self.coarse.mesh, parents, x)
        return self.coarse.evaluate_cells(parents, xi)


# --- error norms -----------------------------------------------------------------------------

def _as_evaluable(f, mesh):
    if isinstance(f, Evaluable):
        return f
    if hasattr(f, "derivatives"):
        return SmoothFunction(mesh, f.derivatives)
    return SmoothFunction(mesh, f)


def norms_of(e, which, degree=ERROR_DEGREE):
    """Broken norms of an evaluable function: ``energy_pw``, ``H1_broken``, ``L2``, ``energy_h``."""
    which = list(which)
    for tag in which:
        if tag not in NORMS:
            raise ValueError(f"unknown norm {tag!r}; expected one of {NORMS}")
    ps = split_points(degree) if getattr(e, "piecewise_split", False) else parent_points(degree)
    d = e.tabulate(ps.points, ps.sub)
    w = ps.weights[None, :] * 2.0 * e.mesh.areas[:, None]
    sq = {
        "energy_pw": float(np.sum(w * np.einsum("kqd,d->kq", d[..., HESS] ** 2, HESS_WEIGHTS))),
        "H1_broken": float(np.sum(w * (d[..., DX] ** 2 + d[..., DY] ** 2))),
        "L2": float(np.sum(w * d[..., VALUE] ** 2)),
    }
    if "energy_h" in which:
        sq["energy_h"] = sq["energy_pw"] + jump_terms(e)["h"]
    return {tag: float(np.sqrt(max(sq[tag], 0.0))) for tag in which}


def error_norms(exact, u_h, which=DEFAULT_NORMS):
    """Errors ``u - u_h`` in the requested broken norms.

    ``exact`` is a manufactured field (anything with ``derivatives(x, y)``),
    a derivative callable or an evaluable function on the mesh of ``u_h``.
    ``energy_h`` adds the jump seminorm ``j_h`` to the piecewise energy.
    """
    u = _as_evaluable(exact, u_h.mesh)
    return norms_of(Combination([(1.0, u), (-1.0, u_h)]), which)


def fit_rate(h, errors, last=3):
    """Least-squares slope of ``log(error)`` against ``log(h)`` over the last ``last`` levels.

    Returns ``(rate, residual)`` with the root-mean-square fit residual.
    """
    h = np.asarray(h, dtype=float)[-last:]
    e = np.asarray(errors, dtype=float)[-last:]
    if len(h) < 2 or np.any(e <= 0) or not np.all(np.isfinite(e)):
        return float("nan"), float("nan")
    A = np.column_stack([np.log(h), np.ones_like(h)])
    coef, *_ = np.linalg.lstsq(A, np.log(e), rcond=None)
    resid = np.log(e) - A @ coef
    return float(coef[0]), float(np.sqrt(np.mean(resid ** 2)))


# --- configuration ----------------------------------------------------------------------------

def build_mesh(domain, level):
    if domain == "square":
        return build_structured_square(2 ** int(level))
    if domain == "lshape":
        return uniform_refine(build_lshape(), int(level))
    raise ValueError(f"unknown domain {domain!r}; expected 'square' or 'lshape'")


@dataclass
class StudyConfig:
    """Settings of one convergence study.

    Either ``solution`` (a manufactured-solution catalog name) or
    ``point_load`` (``(x, y, magnitude)``) selects the right-hand side.
    """

    name: str = "study"
    kind: str = "biharmonic"
    scheme: str = "morley"
    R: str = "JIM"
    S: str = "JIM"
    params: SchemeParams = field(default_factory=SchemeParams)
    domain: str = "square"
    levels: tuple = (2, 3, 4, 5)
    solution: str = "sin2"
    point_load: tuple = None
    norms: tuple = DEFAULT_NORMS
    output: str = None
    reference_levels: int = 2
    tol: float = 1e-10
    max_iter: int = 30
    init: str = "linear"

    def __post_init__(self):
        self.levels = tuple(int(l) for l in self.levels)
        if not self.levels:
            raise ValueError("level range is empty")
        if list(self.levels) != sorted(set(self.levels)):
            raise ValueError("levels must be strictly increasing")
        self.norms = tuple(self.norms)
        for tag in self.norms:
            if tag not in NORMS:
                raise ValueError(f"unknown norm {tag!r}; expected one of {NORMS}")
        if self.init not in ("linear", "interpolant"):
            raise ValueError("init must be 'linear' or 'interpolant'")

    def problem_spec(self):
        if self.point_load is not None:
            x, y, mag = self.point_load
            src = (SourceFunctional.point((x, y), mag),)
        else:
            src = self.exact().sources(self.kind)
        return ProblemSpec(self.kind, self.scheme, self.params, self.R, self.S, src,
                           self.tol, self.max_iter)

    def exact(self):
        return None if self.point_load is not None else manufactured(self.solution, self.kind)


@dataclass
class StudyResult:
    """Per-level table and fitted rates."""

    config: dict
    levels: list
    rates: dict
    wall_time: float = 0.0
    reference: str = "exact"

    def column(self, key):
        return [row[key] if key in row else row["errors"][key] for row in self.levels]

    def to_dict(self):
        return {"config": self.config, "levels": self.levels, "rates": self.rates,
                "wall_time": self.wall_time, "reference": self.reference}


def _config_dict(config):
    d = asdict(config)
    d["params"] = asdict(config.params)
    return d


def solve_level(config, level, mesh=None):
    """Build, assemble and Newton-solve one level; returns ``(problem, report)``."""
    mesh = mesh or build_mesh(config.domain, level)
    problem = DiscreteProblem(config.problem_spec(), mesh)
    initial = None
    if config.init == "interpolant" and config.point_load is None:
        initial = interpolant_coefficients(problem, config.exact())
    try:
        report = newton_solve(problem, initial)
    except Exception as err:
        raise StudyError(level, err) from err
    return problem, report


def interpolant_coefficients(problem, exact):
    """Coefficients of the Morley interpolant of the exact fields, carried into the scheme space."""
    parts = []
    for fld in exact.fields[: problem.ncomp]:
        vm = morley_interpolate(fld.derivatives, problem.mesh)
        if problem.space.scheme == "morley":
            parts.append(vm.coeffs)
        else:
            parts.append(problem.space.from_nodal(vm.nodal()))
    return np.concatenate(parts)


def run_study(config):
    """Solve every level, compute errors, fit rates and optionally write CSV/JSON.

    Without a manufactured solution the errors are taken against the solution
    ``reference_levels`` levels above the finest one, on the reference mesh
    (so ``energy_h`` then uses the jump terms of the reference mesh).
    """
    t0 = time.perf_counter()
    rows = []
    exact = config.exact()
    solutions = {}
    for level in config.levels:
        problem, report = solve_level(config, level)
        funcs = problem.functions(report.solution)
        solutions[level] = funcs
        row = {
            "level": level,
            "h_max": problem.mesh.h_max,
            "dofs": problem.size,
            "iterations": report.iterations,
            "errors": {},
            "newton": report.to_dict(),
        }
        if exact is not None:
            row["errors"] = _component_errors(exact.fields, funcs, config.norms)
        rows.append(row)

    reference = "exact"
    if exact is None:
        reference = f"fine-mesh reference at level {config.levels[-1] + config.reference_levels}"
        ref_level = config.levels[-1] + config.reference_levels
        problem, report = solve_level(config, ref_level)
        ref_funcs = problem.functions(report.solution)
        for row in rows:
            coarse = solutions[row["level"]]
            errs = {}
            for tag in config.norms:
                total = 0.0
                for cf, rf in zip(coarse, ref_funcs):
                    diff = Combination([(1.0, rf), (-1.0, NestedFunction(cf, rf.mesh))])
                    total += norms_of(diff, [tag])[tag] ** 2
                errs[tag] = float(np.sqrt(total))
            row["errors"] = errs

    h = [row["h_max"] for row in rows]
    rates = {}
    for tag in config.norms:
        rate, resid = fit_rate(h, [row["errors"][tag] for row in rows])
        rates[tag] = {"rate": rate, "residual": resid}
    result = StudyResult(_config_dict(config), rows, rates, time.perf_counter() - t0, reference)
    if config.output:
        write_outputs(result, config.output, config.name)
    return result


def _component_errors(fields, funcs, which):
    total = {tag: 0.0 for tag in which}
    for fld, uh in zip(fields, funcs):
        e = error_norms(fld, uh, which)
        for tag in which:
            total[tag] += e[tag] ** 2
    return {tag: float(np.sqrt(v)) for tag, v in total.items()}


# --- scheme comparison ----------------------------------------------------------------------------

COMPARE_SCHEMES = ("morley", "dg", "c0ip")


def compare_schemes(config, schemes=COMPARE_SCHEMES, degenerate_tol=1e-10):
    """Errors ``||u - u_h||_h`` of several schemes against ``||(1 - Pi_0) D^2 u||``.

    ``S`` is forced to ``J I_M``.  Returns a dict with one row per level;
    pairwise ratios are ``None`` when every quantity is below
    ``degenerate_tol`` (exactly representable solutions).
    """
    t0 = time.perf_counter()
    exact = config.exact()
    if exact is None:
        raise ValueError("scheme comparison needs a manufactured solution")
    rows = []
    for level in config.levels:
        mesh = build_mesh(config.domain, level)
        row = {"level": level, "h_max": mesh.h_max, "errors": {}, "iterations": {}}
        for scheme in schemes:
            cfg = StudyConfig(**{**asdict(config), "params": config.params,
                                 "scheme": scheme, "S": "JIM", "output": None})
            problem, report = solve_level(cfg, level, mesh)
            funcs = problem.functions(report.solution)
            row["errors"][scheme] = _component_errors(exact.fields, funcs, ["energy_h"])["energy_h"]
            row["iterations"][scheme] = report.iterations
        osc = 0.0
        for fld in exact.fields:
            osc += hessian_oscillation(SmoothFunction(mesh, fld.derivatives), ERROR_DEGREE) ** 2
        row["errors"]["best_approx"] = float(np.sqrt(osc))
        vals = row["errors"]
        keys = list(vals)
        if max(vals.values()) <= degenerate_tol:
            row["ratios"] = None
        else:
            row["ratios"] = {f"{a}/{b}": vals[a] / vals[b]
                             for i, a in enumerate(keys) for b in keys[i + 1:]}
        rows.append(row)
    h = [r["h_max"] for r in rows]
    rates = {}
    for key in list(schemes) + ["best_approx"]:
        rate, resid = fit_rate(h, [r["errors"][key] for r in rows])
        rates[key] = {"rate": rate, "residual": resid}
    result = {"config": _config_dict(config), "levels": rows, "rates": rates,
              "wall_time": time.perf_counter() - t0}
    if config.output:
        _write_compare(result, config.output, config.name)
    return result


# --- output ---------------------------------------------------------------------------------------

def write_outputs(result, directory, name):
    """Write ``<name>.csv`` (level table and rate lines) and ``<name>.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    norms = list(result.rates)
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "h_max", "dofs", "iterations"] + norms)
        for row in result.levels:
            w.writerow([row["level"], repr(row["h_max"]), row["dofs"], row["iterations"]]
                       + [repr(row["errors"][t]) for t in norms])
        for t in norms:
            w.writerow(["#rate", t, repr(result.rates[t]["rate"]), repr(result.rates[t]["residual"])])
    with open(out / f"{name}.json", "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
    return out / f"{name}.csv", out / f"{name}.json"


def read_study_csv(path):
    """Parse a CSV written by :func:`write_outputs` into ``(levels, rates)``."""
    levels, rates = [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        norms = header[4:]
        for rec in reader:
            if rec[0] == "#rate":
                rates[rec[1]] = {"rate": float(rec[2]), "residual": float(rec[3])}
                continue
            levels.append({
                "level": int(rec[0]), "h_max": float(rec[1]), "dofs": int(rec[2]),
                "iterations": int(rec[3]),
                "errors": {t: float(v) for t, v in zip(norms, rec[4:])},
            })
    return levels, rates


def _write_compare(result, directory, name):
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(result["levels"][0]["errors"])
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "h_max"] + keys)
        for row in result["levels"]:
            w.writerow([row["level"], repr(row["h_max"])] + [repr(row["errors"][k]) for k in keys])
    with open(out / f"{name}.json", "w") as fh:
        json.dump(result, fh, indent=2)


__all__ = [
    "StudyConfig", "StudyResult", "StudyError", "run_study", "compare_schemes", "error_norms",
    "norms_of", "fit_rate", "build_mesh", "write_outputs", "read_study_csv", "Combination",
    "NestedFunction", "solve_level", "NORMS",
]
