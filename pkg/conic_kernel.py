"""Small modelling layer over cvxpy for the beamforming subproblems.

A ConicProblem maximizes a sum of linear, sqrt-of-linear and log2(1 + linear)
terms over Hermitian PSD matrices and nonnegative scalars, subject to linear
trace constraints and convex quadratic constraints sum w * expr^2 <= rhs.
"""

import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from pipeline_log import PipelineLogger, ts_print

# --- CONFIGURABLE CONSTANTS ---
DEFAULT_TOLERANCE = 1e-7
DEFAULT_MAX_ITERS = 200
CONIC_SOLVER = os.environ.get("ISAC_CONIC_SOLVER", "")
PREFERRED_SOLVERS = ("CLARABEL", "SCS")
SCS_ITER_FACTOR = 50  # first-order solver needs far more (cheaper) iterations
SCS_MIN_EPS = 1e-6
DUMP_FORMAT_VERSION = 1

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"
SENSES = ("<=", ">=", "==")


@dataclass
class LinearTrace:
    """sum_j Re Tr(A_j X_j) + sum_i b_i y_i + constant."""

    matrix_terms: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    scalar_terms: List[Tuple[int, float]] = field(default_factory=list)
    constant: float = 0.0

    def add_matrix(self, index, coef):
        self.matrix_terms.append((int(index), np.asarray(coef, dtype=complex)))
        return self

    def add_scalar(self, index, coef):
        self.scalar_terms.append((int(index), float(coef)))
        return self

    def scaled(self, factor):
        return LinearTrace(
            matrix_terms=[(j, factor * A) for j, A in self.matrix_terms],
            scalar_terms=[(i, factor * b) for i, b in self.scalar_terms],
            constant=factor * self.constant,
        )

    def evaluate(self, matrices, scalars) -> float:
        total = self.constant
        for j, A in self.matrix_terms:
            total += float(np.real(np.sum(A.T * matrices[j])))
        for i, b in self.scalar_terms:
            total += b * float(scalars[i])
        return total

    def to_cvxpy(self, X, y):
        parts = [cp.real(cp.trace(A @ X[j])) for j, A in self.matrix_terms]
        parts += [b * y[i] for i, b in self.scalar_terms]
        if not parts:
            return cp.Constant(self.constant)
        return sum(parts[1:], parts[0]) + self.constant


@dataclass
class ObjectiveTerm:
    kind: str  # "linear", "sqrt" or "log2" (log2(1 + expr))
    expr: LinearTrace
    weight: float = 1.0

    def evaluate(self, matrices, scalars) -> float:
        value = self.expr.evaluate(matrices, scalars)
        if self.kind == "linear":
            return self.weight * value
        if self.kind == "sqrt":
            return self.weight * np.sqrt(max(value, 0.0))
        if self.kind == "log2":
            return self.weight * np.log2(1.0 + max(value, 0.0))
        raise ValueError(f"unknown objective term kind {self.kind!r}")

    def to_cvxpy(self, X, y):
        expr = self.expr.to_cvxpy(X, y)
        if self.kind == "linear":
            return self.weight * expr
        if self.kind == "sqrt":
            return self.weight * cp.sqrt(expr)
        if self.kind == "log2":
            return (self.weight / np.log(2.0)) * cp.log(1.0 + expr)
        raise ValueError(f"unknown objective term kind {self.kind!r}")


@dataclass
class Constraint:
    expr: LinearTrace
    sense: str
    bound: float
    label: str = ""

    def residual(self, matrices, scalars) -> float:
        """Violation relative to max(1, |bound|)."""
        value = self.expr.evaluate(matrices, scalars)
        scale = max(1.0, abs(self.bound))
        if self.sense == "<=":
            return max(0.0, value - self.bound) / scale
        if self.sense == ">=":
            return max(0.0, self.bound - value) / scale
        return abs(value - self.bound) / scale


@dataclass
class QuadraticConstraint:
    """sum_i w_i * expr_i^2 <= rhs."""

    terms: List[Tuple[float, LinearTrace]]
    rhs: LinearTrace
    label: str = ""

    def residual(self, matrices, scalars) -> float:
        lhs = sum(w * e.evaluate(matrices, scalars) ** 2 for w, e in self.terms)
        rhs = self.rhs.evaluate(matrices, scalars)
        return max(0.0, lhs - rhs) / max(1.0, abs(rhs))


@dataclass
class ConicProblem:
    matrix_count: int
    dimension: int
    scalar_count: int = 0
    objective: List[ObjectiveTerm] = field(default_factory=list)
    constraints: List[Constraint] = field(default_factory=list)
    quadratic: List[QuadraticConstraint] = field(default_factory=list)
    name: str = "problem"

    def check(self):
        for term in self.objective:
            if term.kind not in ("linear", "sqrt", "log2"):
                raise ValueError(f"unknown objective term kind {term.kind!r}")
            if term.kind in ("sqrt", "log2") and term.weight < 0:
                raise ValueError(f"{term.kind} term weight must be nonnegative for a concave objective")
        for con in self.constraints:
            if con.sense not in SENSES:
                raise ValueError(f"unknown constraint sense {con.sense!r}")
        for expr in self._expressions():
            for j, A in expr.matrix_terms:
                if not 0 <= j < self.matrix_count:
                    raise ValueError(f"matrix variable index {j} out of range")
                if A.shape != (self.dimension, self.dimension):
                    raise ValueError(f"coefficient shape {A.shape} does not match dimension {self.dimension}")
                if not np.allclose(A, A.conj().T, atol=1e-12 * max(1.0, np.abs(A).max())):
                    raise ValueError("coefficient matrices must be Hermitian")
            for i, _ in expr.scalar_terms:
                if not 0 <= i < self.scalar_count:
                    raise ValueError(f"scalar variable index {i} out of range")
        for quad in self.quadratic:
            if any(w < 0 for w, _ in quad.terms):
                raise ValueError("quadratic constraint weights must be nonnegative")
        return self

    def _expressions(self):
        for term in self.objective:
            yield term.expr
        for con in self.constraints:
            yield con.expr
        for quad in self.quadratic:
            yield quad.rhs
            for _, e in quad.terms:
                yield e

    def objective_value(self, matrices, scalars) -> float:
        return float(sum(term.evaluate(matrices, scalars) for term in self.objective))

    def max_residual(self, matrices, scalars) -> float:
        residuals = [c.residual(matrices, scalars) for c in self.constraints]
        residuals += [q.residual(matrices, scalars) for q in self.quadratic]
        return max(residuals, default=0.0)

    def residuals_by_label(self, matrices, scalars):
        out = {}
        for c in list(self.constraints) + list(self.quadratic):
            out[c.label] = max(out.get(c.label, 0.0), c.residual(matrices, scalars))
        return out


@dataclass
class SolverSettings:
    tolerance: float = DEFAULT_TOLERANCE
    max_iters: int = DEFAULT_MAX_ITERS
    solver: str = CONIC_SOLVER
    dump_dir: Optional[str] = None
    verbose: bool = False

    def as_dict(self):
        return asdict(self)


@dataclass
class ConicSolution:
    status: str
    matrices: List[np.ndarray]
    scalars: np.ndarray
    objective: float
    residual: float
    solver: str = ""
    binding: List[str] = field(default_factory=list)
    message: str = ""

    @property
    def ok(self):
        return self.status == OPTIMAL


def pick_solver(requested=""):
    installed = set(cp.installed_solvers())
    if requested:
        if requested.upper() not in installed:
            raise ValueError(f"conic solver {requested} is not installed (have {sorted(installed)})")
        return requested.upper()
    for name in PREFERRED_SOLVERS:
        if name in installed:
            return name
    raise RuntimeError(f"none of {PREFERRED_SOLVERS} is installed")


def _solver_options(name, settings: SolverSettings):
    if name == "CLARABEL":
        return {
            "max_iter": settings.max_iters,
            "tol_gap_abs": settings.tolerance,
            "tol_gap_rel": settings.tolerance,
            "tol_feas": settings.tolerance,
        }
    if name == "SCS":
        eps = max(settings.tolerance, SCS_MIN_EPS)
        return {"max_iters": settings.max_iters * SCS_ITER_FACTOR, "eps_abs": eps, "eps_rel": eps}
    return {}


def project_psd(X):
    X = 0.5 * (X + X.conj().T)
    eigvals, eigvecs = np.linalg.eigh(X)
    if eigvals[0] >= 0.0:
        return X
    eigvals = np.clip(eigvals, 0.0, None)
    X = (eigvecs * eigvals) @ eigvecs.conj().T
    return 0.5 * (X + X.conj().T)


def _normalised(con: Constraint):
    scale = abs(con.bound)
    if scale == 0.0:
        return con.expr, con.bound
    return con.expr.scaled(1.0 / scale), con.bound / scale


def solve(problem: ConicProblem, settings: SolverSettings = None) -> ConicSolution:
    settings = settings or SolverSettings()
    problem.check()
    M = problem.dimension
    X = [cp.Variable((M, M), hermitian=True) for _ in range(problem.matrix_count)]
    y = cp.Variable(problem.scalar_count, nonneg=True) if problem.scalar_count else None

    cons = [Xj >> 0 for Xj in X]
    labelled = []
    for con in problem.constraints:
        expr, bound = _normalised(con)
        lhs = expr.to_cvxpy(X, y)
        if con.sense == "<=":
            c = lhs <= bound
        elif con.sense == ">=":
            c = lhs >= bound
        else:
            c = lhs == bound
        cons.append(c)
        labelled.append((con.label, c))
    for quad in problem.quadratic:
        lhs = sum(w * cp.square(e.to_cvxpy(X, y)) for w, e in quad.terms)
        c = lhs <= quad.rhs.to_cvxpy(X, y)
        cons.append(c)
        labelled.append((quad.label, c))

    parts = [term.to_cvxpy(X, y) for term in problem.objective]
    objective = cp.Maximize(sum(parts[1:], parts[0]) if parts else cp.Constant(0.0))
    prob = cp.Problem(objective, cons)

    name = pick_solver(settings.solver)
    empty = [np.zeros((M, M), dtype=complex) for _ in range(problem.matrix_count)]
    try:
        prob.solve(solver=name, verbose=settings.verbose, **_solver_options(name, settings))
    except cp.error.SolverError as e:
        PipelineLogger.log_event("SUBPROBLEM_STATUS", {"problem": problem.name, "status": NUMERICAL_FAILURE, "error": str(e)})
        return ConicSolution(NUMERICAL_FAILURE, empty, np.zeros(problem.scalar_count), float("nan"), float("inf"), name, message=str(e))

    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        binding = []
        for label, c in labelled:
            dual = c.dual_value
            if dual is not None and np.any(np.abs(np.asarray(dual)) > 1e-9):
                binding.append(label)
        PipelineLogger.log_event("SUBPROBLEM_STATUS", {"problem": problem.name, "status": INFEASIBLE, "binding": binding})
        return ConicSolution(INFEASIBLE, empty, np.zeros(problem.scalar_count), float("nan"), float("inf"), name, binding=binding, message=prob.status)

    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        PipelineLogger.log_event("SUBPROBLEM_STATUS", {"problem": problem.name, "status": NUMERICAL_FAILURE, "solver_status": prob.status})
        return ConicSolution(NUMERICAL_FAILURE, empty, np.zeros(problem.scalar_count), float("nan"), float("inf"), name, message=prob.status)

    matrices = [project_psd(np.asarray(Xj.value, dtype=complex)) for Xj in X]
    scalars = np.clip(np.asarray(y.value, dtype=float), 0.0, None) if y is not None else np.zeros(0)
    value = problem.objective_value(matrices, scalars)
    residual = problem.max_residual(matrices, scalars)
    status = OPTIMAL
    if prob.status == cp.OPTIMAL_INACCURATE:
        ts_print(f"⚠️ {problem.name}: solver reported inaccurate optimum (residual {residual:.2e})", level="WARNING")
    PipelineLogger.log_event(
        "SUBPROBLEM_STATUS",
        {"problem": problem.name, "status": status, "solver": name, "objective": value, "residual": residual},
    )
    return ConicSolution(status, matrices, scalars, value, residual, name)


def _format_matrix(A):
    rows = []
    for row in np.asarray(A):
        rows.append(" ".join(f"{z.real:+.12e}{z.imag:+.12e}j" for z in row))
    return "; ".join(rows)


def _format_expr(expr: LinearTrace, indent="    "):
    lines = [f"{indent}constant {expr.constant:+.12e}"]
    for j, A in expr.matrix_terms:
        lines.append(f"{indent}Tr(A X[{j}]) A = [{_format_matrix(A)}]")
    for i, b in expr.scalar_terms:
        lines.append(f"{indent}{b:+.12e} y[{i}]")
    return lines


def dump_problem(problem: ConicProblem, path):
    """Plain-text listing: header, variables, one block per objective term and constraint.

    Matrix rows are separated by ';' and entries are written as re+imj.
    """
    lines = [
        f"# conic problem dump v{DUMP_FORMAT_VERSION}: {problem.name}",
        f"variables psd {problem.matrix_count} dim {problem.dimension} scalars {problem.scalar_count}",
        "maximize",
    ]
    for t, term in enumerate(problem.objective):
        lines.append(f"  term {t} {term.kind} weight {term.weight:+.12e}")
        lines += _format_expr(term.expr)
    for c, con in enumerate(problem.constraints):
        lines.append(f"  constraint {c} [{con.label}] {con.sense} {con.bound:+.12e}")
        lines += _format_expr(con.expr)
    for q, quad in enumerate(problem.quadratic):
        lines.append(f"  quadratic {q} [{quad.label}] sum w*expr^2 <= rhs")
        for w, e in quad.terms:
            lines.append(f"    weight {w:+.12e}")
            lines += _format_expr(e, indent="      ")
        lines.append("    rhs")
        lines += _format_expr(quad.rhs, indent="      ")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def maybe_dump(problem: ConicProblem, settings: SolverSettings, tag: str):
    if not settings.dump_dir:
        return None
    os.makedirs(settings.dump_dir, exist_ok=True)
    path = os.path.join(settings.dump_dir, f"{tag}.txt")
    dump_problem(problem, path)
    return path


def stack_solutions(solution: ConicSolution, index_map: Sequence[Tuple], shape, dimension):
    """Scatter solved matrices back into a dense array; index_map[j] is the array index of X[j]."""
    out = np.zeros(tuple(shape) + (dimension, dimension), dtype=complex)
    for j, idx in enumerate(index_map):
        out[idx] = solution.matrices[j]
    return out
