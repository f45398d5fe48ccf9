"""Direct sparse solves, undamped Newton iteration and the discrete inf-sup diagnostic."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INFSUP_MAX_DIM = 4000
KRYLOV_RTOL = 1e-12
KRYLOV_RESTART = 60
KRYLOV_MAXITER = 2
KRYLOV_BACKWARD = 1e-12


class SolverError(RuntimeError):
    """Base class of solver failures."""


class SingularMatrixError(SolverError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NewtonDivergence(SolverError):
    pass


class NewtonNotConverged(SolverError):
    pass


def _factorize(A):
    """Sparse LU of ``A`` with singularity detection."""
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A)
    except RuntimeError as err:
        pivot = _zero_pivot_from_message(str(err))
        if pivot is None:
            pivot = _locate_zero_pivot(A)
        raise SingularMatrixError(f"matrix is singular at pivot {pivot}", pivot) from None
    diag = np.abs(lu.U.diagonal())
    scale = diag.max() if len(diag) else 1.0
    tiny = diag <= 1e-14 * scale
    if tiny.any():
        pivot = int(lu.perm_c[np.flatnonzero(tiny)[0]])
        raise SingularMatrixError(f"matrix is numerically singular at pivot {pivot}", pivot)
    return lu


def _check_residual(matvec, norm_inf, x, b):
    r = np.abs(matvec(x) - b).max() if len(b) else 0.0
    bound = 1e-10 * (norm_inf * np.abs(x).max() + np.abs(b).max())
    if not np.isfinite(r) or r > bound:
        raise SingularMatrixError(f"solve residual {r:.3e} exceeds {bound:.3e}")


def sparse_solve(A, b, check=True):
    """Solve ``A x = b`` by sparse LU.

    Raises :class:`SingularMatrixError` (with the offending pivot index)
    when the factorization breaks down or the residual check
    ``||A x - b||_inf <= 1e-10 (||A||_inf ||x||_inf + ||b||_inf)`` fails.
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or b.shape[0] != n:
        raise ValueError(f"dimension mismatch: matrix {A.shape}, right-hand side {b.shape}")
    x = _factorize(A).solve(b)
    if check:
        normA = abs(A).sum(axis=1).max() if n else 0.0
        _check_residual(lambda v: A @ v, normA, x, b)
    return x


class FactoredOperator:
    """Sparse operator ``A + Ys^T G Yr`` kept in factored form.

    ``Ys`` and ``Yr`` may be ``None`` (identity).  With a
    ``preconditioner`` (a solve with ``A``), solves first try GMRES on the
    exact operator.  Otherwise, or when GMRES stalls, they use a bordered
    sparse system with auxiliary unknowns ``w = Yr x`` and ``z = G w``,
    which avoids forming the dense-ish product, followed by one step of
    iterative refinement against the exact operator.
    """

    def __init__(self, A, G=None, Ys=None, Yr=None, preconditioner=None):
        self.A = sp.csr_matrix(A)
        self.G = None if G is None else sp.csr_matrix(G)
        self.Ys, self.Yr = Ys, Yr
        self.shape = self.A.shape
        self.preconditioner = preconditioner
        self._lu = None

    def matvec(self, x):
        y = self.A @ x
        if self.G is not None:
            w = x if self.Yr is None else self.Yr @ x
            z = self.G @ w
            y = y + (z if self.Ys is None else self.Ys.T @ z)
        return y

    def assembled(self):
        if self.G is None:
            return self.A.copy()
        M = self.G if self.Yr is None else self.G @ self.Yr
        M = M if self.Ys is None else self.Ys.T @ M
        return (self.A + M).tocsr()

    def _system(self):
        A, G, Ys, Yr = self.A, self.G, self.Ys, self.Yr
        if G is None:
            return A
        if Ys is None and Yr is None:
            return A + G
        if Ys is None:
            I = sp.identity(Yr.shape[0])
            return sp.bmat([[A, G], [Yr, -I]])
        if Yr is None:
            I = sp.identity(Ys.shape[0])
            return sp.bmat([[A, Ys.T], [G, -I]])
        Is, Ir = sp.identity(Ys.shape[0]), sp.identity(Yr.shape[0])
        return sp.bmat([[A, Ys.T, None], [None, -Is, G], [Yr, None, -Ir]])

    def _norm_inf(self):
        n = self.shape[0]
        e = np.ones(n)
        # row sums of |A| plus a bound for the factored part
        bound = abs(self.A) @ e
        if self.G is not None:
            w = e if self.Yr is None else abs(self.Yr) @ e
            z = abs(self.G) @ w
            bound = bound + (z if self.Ys is None else abs(self.Ys).T @ z)
        return float(bound.max()) if n else 0.0

    def _krylov(self, b):
        """GMRES preconditioned by ``preconditioner``; ``None`` when it stalls.

        A result is accepted when its backward error
        ``||b - Ax||_inf / (||A||_inf ||x||_inf + ||b||_inf)`` is at most
        ``KRYLOV_BACKWARD``.
        """
        n = self.shape[0]
        if not np.any(b):
            return np.zeros(n)
        op = spla.LinearOperator(self.shape, matvec=self.matvec)
        M = spla.LinearOperator(self.shape, matvec=self.preconditioner)
        x, _ = spla.gmres(op, b, M=M, rtol=KRYLOV_RTOL, atol=0.0,
                          restart=KRYLOV_RESTART, maxiter=KRYLOV_MAXITER)
        if not np.all(np.isfinite(x)):
            return None
        r = np.abs(b - self.matvec(x)).max()
        if r > KRYLOV_BACKWARD * (self._norm_inf() * np.abs(x).max() + np.abs(b).max()):
            return None
        return x

    def solve(self, b, check=True):
        b = np.asarray(b, dtype=float)
        n = self.shape[0]
        if self.preconditioner is not None and self.G is not None and self._lu is None:
            x = self._krylov(b)
            if x is not None:
                if check:
                    _check_residual(self.matvec, self._norm_inf(), x, b)
                return x
        if self._lu is None:
            try:
                self._lu = _factorize(self._system())
            except SingularMatrixError as err:
                pivot = err.pivot if err.pivot is not None and err.pivot < n else None
                raise SingularMatrixError(str(err), pivot) from None
        extra = self._lu.shape[0] - n

        def raw(rhs):
            return self._lu.solve(np.concatenate([rhs, np.zeros(extra)]))[:n]

        x = raw(b)
        if extra:
            x = x + raw(b - self.matvec(x))
        if check:
            _check_residual(self.matvec, self._norm_inf(), x, b)
        return x


def _locate_zero_pivot(A):
    """Column of the smallest pivot of a slightly shifted factorization."""
    shift = np.finfo(float).eps * max(abs(A).sum(axis=0).max(), 1.0)
    try:
        lu = spla.splu(sp.csc_matrix(A + shift * sp.identity(A.shape[0], format="csc")))
    except RuntimeError:
        return None
    return int(lu.perm_c[int(np.argmin(np.abs(lu.U.diagonal())))])


def _zero_pivot_from_message(msg):
    digits = [int(t) for t in msg.replace(".", " ").split() if t.isdigit()]
    return digits[0] - 1 if digits else None


@dataclass
class NewtonReport:
    """Iteration history of a Newton solve.

    ``corrections[k]`` is the scheme norm of the k-th correction,
    ``residuals[k]`` the Euclidean norm of the residual before it,
    ``ratios[k] = corrections[k + 1] / corrections[k] ** 2`` and
    ``floors[k]`` an estimate of the rounding-error level of the k-th
    correction (scheme norm of the Newton step driven by a residual
    perturbation of machine-precision size).
    """

    iterations: int = 0
    residuals: list = field(default_factory=list)
    corrections: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    floors: list = field(default_factory=list)
    converged: bool = False
    floor_limited: bool = False
    solution: np.ndarray = None

    def quadratic_ratios(self, margin=10.0):
        """Ratios whose newer correction lies above ``margin`` times its rounding floor."""
        out = []
        for k, q in enumerate(self.ratios):
            if self.corrections[k + 1] > margin * self.floors[k + 1]:
                out.append(q)
        return out

    def log_lines(self):
        """Line-oriented log: iteration, residual norm, correction norm, ratio."""
        lines = ["iteration residual correction ratio"]
        for k, (r, c) in enumerate(zip(self.residuals, self.corrections)):
            q = self.ratios[k - 1] if k >= 1 else float("nan")
            lines.append(f"{k + 1} {r:.6e} {c:.6e} {q:.6e}")
        return lines

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "residuals": [float(v) for v in self.residuals],
            "corrections": [float(v) for v in self.corrections],
            "ratios": [float(v) for v in self.ratios],
            "floors": [float(v) for v in self.floors],
            "converged": bool(self.converged),
            "floor_limited": bool(self.floor_limited),
        }


def scheme_norm(gram, x):
    return float(np.sqrt(max(float(x @ (gram @ x)), 0.0)))


def linear_initial_guess(problem):
    """Solution of the linear problem ``a_h(u0, v) = F(J I_M v)``."""
    return sparse_solve(problem.matrix, problem.load)


def _rounding_perturbation(problem, x, r_parts):
    """Residual perturbation of machine-precision size with fixed pseudo-random signs."""
    rng = np.random.default_rng(12345)
    scale = abs(problem.matrix) @ np.abs(x) + np.abs(problem.load) + r_parts
    return np.finfo(float).eps * scale * rng.choice([-1.0, 1.0], size=len(x))


def newton_solve(problem, initial=None, tol=None, max_iter=None, growth_limit=3, floor_margin=10.0,
                 krylov=True):
    """Undamped Newton iteration ``x <- x - DN_h(x)^{-1} N_h(x)``.

    Stops once the scheme norm of a correction is at most ``tol``, or at
    most ``floor_margin`` times its estimated rounding floor (then
    ``floor_limited`` is set).  The iteration count is the number of
    corrections applied.  Raises :class:`NewtonDivergence` when the
    correction grows in ``growth_limit`` consecutive steps, becomes
    non-finite or ends the iteration budget no smaller than it started,
    and :class:`NewtonNotConverged` at the iteration cap.
    With ``krylov=False`` every Jacobian solve is a direct factorization.
    """
    spec = problem.spec
    tol = spec.tol if tol is None else tol
    max_iter = spec.max_iter if max_iter is None else max_iter
    x = linear_initial_guess(problem) if initial is None else np.array(initial, dtype=float)
    report = NewtonReport()
    growth = 0
    for _ in range(max_iter):
        r, op, nl = problem.linearize(x)
        if not krylov:
            op.preconditioner = None
        rnorm = float(np.linalg.norm(r))
        if not np.isfinite(rnorm):
            raise NewtonDivergence(f"residual became non-finite after {report.iterations} iterations")
        try:
            delta = op.solve(r)
        except SingularMatrixError as err:
            raise SingularMatrixError(
                f"singular Jacobian at Newton iteration {report.iterations + 1}: {err}",
                err.pivot) from None
        floor = scheme_norm(problem.gram, op.solve(_rounding_perturbation(problem, x, np.abs(nl)),
                                                   check=False))
        x = x - delta
        c = scheme_norm(problem.gram, delta)
        report.residuals.append(rnorm)
        report.corrections.append(c)
        report.floors.append(floor)
        report.iterations += 1
        if len(report.corrections) >= 2:
            prev = report.corrections[-2]
            report.ratios.append(c / prev ** 2 if prev > 0 else float("nan"))
            growth = growth + 1 if c > prev else 0
        if not np.isfinite(c):
            raise NewtonDivergence(f"correction became non-finite at iteration {report.iterations}")
        if c <= tol:
            report.converged = True
            break
        if c <= floor_margin * floor:
            report.converged = report.floor_limited = True
            break
        if growth >= growth_limit:
            raise NewtonDivergence(
                f"correction grew in {growth} consecutive iterations "
                f"(last {c:.3e}) after {report.iterations} iterations")
        if not problem.terms:
            # linear problem: the Newton step is the exact solve
            report.converged = True
            break
    report.solution = x
    if (not report.converged and len(report.corrections) > 1
            and report.corrections[-1] >= report.corrections[0]):
        raise NewtonDivergence(
            f"no net progress within {max_iter} iterations (correction "
            f"{report.corrections[0]:.3e} -> {report.corrections[-1]:.3e})")
    if not report.converged:
        raise NewtonNotConverged(
            f"no convergence within {max_iter} iterations (last correction "
            f"{report.corrections[-1]:.3e})")
    return report


def infsup_from_matrices(K, M):
    """Smallest singular value of ``L^{-1} K L^{-T}`` with ``M = L L^T``."""
    K = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
    M = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
    n = K.shape[0]
    if n > INFSUP_MAX_DIM:
        raise ValueError(f"inf-sup diagnostic limited to {INFSUP_MAX_DIM} dofs, got {n}")
    try:
        L = np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError:
        raise SolverError("Gram matrix is not positive definite") from None
    X = sla.solve_triangular(L, K, lower=True)
    X = sla.solve_triangular(L, X.T, lower=True).T
    return float(sla.svdvals(X).min())


def infsup_estimate(problem, x):
    """Discrete inf-sup surrogate of the linearized operator at ``x`` in the scheme norm."""
    return infsup_from_matrices(problem.jacobian(x), problem.gram)


__all__ = [
    "sparse_solve", "newton_solve", "NewtonReport", "infsup_estimate", "infsup_from_matrices",
    "SolverError", "SingularMatrixError", "NewtonDivergence", "NewtonNotConverged",
    "linear_initial_guess",
]
