"""Affine symmetric-matrix expressions and a small semidefinite-program front end.

Problems are assembled as lists of affine matrix constraints over named
scalar, symmetric, and rectangular matrix variables, lowered to the standard
conic form, and solved with cvxopt's primal-dual interior-point method
(Nesterov-Todd scaling on the semidefinite cone, homogeneous self-dual
embedding for infeasibility detection).  Every returned solution is
re-verified here by explicit eigenvalue checks; statuses are downgraded when
the verification fails, so callers can rely on ``Optimal``/``Feasible``
implying a feasible point at the requested tolerance.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from cvxopt import matrix as _cvxmat
from cvxopt import solvers as _cvxsolvers

from .errors import DimensionMismatch, NotPositiveDefinite, NotSymmetric, SingularBlock

STRICT_MARGIN = 1e-6      # numeric stand-in for strict inequalities (P > 0, kappa > 0)
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
SYM_ATOL = 1e-12


# ---------------------------------------------------------------------------
# basic symmetric-matrix utilities
# ---------------------------------------------------------------------------

def min_eig(M: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    Raises NotSymmetric if the asymmetry exceeds the documented tolerance
    (scaled by the matrix magnitude).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise NotSymmetric(f"matrix is {M.shape}, not square")
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > SYM_ATOL * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-12 (relative)")
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def max_eig(M: np.ndarray) -> float:
    return -min_eig(-np.asarray(M, dtype=float))


def psd_check(M: np.ndarray, tol: float = DEFAULT_TOL) -> bool:
    """True when the smallest eigenvalue is at least ``-tol``."""
    return min_eig(M) >= -tol


def schur_reduce(M11: np.ndarray, M21: np.ndarray, M22: np.ndarray,
                 tol: float = DEFAULT_TOL) -> np.ndarray:
    """Schur complement ``M11 - M21.T inv(M22) M21`` of a symmetric block matrix.

    ``M22`` must be negative definite; with that pivot the block matrix
    ``[[M11, M21.T], [M21, M22]]`` is negative semidefinite exactly when the
    returned complement is.  Used by test oracles; solvers consume the
    un-reduced block form.
    """
    M11 = np.atleast_2d(np.asarray(M11, dtype=float))
    M21 = np.atleast_2d(np.asarray(M21, dtype=float))
    M22 = np.atleast_2d(np.asarray(M22, dtype=float))
    if M21.shape != (M22.shape[0], M11.shape[0]):
        raise DimensionMismatch(
            f"M21 shape {M21.shape} incompatible with M11 {M11.shape}, M22 {M22.shape}"
        )
    if max_eig(M22) >= -tol:
        raise SingularBlock("pivot block is not negative definite")
    X = np.linalg.solve(M22, M21)
    out = M11 - M21.T @ X
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# variables and expressions
# ---------------------------------------------------------------------------

@dataclass
class _Var:
    name: str
    kind: str                # "scalar" | "sym" | "rect"
    shape: tuple
    offset: int
    nparams: int
    lower: Optional[float] = None      # scalar lower bound
    min_eig: Optional[float] = None    # sym: X >= min_eig * I enforced


def _sym_basis(d: int) -> np.ndarray:
    k = d * (d + 1) // 2
    T = np.zeros((k, d, d))
    idx = 0
    for i in range(d):
        for j in range(i, d):
            T[idx, i, j] = 1.0
            T[idx, j, i] = 1.0
            idx += 1
    return T


def _rect_basis(r: int, c: int) -> np.ndarray:
    T = np.zeros((r * c, r, c))
    for i in range(r):
        for j in range(c):
            T[i * c + j, i, j] = 1.0
    return T


_BASIS_CACHE: Dict[tuple, np.ndarray] = {}


def _basis(var: _Var) -> np.ndarray:
    key = (var.kind,) + var.shape
    if key not in _BASIS_CACHE:
        if var.kind == "scalar":
            _BASIS_CACHE[key] = np.ones((1, 1, 1))
        elif var.kind == "sym":
            _BASIS_CACHE[key] = _sym_basis(var.shape[0])
        else:
            _BASIS_CACHE[key] = _rect_basis(*var.shape)
    return _BASIS_CACHE[key]


def _sym_params(M: np.ndarray) -> np.ndarray:
    """Parameter vector of a symmetric matrix in the upper-triangle basis."""
    d = M.shape[0]
    out = np.empty(d * (d + 1) // 2)
    idx = 0
    for i in range(d):
        for j in range(i, d):
            out[idx] = M[i, j]
            idx += 1
    return out


class SymMatrixExpr:
    """Affine symmetric-matrix expression over the variables of one problem.

    Terms are placed block-wise.  Off-diagonal placements are mirrored so the
    evaluated matrix is exactly symmetric by construction; diagonal placements
    must themselves be symmetric (use ``symmetrize=True`` to add L X R plus
    its transpose).
    """

    def __init__(self, problem: "SdpProblem", dim: int):
        self.problem = problem
        self.dim = int(dim)
        self.constant = np.zeros((dim, dim))
        self.coeffs: Dict[str, np.ndarray] = {}   # var -> (nparams, dim, dim)

    def _tensor(self, name: str) -> np.ndarray:
        var = self.problem.var(name)
        if name not in self.coeffs:
            self.coeffs[name] = np.zeros((var.nparams, self.dim, self.dim))
        return self.coeffs[name]

    def _place_const(self, M: np.ndarray, row: int, col: int):
        r, c = M.shape
        self.constant[row:row + r, col:col + c] += M
        if row != col:
            self.constant[col:col + c, row:row + r] += M.T

    def add_constant(self, M, row: int = 0, col: int = 0):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if row == col and np.max(np.abs(M - M.T)) > SYM_ATOL * max(1.0, np.max(np.abs(M))):
            raise NotSymmetric("diagonal-block constant must be symmetric")
        self._place_const(M, row, col)
        return self

    def add_scalar_term(self, name: str, coeff, row: int = 0, col: int = 0):
        """Add ``x * coeff`` at the given block for a scalar variable x."""
        var = self.problem.var(name)
        if var.kind != "scalar":
            raise DimensionMismatch(f"{name} is not a scalar variable")
        coeff = np.atleast_2d(np.asarray(coeff, dtype=float))
        T = self._tensor(name)
        r, c = coeff.shape
        T[0, row:row + r, col:col + c] += coeff
        if row != col:
            T[0, col:col + c, row:row + r] += coeff.T
        return self

    def add_matrix_term(self, name: str, left, right, row: int = 0, col: int = 0,
                        transpose: bool = False, symmetrize: bool = False):
        """Add ``L @ X @ R`` (or ``L @ X.T @ R``) at the given block.

        With ``symmetrize=True`` (diagonal blocks only) the transpose is added
        as well, yielding ``L X R + (L X R).T``.
        """
        var = self.problem.var(name)
        L = np.atleast_2d(np.asarray(left, dtype=float))
        R = np.atleast_2d(np.asarray(right, dtype=float))
        B = _basis(var)
        if transpose:
            B = np.transpose(B, (0, 2, 1))
        blk = np.einsum("ab,kbc,cd->kad", L, B, R)
        T = self._tensor(name)
        r, c = blk.shape[1], blk.shape[2]
        T[:, row:row + r, col:col + c] += blk
        if symmetrize:
            if row != col:
                raise DimensionMismatch("symmetrize is only valid on diagonal blocks")
            T[:, row:row + c, col:col + r] += np.transpose(blk, (0, 2, 1))
        elif row != col:
            T[:, col:col + c, row:row + r] += np.transpose(blk, (0, 2, 1))
        return self

    def evaluate(self, assignment: Dict[str, np.ndarray]) -> np.ndarray:
        """Value of the expression at an assignment of variable values."""
        out = self.constant.copy()
        for name, T in self.coeffs.items():
            var = self.problem.var(name)
            val = np.asarray(assignment[name], dtype=float)
            if var.kind == "scalar":
                theta = np.array([float(val)])
            elif var.kind == "sym":
                theta = _sym_params(np.atleast_2d(val))
            else:
                theta = np.atleast_2d(val).reshape(-1)
            out += np.tensordot(theta, T, axes=(0, 0))
        return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# problems and solutions
# ---------------------------------------------------------------------------

class SdpStatus(Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SdpSolution:
    status: SdpStatus
    assignment: Dict[str, np.ndarray] = field(default_factory=dict)
    objective_value: float = float("nan")
    max_constraint_violation: float = float("nan")
    solver_info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status in (SdpStatus.OPTIMAL, SdpStatus.FEASIBLE)

    def __getitem__(self, name: str):
        return self.assignment[name]


class SdpProblem:
    """Affine semidefinite feasibility/optimization problem.

    Constraints are symmetric-matrix expressions required negative
    semidefinite (``sense="nsd"``) or positive semidefinite (``"psd"``);
    the objective is a linear functional of scalar variables, maximized.
    """

    def __init__(self):
        self._vars: Dict[str, _Var] = {}
        self._order: List[str] = []
        self._nparams = 0
        self.constraints: List[tuple] = []     # (expr, sense, name)
        self.objective: Dict[str, float] = {}
        self.info: dict = {}

    # -- variables ----------------------------------------------------------
    def var(self, name: str) -> _Var:
        try:
            return self._vars[name]
        except KeyError:
            raise DimensionMismatch(f"undeclared variable {name!r}") from None

    def _register(self, v: _Var):
        if v.name in self._vars:
            raise DimensionMismatch(f"variable {v.name!r} already declared")
        self._vars[v.name] = v
        self._order.append(v.name)
        self._nparams += v.nparams

    def add_scalar(self, name: str, lower: Optional[float] = None) -> str:
        self._register(_Var(name, "scalar", (), self._nparams, 1, lower=lower))
        return name

    def add_symmetric(self, name: str, dim: int, min_eig: Optional[float] = None) -> str:
        self._register(_Var(name, "sym", (dim, dim), self._nparams,
                            dim * (dim + 1) // 2, min_eig=min_eig))
        return name

    def add_rectangular(self, name: str, rows: int, cols: int) -> str:
        self._register(_Var(name, "rect", (rows, cols), self._nparams, rows * cols))
        return name

    def expr(self, dim: int) -> SymMatrixExpr:
        return SymMatrixExpr(self, dim)

    # -- constraints / objective --------------------------------------------
    def add_constraint(self, expr: SymMatrixExpr, sense: str = "nsd",
                       name: Optional[str] = None):
        if sense not in ("nsd", "psd"):
            raise ValueError("sense must be 'nsd' or 'psd'")
        for v in expr.coeffs:
            self.var(v)
        self.constraints.append((expr, sense, name or f"c{len(self.constraints)}"))

    def set_objective(self, coeffs: Dict[str, float]):
        """Maximize sum(coeffs[name] * scalar variable)."""
        for name in coeffs:
            if self.var(name).kind != "scalar":
                raise DimensionMismatch("objective must involve scalar variables only")
        self.objective = dict(coeffs)

    # -- lowering -------------------------------------------------------------
    def _theta_to_assignment(self, theta: np.ndarray) -> Dict[str, np.ndarray]:
        out = {}
        for name in self._order:
            v = self._vars[name]
            th = theta[v.offset:v.offset + v.nparams]
            if v.kind == "scalar":
                out[name] = float(th[0])
            else:
                out[name] = np.tensordot(th, _basis(v), axes=(0, 0))
        return out

    def _nsd_expressions(self):
        """All constraints normalized to 'expr <= 0', including variable bounds."""
        exprs = []
        for expr, sense, name in self.constraints:
            if sense == "nsd":
                exprs.append((expr, name, 1.0))
            else:
                exprs.append((expr, name, -1.0))
        return exprs

    def _lower(self, tol: float):
        n = self._nparams
        lin_rows, lin_rhs = [], []
        for name in self._order:
            v = self._vars[name]
            if v.kind == "scalar" and v.lower is not None:
                row = np.zeros(n)
                row[v.offset] = -1.0
                lin_rows.append(row)
                lin_rhs.append(-v.lower)
        Gs, hs, sdims = [], [], []
        for expr, name, sign in self._nsd_expressions():
            d = expr.dim
            G = np.zeros((d * d, n))
            for vname, T in expr.coeffs.items():
                v = self._vars[vname]
                G[:, v.offset:v.offset + v.nparams] = sign * T.reshape(v.nparams, d * d).T
            Gs.append(G)
            hs.append((-sign * expr.constant).reshape(-1))
            sdims.append(d)
        for name in self._order:
            v = self._vars[name]
            if v.kind == "sym" and v.min_eig is not None:
                d = v.shape[0]
                G = np.zeros((d * d, n))
                G[:, v.offset:v.offset + v.nparams] = -_basis(v).reshape(v.nparams, d * d).T
                Gs.append(G)
                hs.append((-v.min_eig * np.eye(d)).reshape(-1))
                sdims.append(d)
        Gl = np.vstack(lin_rows) if lin_rows else np.zeros((0, n))
        hl = np.asarray(lin_rhs, dtype=float)
        G = np.vstack([Gl] + Gs) if Gs else Gl
        h = np.concatenate([hl] + hs) if hs else hl
        c = np.zeros(n)
        for name, co in self.objective.items():
            c[self._vars[name].offset] = -float(co)
        return c, G, h, {"l": len(hl), "q": [], "s": sdims}

    # -- verification -----------------------------------------------------------
    def constraint_violation(self, assignment: Dict[str, np.ndarray]) -> float:
        """Largest eigenvalue excess over all constraints at an assignment.

        Positive values measure infeasibility; includes declared variable
        bounds.  NSD constraints contribute their largest eigenvalue, PSD
        constraints the negated smallest.
        """
        worst = -np.inf
        for expr, name, sign in self._nsd_expressions():
            worst = max(worst, max_eig(sign * expr.evaluate(assignment)))
        for name in self._order:
            v = self._vars[name]
            if v.kind == "scalar" and v.lower is not None:
                worst = max(worst, v.lower - float(assignment[name]))
            if v.kind == "sym" and v.min_eig is not None:
                M = np.atleast_2d(np.asarray(assignment[name], dtype=float))
                worst = max(worst, v.min_eig - min_eig(M))
        return float(worst)

    def objective_value(self, assignment: Dict[str, np.ndarray]) -> float:
        return float(sum(co * float(assignment[name])
                         for name, co in self.objective.items()))

    # -- debug dump -------------------------------------------------------------
    def dumps(self) -> str:
        """Plain-text sparse dump: variable table plus constraint triplets.

        Lines: ``var <name> <kind> <rows> <cols> <offset> <nparams>`` then
        ``coef <constraint> <param-index|-1> <row> <col> <value>`` where
        parameter index -1 marks the constant part.  Suitable for feeding the
        same problem to an external solver as a cross-check.
        """
        buf = io.StringIO()
        print("# outreg sdp dump v1", file=buf)
        for name in self._order:
            v = self._vars[name]
            r, c = (1, 1) if v.kind == "scalar" else v.shape
            print(f"var {name} {v.kind} {r} {c} {v.offset} {v.nparams}", file=buf)
            if v.lower is not None:
                print(f"bound {name} lower {float(v.lower)!r}", file=buf)
            if v.min_eig is not None:
                print(f"bound {name} min_eig {float(v.min_eig)!r}", file=buf)
        if self.objective:
            terms = " ".join(f"{name} {co!r}" for name, co in self.objective.items())
            print(f"maximize {terms}", file=buf)
        for expr, sense, cname in self.constraints:
            print(f"constraint {cname} {sense} {expr.dim}", file=buf)
            const = expr.constant
            for i, j in zip(*np.nonzero(const)):
                if j < i:
                    continue
                print(f"coef {cname} -1 {i} {j} {float(const[i, j])!r}", file=buf)
            for vname, T in expr.coeffs.items():
                off = self._vars[vname].offset
                for k, i, j in zip(*np.nonzero(T)):
                    if j < i:
                        continue
                    print(f"coef {cname} {off + k} {i} {j} {float(T[k, i, j])!r}",
                          file=buf)
        return buf.getvalue()

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def solve(problem: SdpProblem, tol: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER) -> SdpSolution:
    """Solve an SdpProblem; statuses are verified by explicit eigenvalue checks.

    ``Optimal``/``Feasible`` solutions satisfy every constraint with largest
    eigenvalue at most ``tol``.  Infeasibility is certified by the solver's
    homogeneous self-dual embedding.  A single retry at tighter interior
    tolerances is attempted when the first iterate verifies poorly.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    c, G, h, dims = problem._lower(tol)
    if problem._nparams == 0:
        raise DimensionMismatch("problem has no variables")

    def _run(feastol, kkt):
        opts = {
            "show_progress": False,
            "abstol": feastol,
            "reltol": feastol,
            "feastol": feastol,
            "maxiters": int(max_iter),
        }
        kwargs = {"kktsolver": kkt} if kkt else {}
        try:
            return _cvxsolvers.conelp(_cvxmat(c), _cvxmat(G), _cvxmat(h),
                                      dims=dims, options=opts, **kwargs)
        except (ValueError, ZeroDivisionError, ArithmeticError) as exc:
            return {"status": f"exception: {exc}", "x": None}

    # attempt ladder: tight default, tight LDL, loose default, loose LDL; the
    # eigenvalue re-verification below is the acceptance authority either way
    tight = min(tol, 1e-9)
    loose = max(tol, 1e-7)
    attempts = [(tight, None), (tight, "ldl"), (loose, None), (loose, "ldl")]
    best = None          # (violation, assignment, backend_status, iterations)
    last_status = "no attempt"
    for feastol, kkt in attempts:
        sol = _run(feastol, kkt)
        status = sol["status"]
        last_status = status
        if status == "primal infeasible":
            return SdpSolution(SdpStatus.INFEASIBLE,
                               solver_info={"backend_status": status})
        if sol.get("x") is None:
            continue
        assignment = problem._theta_to_assignment(np.array(sol["x"]).ravel())
        violation = problem.constraint_violation(assignment)
        if status == "optimal" and violation <= tol:
            return SdpSolution(
                SdpStatus.OPTIMAL, assignment=assignment,
                objective_value=problem.objective_value(assignment),
                max_constraint_violation=violation,
                solver_info={"backend_status": status,
                             "iterations": sol.get("iterations")})
        if best is None or violation < best[0]:
            best = (violation, assignment, status, sol.get("iterations"))
    if best is None:
        return SdpSolution(SdpStatus.NUMERICAL_FAILURE,
                           solver_info={"backend_status": last_status})
    violation, assignment, status, iters = best
    final = SdpStatus.FEASIBLE if violation <= tol else SdpStatus.NUMERICAL_FAILURE
    return SdpSolution(final, assignment=assignment,
                       objective_value=problem.objective_value(assignment),
                       max_constraint_violation=violation,
                       solver_info={"backend_status": status, "iterations": iters})
