"""Plant models, regulation tasks, controller gains, and block embeddings.

The plant is ``dx/dt = A* x + B* u + k*(x)``, ``y = C x`` where ``A*`` and
``B*`` are only known up to element-wise bounds around nominal matrices and
``k*`` has a bounded increment.  The controller is a multivariable PI law

    dw/dt = B_c (y - y_d),    u = C_c w + D_c (y - y_d).

All stability analysis happens on the stacked deviation state
``z = [x - x_d; w - w_d]`` whose drift is assembled here from the augmented
blocks ``Abar, Bbar, Cbar, J, F``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, EquilibriumInfeasible, NegativeBound

RANK_RTOL = 1e-8          # numerical rank: smallest sv > RANK_RTOL * largest
EQUILIBRIUM_TOL = 1e-7    # absolute residual accepted for a steady state


def _mat(x, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(x, dtype=float))
    if M.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got ndim={M.ndim}")
    M = M.copy()
    M.setflags(write=False)
    return M


def _vec(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1).copy()
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class PlantModel:
    """Nominal plant with element-wise uncertainty bounds.

    Attributes
    ----------
    A, B, C : ndarray
        Nominal state, input, and output matrices.  ``C`` is exactly known.
    A_b, B_b : ndarray
        Entry-wise bounds: the true matrices satisfy ``|A* - A| <= A_b`` and
        ``|B* - B| <= B_b`` element-wise.
    k_b : float
        Increment bound of the nonlinearity: ``||k*(x1) - k*(x2)|| <= k_b``
        for all pairs of states.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    A_b: np.ndarray
    B_b: np.ndarray
    k_b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "A", _mat(self.A, "A"))
        object.__setattr__(self, "B", _mat(self.B, "B"))
        object.__setattr__(self, "C", _mat(self.C, "C"))
        object.__setattr__(self, "A_b", _mat(self.A_b, "A_b"))
        object.__setattr__(self, "B_b", _mat(self.B_b, "B_b"))
        object.__setattr__(self, "k_b", float(self.k_b))
        nx = self.A.shape[0]
        if self.A.shape != (nx, nx):
            raise DimensionMismatch(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != nx:
            raise DimensionMismatch(f"B has {self.B.shape[0]} rows, expected {nx}")
        if self.C.shape[1] != nx:
            raise DimensionMismatch(f"C has {self.C.shape[1]} cols, expected {nx}")
        if self.A_b.shape != self.A.shape:
            raise DimensionMismatch(f"A_b shape {self.A_b.shape} != A shape {self.A.shape}")
        if self.B_b.shape != self.B.shape:
            raise DimensionMismatch(f"B_b shape {self.B_b.shape} != B shape {self.B.shape}")
        if np.any(self.A_b < 0) or np.any(self.B_b < 0):
            raise NegativeBound("uncertainty bounds must be entry-wise nonnegative")
        if self.k_b < 0:
            raise NegativeBound(f"k_b must be nonnegative, got {self.k_b}")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class RegulationTask:
    """Constant output target with an (informational) requested precision."""

    y_d: np.ndarray
    epsilon_request: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "y_d", _vec(self.y_d, "y_d"))
        object.__setattr__(self, "epsilon_request", float(self.epsilon_request))
        if self.epsilon_request < 0:
            raise NegativeBound("epsilon_request must be nonnegative")


@dataclass(frozen=True)
class ControllerGains:
    """PI controller gains.  ``C_c`` must have full column rank so that the
    controller state can place the input at any required steady value."""

    B_c: np.ndarray
    C_c: np.ndarray
    D_c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "B_c", _mat(self.B_c, "B_c"))
        object.__setattr__(self, "C_c", _mat(self.C_c, "C_c"))
        object.__setattr__(self, "D_c", _mat(self.D_c, "D_c"))
        nu = self.C_c.shape[0]
        if self.C_c.shape != (nu, nu):
            raise DimensionMismatch(f"C_c must be square, got {self.C_c.shape}")
        if self.B_c.shape[0] != nu or self.D_c.shape[0] != nu:
            raise DimensionMismatch("B_c and D_c must have n_u rows")
        if self.B_c.shape[1] != self.D_c.shape[1]:
            raise DimensionMismatch("B_c and D_c must have the same column count")

    @property
    def n_u(self) -> int:
        return self.C_c.shape[0]

    @property
    def n_y(self) -> int:
        return self.B_c.shape[1]

    def cc_full_rank(self, rtol: float = RANK_RTOL) -> bool:
        sv = np.linalg.svd(self.C_c, compute_uv=False)
        if sv.size == 0:
            return True
        return bool(sv[-1] > rtol * sv[0])


@dataclass(frozen=True)
class AugmentedSystem:
    """Stacked closed-loop blocks for the deviation state ``z = [x-x_d; w-w_d]``.

    ``Abar`` carries the open-loop drift, ``Bbar = blockdiag(B, I)`` routes the
    physical input and the controller-state slope, ``Cbar = blockdiag(C, I)``
    extracts ``[y - y_d; w - w_d]``, ``J = [I 0]`` projects onto the physical
    state, and ``F`` collects all controller gains so that the nominal closed
    loop is ``Abar + Bbar F Cbar``.  ``Fhat`` is ``F`` with the integrator row
    zeroed; it isolates the part of the control path that is held between
    actuation updates in the digital implementation.
    """

    Abar: np.ndarray
    Bbar: np.ndarray
    Cbar: np.ndarray
    J: np.ndarray
    F: np.ndarray
    Fhat: np.ndarray


def augment(model: PlantModel, gains: ControllerGains) -> AugmentedSystem:
    """Assemble the augmented closed-loop blocks for a model/gains pair."""
    nx, nu, ny = model.n_x, model.n_u, model.n_y
    if gains.n_u != nu or gains.n_y != ny:
        raise DimensionMismatch(
            f"gains sized for (n_u={gains.n_u}, n_y={gains.n_y}), "
            f"model needs (n_u={nu}, n_y={ny})"
        )
    n = nx + nu
    Abar = np.zeros((n, n))
    Abar[:nx, :nx] = model.A
    Bbar = np.zeros((n, 2 * nu))
    Bbar[:nx, :nu] = model.B
    Bbar[nx:, nu:] = np.eye(nu)
    Cbar = np.zeros((ny + nu, n))
    Cbar[:ny, :nx] = model.C
    Cbar[ny:, nx:] = np.eye(nu)
    J = np.zeros((nx, n))
    J[:, :nx] = np.eye(nx)
    F = np.zeros((2 * nu, ny + nu))
    F[:nu, :ny] = gains.D_c
    F[:nu, ny:] = gains.C_c
    F[nu:, :ny] = gains.B_c
    Fhat = F.copy()
    Fhat[nu:, :] = 0.0
    for M in (Abar, Bbar, Cbar, J, F, Fhat):
        M.setflags(write=False)
    return AugmentedSystem(Abar=Abar, Bbar=Bbar, Cbar=Cbar, J=J, F=F, Fhat=Fhat)


def embed_dA(dA: np.ndarray, n_u: int) -> np.ndarray:
    """Place a state-matrix perturbation in the augmented state space.

    Returns the (n_x+n_u) square matrix with ``dA`` in the top-left block and
    zeros elsewhere; equals ``J.T @ dA @ J``.
    """
    dA = np.atleast_2d(np.asarray(dA, dtype=float))
    nx = dA.shape[0]
    if dA.shape != (nx, nx):
        raise DimensionMismatch(f"dA must be square, got {dA.shape}")
    M = np.zeros((nx + n_u, nx + n_u))
    M[:nx, :nx] = dA
    return M


def embed_dB(dB: np.ndarray, n_u: int) -> np.ndarray:
    """Place an input-matrix perturbation in the augmented input space.

    Returns the (n_x+n_u) x (2 n_u) matrix with ``dB`` top-left, so that
    ``Bbar + embed_dB(dB)`` perturbs only the physical-input channel.
    """
    dB = np.atleast_2d(np.asarray(dB, dtype=float))
    nx = dB.shape[0]
    if dB.shape[1] != n_u:
        raise DimensionMismatch(f"dB must have {n_u} cols, got {dB.shape[1]}")
    M = np.zeros((nx + n_u, 2 * n_u))
    M[:nx, :n_u] = dB
    return M


# ---------------------------------------------------------------------------
# uncertainty realizations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UncertaintyRealization:
    """One admissible realization of the uncertain dynamics.

    ``nonlinearity`` selects the state nonlinearity attached to the linear
    perturbation: "none", "constant" (uses ``k_const``), "sinusoid"
    (amplitude ``k_b/2`` per coordinate), or "custom" (``k_fn`` supplied).
    For the sinusoid the per-coordinate increment never exceeds ``k_b`` but
    the Euclidean increment over all coordinates can reach
    ``k_b * sqrt(n_x)``; ``effective_k_b`` records that worst case and the
    simulator measures the increments actually visited.
    """

    dA: np.ndarray
    dB: np.ndarray
    nonlinearity: str = "none"
    k_b: float = 0.0
    k_const: Optional[np.ndarray] = None
    k_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "dA", _mat(self.dA, "dA"))
        object.__setattr__(self, "dB", _mat(self.dB, "dB"))
        if self.nonlinearity not in ("none", "constant", "sinusoid", "custom"):
            raise ValueError(f"unknown nonlinearity kind {self.nonlinearity!r}")
        if self.nonlinearity == "constant":
            if self.k_const is None:
                raise ValueError("constant nonlinearity requires k_const")
            object.__setattr__(self, "k_const", _vec(self.k_const, "k_const"))
        if self.nonlinearity == "custom" and self.k_fn is None:
            raise ValueError("custom nonlinearity requires k_fn")

    def check_within(self, model: PlantModel, atol: float = 0.0) -> bool:
        """Entry-wise box membership of the linear perturbations."""
        return bool(
            np.all(np.abs(self.dA) <= model.A_b + atol)
            and np.all(np.abs(self.dB) <= model.B_b + atol)
        )

    @property
    def effective_k_b(self) -> float:
        """Euclidean increment bound actually guaranteed by the chosen kind."""
        if self.nonlinearity == "none":
            return 0.0
        if self.nonlinearity == "constant":
            return 0.0
        if self.nonlinearity == "sinusoid":
            return self.k_b * float(np.sqrt(self.dA.shape[0]))
        return float("inf")

    def k(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the realized nonlinearity at a state."""
        x = np.asarray(x, dtype=float)
        if self.nonlinearity == "none":
            return np.zeros_like(x)
        if self.nonlinearity == "constant":
            return np.asarray(self.k_const, dtype=float)
        if self.nonlinearity == "sinusoid":
            return 0.5 * self.k_b * np.sin(x)
        return np.asarray(self.k_fn(x), dtype=float)


# ---------------------------------------------------------------------------
# equilibria and validation
# ---------------------------------------------------------------------------

def nominal_equilibrium(
    model: PlantModel,
    y_d: np.ndarray,
    dA: Optional[np.ndarray] = None,
    dB: Optional[np.ndarray] = None,
    k_const: Optional[np.ndarray] = None,
    tol: float = EQUILIBRIUM_TOL,
):
    """Steady state (x_d, u_d) with C x_d = y_d and (A*+...) x_d + B* u_d = -k.

    Solves the stacked linear system ``[[C, 0], [A*, B*]] [x; u] = [y_d; -k]``
    by minimum-norm least squares for the realized pair ``A* = A + dA``,
    ``B* = B + dB`` and a constant nonlinearity value ``k_const``.

    Returns
    -------
    (x_d, u_d, residual)

    Raises
    ------
    EquilibriumInfeasible
        If the least-squares residual exceeds ``tol``.
    """
    nx, nu, ny = model.n_x, model.n_u, model.n_y
    y_d = np.asarray(y_d, dtype=float).reshape(-1)
    if y_d.size != ny:
        raise DimensionMismatch(f"y_d has length {y_d.size}, expected {ny}")
    Astar = model.A + (0.0 if dA is None else np.asarray(dA, dtype=float))
    Bstar = model.B + (0.0 if dB is None else np.asarray(dB, dtype=float))
    k = np.zeros(nx) if k_const is None else np.asarray(k_const, dtype=float).reshape(-1)
    if k.size != nx:
        raise DimensionMismatch(f"k_const has length {k.size}, expected {nx}")
    M = np.zeros((ny + nx, nx + nu))
    M[:ny, :nx] = model.C
    M[ny:, :nx] = Astar
    M[ny:, nx:] = Bstar
    rhs = np.concatenate([y_d, -k])
    sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    residual = float(np.linalg.norm(M @ sol - rhs))
    if residual > tol:
        raise EquilibriumInfeasible(residual)
    return sol[:nx], sol[nx:], residual


def realized_equilibrium(
    model: PlantModel,
    realization: "UncertaintyRealization",
    y_d: np.ndarray,
    tol: float = EQUILIBRIUM_TOL,
    max_iter: int = 60,
):
    """Steady state of one realized plant, including its nonlinearity.

    Solves ``C x = y_d`` and ``A* x + B* u + k*(x) = 0`` by fixed-point
    iteration on the constant-nonlinearity linear solves (the nonlinearity is
    increment-bounded, so the iteration contracts whenever the linear
    sensitivity is moderate).

    Returns (x_d, u_d, residual); raises EquilibriumInfeasible when the
    linear part is inconsistent or the iteration does not settle.
    """
    x_d, u_d, _ = nominal_equilibrium(model, y_d, realization.dA,
                                      realization.dB, tol=np.inf)
    Astar = model.A + realization.dA
    Bstar = model.B + realization.dB
    for _ in range(max_iter):
        k_val = realization.k(x_d)
        x_new, u_new, res = nominal_equilibrium(model, y_d, realization.dA,
                                                realization.dB, k_const=k_val,
                                                tol=np.inf)
        step = np.linalg.norm(x_new - x_d) + np.linalg.norm(u_new - u_d)
        x_d, u_d = x_new, u_new
        if step <= 1e-13:
            break
    residual = float(np.linalg.norm(
        np.concatenate([model.C @ x_d - np.asarray(y_d, float),
                        Astar @ x_d + Bstar @ u_d + realization.k(x_d)])))
    if residual > tol:
        raise EquilibriumInfeasible(residual)
    return x_d, u_d, residual


@dataclass
class ValidationReport:
    """Outcome of the structural and solvability checks on a model/task pair."""

    checks: list = field(default_factory=list)   # (name, passed, detail)
    warnings: list = field(default_factory=list)
    equilibrium_residual: float = float("nan")

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.checks)

    def add(self, name: str, passed: bool, detail: str = ""):
        self.checks.append((name, bool(passed), detail))

    def lines(self):
        out = []
        for name, passed, detail in self.checks:
            status = "ok" if passed else "FAIL"
            out.append(f"[{status}] {name}" + (f": {detail}" if detail else ""))
        for w in self.warnings:
            out.append(f"[warn] {w}")
        return out


def validate_model(model: PlantModel, task: RegulationTask) -> ValidationReport:
    """Dimension, sign, and nominal-equilibrium checks for a model and task.

    The equilibrium check solves the nominal stacked system (zero
    perturbations, zero nonlinearity) by least squares and reports the
    residual.  A nonzero residual or ``n_u < n_y`` produces warnings, not
    errors: both merely indicate the regulation target may be unreachable.
    """
    rep = ValidationReport()
    nx, nu, ny = model.n_x, model.n_u, model.n_y
    rep.add("dimensions", True, f"n_x={nx}, n_u={nu}, n_y={ny}")
    rep.add("bounds_nonnegative", bool(np.all(model.A_b >= 0) and np.all(model.B_b >= 0)))
    rep.add("k_b_nonnegative", model.k_b >= 0, f"k_b={model.k_b}")
    if task.y_d.size != ny:
        rep.add("target_length", False, f"y_d has length {task.y_d.size}, expected {ny}")
        return rep
    rep.add("target_length", True)
    if nu < ny:
        rep.warnings.append(
            f"n_u={nu} < n_y={ny}: steady states matching y_d generically do not exist"
        )
    try:
        _, _, res = nominal_equilibrium(model, task.y_d, tol=np.inf)
    except EquilibriumInfeasible as exc:  # tol=inf, unreachable
        res = exc.residual
    rep.equilibrium_residual = res
    rep.add("nominal_equilibrium_solved", True, f"residual={res:.3e}")
    if res > EQUILIBRIUM_TOL:
        rep.warnings.append(
            f"nominal equilibrium residual {res:.3e} exceeds {EQUILIBRIUM_TOL:.1e}; "
            "the target output may be unreachable"
        )
    return rep


def controller_equilibrium(
    model: PlantModel,
    gains: ControllerGains,
    x_d: np.ndarray,
    u_d: np.ndarray,
    y_d: np.ndarray,
) -> np.ndarray:
    """Controller steady state w_d with C_c w_d = u_d - D_c (y_d - C x_d)."""
    rhs = np.asarray(u_d, float) - gains.D_c @ (
        np.asarray(y_d, float) - model.C @ np.asarray(x_d, float)
    )
    w_d, *_ = np.linalg.lstsq(gains.C_c, rhs, rcond=None)
    return w_d


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"A", "B", "C", "A_bound", "B_bound", "k_b", "y_d"}


def model_to_dict(model: PlantModel, task: RegulationTask) -> dict:
    return {
        "A": model.A.tolist(),
        "B": model.B.tolist(),
        "C": model.C.tolist(),
        "A_bound": model.A_b.tolist(),
        "B_bound": model.B_b.tolist(),
        "k_b": model.k_b,
        "y_d": task.y_d.tolist(),
    }


def model_from_dict(data: dict):
    """Build (PlantModel, RegulationTask) from a parsed model document.

    Unknown keys are rejected so that typos in hand-written files fail loudly.
    """
    if not isinstance(data, dict):
        raise DimensionMismatch("model document must be a mapping")
    unknown = set(data) - _MODEL_KEYS
    if unknown:
        raise DimensionMismatch(f"unknown keys in model file: {sorted(unknown)}")
    missing = _MODEL_KEYS - set(data)
    if missing:
        raise DimensionMismatch(f"missing keys in model file: {sorted(missing)}")
    model = PlantModel(
        A=data["A"], B=data["B"], C=data["C"],
        A_b=data["A_bound"], B_b=data["B_bound"], k_b=data["k_b"],
    )
    task = RegulationTask(y_d=data["y_d"])
    return model, task


def save_model(path, model: PlantModel, task: RegulationTask):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, task), fh, indent=2)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
