"""Robust controller certification and synthesis via matrix inequalities.

Certification: for fixed PI gains, a common quadratic Lyapunov matrix valid
for every admissible box perturbation is found from one linear matrix
inequality per multiplier-augmented block (a convex relaxation of the robust
constraint that is tight up to a factor pi/2).  The decay level ``alpha`` is
maximized for fixed ``zeta``; the ratio ``alpha/zeta`` is the certified
objective and is invariant under the joint scaling of all variables.

Synthesis: gains and Lyapunov matrix are co-designed by sequential parametric
convex approximation.  Bilinear products are linearized around the previous
iterate through a Young-inequality block (``linearize_bilinear``) and inverse
multipliers through their tangent over-approximation (``inverse_overapprox``),
so every iteration solves one semidefinite program whose feasible set is an
inner approximation of the true design set; accepted iterates therefore carry
valid certificates at every step.

A brute-force vertex oracle (``vertex_verify``) re-checks any certificate by
enumerating all sign patterns of the uncertainty box.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import conic
from .conic import SdpProblem, SdpStatus, STRICT_MARGIN, solve
from .errors import (
    AllSolvesFailed,
    DimensionMismatch,
    InitializationInfeasible,
    NotPositiveDefinite,
    StalledBelowZero,
)
from .model import (
    AugmentedSystem,
    ControllerGains,
    PlantModel,
    RegulationTask,
    augment,
    embed_dA,
    embed_dB,
    model_from_dict,
    model_to_dict,
)

ORACLE_TOL = 1e-7          # eigenvalue slack used by the vertex oracle
ZETA_EXPONENTS = range(-3, 4)


def _spectral_norm(M: np.ndarray) -> float:
    return float(np.linalg.norm(np.atleast_2d(M), 2))


def _box_indices(bound: np.ndarray) -> List[Tuple[int, int]]:
    """Row-major index pairs of the nonzero bound entries (zero entries carry
    no uncertainty and their multiplier slices are dropped)."""
    rows, cols = bound.shape
    return [(i, j) for i in range(rows) for j in range(cols) if bound[i, j] > 0.0]


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

@dataclass
class SynthesisCertificate:
    """Common-Lyapunov certificate for a fixed controller.

    ``objective = alpha / zeta`` is the certified level: positive means the
    closed loop is robustly exponentially stable for every box realization,
    with output error radius ``eps_c`` under the declared nonlinearity bound.
    """

    P: np.ndarray
    alpha: float
    zeta: float
    kappa: Dict[Tuple[int, int], float]
    mu: Dict[Tuple[int, int], float]
    gains: ControllerGains
    eps_c: float
    objective: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.objective > 0.0

    @property
    def lambda_min(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[0])

    @property
    def lambda_max(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[-1])


def eps_c(cert: SynthesisCertificate, k_b: float) -> float:
    """Certified regulation-error radius for the continuous implementation.

    ``eps_c = k_b * ||Cbar|| * sqrt(lambda_max(P) / (max(0, alpha/zeta) *
    lambda_min(P)))`` with the conventions: zero when ``k_b == 0`` and the
    objective is positive, infinite whenever the objective is not positive
    and the loop is actually uncertain (``k_b > 0`` or uncertified).
    """
    obj = cert.objective
    if obj <= 0.0:
        return float("inf")
    if k_b == 0.0:
        return 0.0
    nC = cert.diagnostics.get("norm_Cbar")
    if nC is None:
        raise ValueError("certificate lacks norm_Cbar diagnostic")
    lam = np.linalg.eigvalsh(cert.P)
    return float(k_b * nC * math.sqrt(lam[-1] / (obj * lam[0])))


# ---------------------------------------------------------------------------
# certification LMI (fixed gains)
# ---------------------------------------------------------------------------

def _certification_problem(
    model: PlantModel,
    aug: AugmentedSystem,
    zeta: Optional[float],
    margin: float = STRICT_MARGIN,
    p_floor: Optional[float] = None,
    p_cap: Optional[float] = None,
    pbf_cap: Optional[float] = None,
    alpha_of_zeta: Optional[float] = None,
) -> SdpProblem:
    """Assemble the fixed-gains certification LMI.

    Block rows: the drift block with the multiplier penalty, one diagonal
    slice per nonzero entry of each uncertainty bound (columns of ``P`` enter
    the off-diagonal rows), and the nonlinearity channel ``[J P, -zeta I]``.
    The input-side multiplier block is eliminated into explicit
    ``mu * (row of F Cbar)^T (row of F Cbar)`` terms so the whole constraint
    stays affine in every variable.

    ``zeta=None`` declares ``zeta`` as a variable (used by refinement modes
    that pin the scale of ``P`` instead).  ``alpha_of_zeta`` ties
    ``alpha = alpha_of_zeta * zeta`` instead of declaring ``alpha``.
    """
    nx, nu = model.n_x, model.n_u
    n = nx + nu
    FC = aug.F @ aug.Cbar
    ia = _box_indices(model.A_b)
    ib = _box_indices(model.B_b)
    na, nb = len(ia), len(ib)
    dim = n + na + nb + nx

    p = SdpProblem()
    zeta_is_var = zeta is None
    if alpha_of_zeta is None:
        p.add_scalar("alpha")
    if zeta_is_var:
        p.add_scalar("zeta", lower=margin)
    p.add_symmetric("P", n, min_eig=(margin if p_floor is None else p_floor))
    for t in range(na):
        p.add_scalar(f"kappa_{t}", lower=margin)
    for t in range(nb):
        p.add_scalar(f"mu_{t}", lower=margin)

    e = p.expr(dim)
    Acl = aug.Abar + aug.Bbar @ FC
    e.add_matrix_term("P", np.eye(n), Acl, 0, 0, symmetrize=True)
    if alpha_of_zeta is None:
        e.add_scalar_term("alpha", np.eye(n), 0, 0)
    else:
        e.add_scalar_term("zeta", float(alpha_of_zeta) * np.eye(n), 0, 0)
    for t, (i, j) in enumerate(ia):
        Ejj = np.zeros((n, n))
        Ejj[j, j] = 1.0
        e.add_scalar_term(f"kappa_{t}", Ejj, 0, 0)
    for t, (i, k) in enumerate(ib):
        ck = FC[k, :].reshape(-1, 1)
        e.add_scalar_term(f"mu_{t}", ck @ ck.T, 0, 0)
    r = n
    if na:
        sel = np.zeros((n, na))
        for t, (i, j) in enumerate(ia):
            sel[i, t] = 1.0
        e.add_matrix_term("P", sel.T, np.eye(n), r, 0)
        for t, (i, j) in enumerate(ia):
            D = np.zeros((na, na))
            D[t, t] = -model.A_b[i, j] ** -2.0
            e.add_scalar_term(f"kappa_{t}", D, r, r)
        r += na
    if nb:
        sel = np.zeros((n, nb))
        for t, (i, k) in enumerate(ib):
            sel[i, t] = 1.0
        e.add_matrix_term("P", sel.T, np.eye(n), r, 0)
        for t, (i, k) in enumerate(ib):
            D = np.zeros((nb, nb))
            D[t, t] = -model.B_b[i, k] ** -2.0
            e.add_scalar_term(f"mu_{t}", D, r, r)
        r += nb
    e.add_matrix_term("P", aug.J, np.eye(n), r, 0)
    if zeta_is_var:
        e.add_scalar_term("zeta", -np.eye(nx), r, r)
    else:
        e.add_constant(-float(zeta) * np.eye(nx), r, r)
    p.add_constraint(e, "nsd", "certification")

    if p_cap is not None:
        cap = p.expr(n)
        cap.add_matrix_term("P", np.eye(n), np.eye(n), 0, 0)
        cap.add_constant(-float(p_cap) * np.eye(n), 0, 0)
        p.add_constraint(cap, "nsd", "p_cap")
    if pbf_cap is not None:
        m2 = aug.Fhat.shape[1]
        nb_blk = p.expr(n + m2)
        nb_blk.add_constant(-float(pbf_cap) * np.eye(n), 0, 0)
        nb_blk.add_constant(-float(pbf_cap) * np.eye(m2), n, n)
        nb_blk.add_matrix_term("P", np.eye(n), aug.Bbar @ aug.Fhat, 0, n)
        p.add_constraint(nb_blk, "nsd", "pbf_cap")
    if alpha_of_zeta is None:
        p.set_objective({"alpha": 1.0})
    p.info = {"ia": ia, "ib": ib, "dim": dim, "n": n}
    return p


def assemble_certification(model: PlantModel, gains: ControllerGains,
                           zeta: float) -> SdpProblem:
    """Certification LMI for fixed gains and fixed ``zeta``; maximizes alpha."""
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    return _certification_problem(model, augment(model, gains), float(zeta))


def _extract_certificate(model: PlantModel, gains: ControllerGains,
                         aug: AugmentedSystem, sol, zeta: float,
                         alpha: float) -> SynthesisCertificate:
    ia = _box_indices(model.A_b)
    ib = _box_indices(model.B_b)
    kappa = {pair: float(sol[f"kappa_{t}"]) for t, pair in enumerate(ia)}
    mu = {pair: float(sol[f"mu_{t}"]) for t, pair in enumerate(ib)}
    cert = SynthesisCertificate(
        P=np.asarray(sol["P"], dtype=float),
        alpha=float(alpha),
        zeta=float(zeta),
        kappa=kappa,
        mu=mu,
        gains=gains,
        eps_c=float("nan"),
        objective=float(alpha) / float(zeta),
        diagnostics={
            "norm_Cbar": _spectral_norm(aug.Cbar),
            "max_constraint_violation": sol.max_constraint_violation,
            "status": sol.status.value,
        },
    )
    cert.eps_c = eps_c(cert, model.k_b)
    return cert


def certify(model: PlantModel, gains: ControllerGains,
            zeta_grid: Sequence[float], tol: float = conic.DEFAULT_TOL,
            max_iter: int = conic.DEFAULT_MAX_ITER) -> SynthesisCertificate:
    """Best certificate for fixed gains over a grid of ``zeta`` values.

    Returns the certificate maximizing ``alpha/zeta`` with per-``zeta``
    diagnostics attached.  An objective that never exceeds zero yields an
    uncertified certificate with ``eps_c = inf``; in that case a destabilizing
    realization exists within the pi/2-inflated boxes.

    Raises
    ------
    AllSolvesFailed
        When no grid point produces a usable solution.
    """
    if len(zeta_grid) == 0:
        raise ValueError("zeta_grid must be nonempty")
    aug = augment(model, gains)
    best = None
    per_zeta = []
    for z in zeta_grid:
        prob = _certification_problem(model, aug, float(z))
        sol = solve(prob, tol=tol, max_iter=max_iter)
        if not sol.ok:
            per_zeta.append({"zeta": float(z), "status": sol.status.value})
            continue
        alpha = float(sol["alpha"])
        per_zeta.append({"zeta": float(z), "status": sol.status.value,
                         "alpha": alpha, "objective": alpha / float(z)})
        if best is None or alpha / float(z) > best[0]:
            best = (alpha / float(z), float(z), alpha, sol)
    if best is None:
        raise AllSolvesFailed("certification failed on every zeta grid point")
    _, z, alpha, sol = best
    cert = _extract_certificate(model, gains, aug, sol, z, alpha)
    cert.diagnostics["per_zeta"] = per_zeta
    return cert


# ---------------------------------------------------------------------------
# convexification lemmas (also property-tested directly)
# ---------------------------------------------------------------------------

def linearize_bilinear(Y: np.ndarray, Z: np.ndarray, Y_k: np.ndarray,
                       Z_k: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Young-inequality block whose negative semidefiniteness forces
    ``Sym(Y.T Z) <= 0``.

    ``Y, Z`` share the shape (p, m); ``U`` is (p, p) positive definite.  The
    returned block is exact at ``(Y, Z) = (Y_k, Z_k)``:

        [[Sym((Y-Y_k).T Z_k + Y_k.T (Z-Z_k) + Y_k.T Z_k),  *,   *  ],
         [              (Y-Y_k),                          -U,   *  ],
         [              (Z-Z_k),                           0, -inv(U)]]
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y_k = np.atleast_2d(np.asarray(Y_k, dtype=float))
    Z_k = np.atleast_2d(np.asarray(Z_k, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if Y.shape != Z.shape or Y.shape != Y_k.shape or Z.shape != Z_k.shape:
        raise DimensionMismatch("Y, Z, Y_k, Z_k must share one shape")
    pdim, m = Y.shape
    if U.shape != (pdim, pdim):
        raise DimensionMismatch(f"U must be {pdim}x{pdim}, got {U.shape}")
    if conic.min_eig(U) <= 0:
        raise NotPositiveDefinite("U must be positive definite")
    S = (Y - Y_k).T @ Z_k + Y_k.T @ (Z - Z_k) + Y_k.T @ Z_k
    S = S + S.T
    Uinv = np.linalg.inv(U)
    out = np.zeros((m + 2 * pdim, m + 2 * pdim))
    out[:m, :m] = S
    out[m:m + pdim, :m] = Y - Y_k
    out[:m, m:m + pdim] = (Y - Y_k).T
    out[m:m + pdim, m:m + pdim] = -U
    out[m + pdim:, :m] = Z - Z_k
    out[:m, m + pdim:] = (Z - Z_k).T
    out[m + pdim:, m + pdim:] = -0.5 * (Uinv + Uinv.T)
    return out


def inverse_overapprox(U: np.ndarray, U_k: np.ndarray) -> np.ndarray:
    """Tangent over-approximation of ``-inv(U)`` at ``U_k``.

    Returns ``-2 inv(U_k) + inv(U_k) U inv(U_k)``; since ``-inv`` is matrix
    concave this always dominates ``-inv(U)`` and is exact at ``U = U_k``.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    U_k = np.atleast_2d(np.asarray(U_k, dtype=float))
    if conic.min_eig(U) <= 0 or conic.min_eig(U_k) <= 0:
        raise NotPositiveDefinite("U and U_k must be positive definite")
    Uk_inv = np.linalg.inv(U_k)
    out = -2.0 * Uk_inv + Uk_inv @ U @ Uk_inv
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# brute-force vertex oracle
# ---------------------------------------------------------------------------

@dataclass
class VertexCheck:
    result: str                       # "Verified" | "Refuted" | "Skipped"
    vertices_checked: int = 0
    worst_eig: float = float("nan")
    vertex: Optional[dict] = None     # sign patterns of the refuting vertex

    @property
    def verified(self) -> bool:
        return self.result == "Verified"


def vertex_verify(model: PlantModel, gains: ControllerGains, P: np.ndarray,
                  alpha: float, zeta: float, max_entries: int = 20,
                  oracle_tol: float = ORACLE_TOL) -> VertexCheck:
    """Exhaustive check of a certificate over all box sign vertices.

    The robust constraint is affine in the perturbations, so its worst case
    over the box is attained at a sign vertex; the certificate is confirmed
    exactly when every vertex satisfies

        Sym(P (Abar + dA + (Bbar + dB) F Cbar)) + P J.T J P / zeta
            <= -(alpha - oracle_tol) I.

    Enumerates ``2**m`` vertices for ``m`` nonzero bound entries; returns
    ``Skipped`` when ``m > max_entries``.
    """
    aug = augment(model, gains)
    nx, nu = model.n_x, model.n_u
    n = nx + nu
    P = np.asarray(P, dtype=float)
    FC = aug.F @ aug.Cbar
    ia = _box_indices(model.A_b)
    ib = _box_indices(model.B_b)
    m = len(ia) + len(ib)
    if m > max_entries:
        return VertexCheck("Skipped")
    base = P @ (aug.Abar + aug.Bbar @ FC)
    base = base + base.T + (P @ aug.J.T) @ (aug.J @ P) / float(zeta) \
        + (float(alpha) - oracle_tol) * np.eye(n)
    gens = []
    for (i, j) in ia:
        E = np.zeros((nx, nx))
        E[i, j] = model.A_b[i, j]
        G = P @ embed_dA(E, nu)
        gens.append(G + G.T)
    for (i, k) in ib:
        E = np.zeros((nx, nu))
        E[i, k] = model.B_b[i, k]
        G = P @ (embed_dB(E, nu) @ FC)
        gens.append(G + G.T)
    count = 1 << m
    signs = ((np.arange(count)[:, None] >> np.arange(m)[None, :]) & 1) * 2.0 - 1.0
    if m:
        stack = base[None, :, :] + np.tensordot(signs, np.stack(gens), axes=(1, 0))
    else:
        stack = base[None, :, :]
    eigs = np.linalg.eigvalsh(stack)
    worst_idx = int(np.argmax(eigs[:, -1]))
    worst = float(eigs[worst_idx, -1])
    if worst <= 0.0:
        return VertexCheck("Verified", vertices_checked=count, worst_eig=worst)
    s = signs[worst_idx]
    vertex = {
        "dA_signs": {f"{i},{j}": float(s[t]) for t, (i, j) in enumerate(ia)},
        "dB_signs": {f"{i},{k}": float(s[len(ia) + t]) for t, (i, k) in enumerate(ib)},
    }
    return VertexCheck("Refuted", vertices_checked=count, worst_eig=worst,
                       vertex=vertex)


# ---------------------------------------------------------------------------
# synthesis: sequential parametric convex approximation
# ---------------------------------------------------------------------------

@dataclass
class SynthesisOptions:
    eps_alg: float = 1e-3          # stop when accepted objective stalls by this much
    max_outer: int = 50
    tol: float = conic.DEFAULT_TOL
    margin: float = STRICT_MARGIN
    zeta_exponents: Sequence[int] = tuple(ZETA_EXPONENTS)
    init: str = "auto"             # "auto": screened nominal candidates; "cold": flat start
    conv_floor: float = 1e-6       # objective level below which the stall test is inactive
    init_slack: float = 0.05       # relative slack added to the initial Lyapunov LMI
    cross_seed: float = 0.05       # relative cross-block seed breaking the flat start's symmetry


def _zeta_grid(exponents) -> List[float]:
    return [10.0 ** e for e in exponents]


def _grid_maximize(solve_at, exponents, tie_tol: float = 1e-7):
    """Maximize objective(zeta) over the decade grid, refined once by trisection.

    Near-ties (within ``tie_tol`` scaled) resolve toward the largest ``zeta``:
    below the solver noise floor the objective is flat in ``zeta`` and the
    largest value gives the best-conditioned subproblem.
    """
    evals = []
    for z in _zeta_grid(exponents):
        r = solve_at(z)
        if r is not None:
            evals.append((r[0], z, r))
    if not evals:
        return None
    top = max(e[0] for e in evals)
    ties = [e for e in evals if e[0] >= top - tie_tol * max(1.0, abs(top))]
    best = max(ties, key=lambda e: e[1])
    e0 = math.log10(best[1])
    for z in (10.0 ** (e0 - 1.0 / 3.0), 10.0 ** (e0 + 1.0 / 3.0)):
        r = solve_at(z)
        if r is not None and r[0] > best[0] + tie_tol * max(1.0, abs(best[0])):
            best = (r[0], z, r)
    return best


def _init_alpha_problem(model: PlantModel, zeta: float,
                        margin: float) -> SdpProblem:
    """Flat-start level problem: robust Lyapunov LMI with identity Lyapunov
    matrix and zero gains, one multiplier block per uncertain state entry."""
    nx, nu = model.n_x, model.n_u
    n = nx + nu
    aug = augment(model, ControllerGains(np.zeros((nu, model.n_y)),
                                         np.eye(nu), np.zeros((nu, model.n_y))))
    ia = _box_indices(model.A_b)
    p = SdpProblem()
    p.add_scalar("alpha")
    for t in range(len(ia)):
        p.add_scalar(f"lam_{t}", lower=margin)
        p.add_symmetric(f"W_{t}", n)
    for t, (i, j) in enumerate(ia):
        e = p.expr(n + 1)
        e.add_matrix_term(f"W_{t}", -np.eye(n), np.eye(n), 0, 0)
        Eii = np.zeros((n, n))
        Eii[i, i] = 1.0
        e.add_scalar_term(f"lam_{t}", model.A_b[i, j] ** 2 * Eii, 0, 0)
        row = np.zeros((1, n))
        row[0, j] = 1.0
        e.add_constant(-row, n, 0)
        e.add_scalar_term(f"lam_{t}", -np.ones((1, 1)), n, n)
        p.add_constraint(e, "nsd", f"w_{t}")
    e = p.expr(n)
    e.add_constant(aug.Abar + aug.Abar.T + float(zeta) * (aug.J.T @ aug.J), 0, 0)
    e.add_scalar_term("alpha", np.eye(n), 0, 0)
    for t in range(len(ia)):
        e.add_matrix_term(f"W_{t}", np.eye(n), np.eye(n), 0, 0)
    p.add_constraint(e, "nsd", "level")
    p.set_objective({"alpha": 1.0})
    return p


def _init_P(model: PlantModel, alpha0: float, zeta0: float,
            opts: SynthesisOptions) -> np.ndarray:
    """Initial Lyapunov matrix: nominal LMI at the flat-start level, best
    conditioned within a unit cap, then deterministically seeded in the
    state/controller cross block.

    The flat start (zero gains, block-diagonal P) is a fixed point of the
    iteration: the program is invariant under jointly flipping the sign of
    the cross block of P and of the integrator gains, so an exactly central
    solver never leaves the symmetric subspace where the achievable level is
    zero.  A small feasible cross-block perturbation (any sign; the two
    orbits are isomorphic) makes the first iterations productive.
    """
    nx, nu = model.n_x, model.n_u
    n = nx + nu
    aug = augment(model, ControllerGains(np.zeros((nu, model.n_y)),
                                         np.eye(nu), np.zeros((nu, model.n_y))))
    scale = 1.0 + _spectral_norm(aug.Abar)
    alpha_s = min(alpha0, 0.0) - opts.init_slack * scale
    p = SdpProblem()
    p.add_scalar("t", lower=opts.margin)
    p.add_symmetric("P", n)
    e = p.expr(n + nx)
    e.add_matrix_term("P", np.eye(n), aug.Abar, 0, 0, symmetrize=True)
    e.add_constant(alpha_s * np.eye(n), 0, 0)
    e.add_matrix_term("P", aug.J, np.eye(n), n, 0)
    e.add_constant(-float(zeta0) * np.eye(nx), n, n)
    p.add_constraint(e, "nsd", "lyap")
    cap = p.expr(n)
    cap.add_matrix_term("P", np.eye(n), np.eye(n), 0, 0)
    cap.add_constant(-np.eye(n), 0, 0)
    p.add_constraint(cap, "nsd", "cap")
    floor = p.expr(n)
    floor.add_scalar_term("t", np.eye(n), 0, 0)
    floor.add_matrix_term("P", -np.eye(n), np.eye(n), 0, 0)
    p.add_constraint(floor, "nsd", "floor")
    p.set_objective({"t": 1.0})
    sol = solve(p, tol=opts.tol)
    if not sol.ok:
        raise InitializationInfeasible(f"initial Lyapunov solve: {sol.status.value}")
    P0 = np.asarray(sol["P"], dtype=float)

    S = np.zeros((n, n))
    S[:nx, nx:] = 1.0
    S = S + S.T
    eps = opts.cross_seed * float(np.linalg.eigvalsh(P0)[0])

    def feasible(P):
        M = np.block([
            [P @ aug.Abar + aug.Abar.T @ P + min(alpha0, 0.0) * np.eye(n), P @ aug.J.T],
            [aug.J @ P, -float(zeta0) * np.eye(nx)],
        ])
        return conic.max_eig(M) <= 1e-9 and conic.min_eig(P) >= 1e-9

    for _ in range(60):
        if eps <= 0.0 or feasible(P0 + eps * S):
            break
        eps *= 0.5
    if eps > 0.0 and feasible(P0 + eps * S):
        P0 = P0 + eps * S
    return P0


def _spca_step_problem(model: PlantModel, Pk: np.ndarray, Fk: np.ndarray,
                       muk: np.ndarray, Uk: np.ndarray, zeta: float,
                       margin: float) -> SdpProblem:
    """One convex synthesis step around the center ``(Pk, Fk, muk, Uk)``.

    The drift block carries the partial linearization
    ``Sym(P Abar + Pk Bbar (F - Fk) Cbar + P Bbar Fk Cbar) + alpha I``; the
    second-order remainder ``Sym((P-Pk) Bbar (F-Fk) Cbar)`` is majorized by
    the trust-region column blocks ``(P-Pk) Uk`` against ``-(2 Uk - U)`` and
    ``Bbar (F-Fk) Cbar`` against ``-U``; inverse multipliers are majorized by
    scaled tangent blocks.  Feasible points are feasible for the true design
    inequality at the same ``(alpha, zeta)``.
    """
    nx, nu, ny = model.n_x, model.n_u, model.n_y
    n = nx + nu
    zero = ControllerGains(np.zeros((nu, ny)), np.eye(nu), np.zeros((nu, ny)))
    aug = augment(model, zero)
    ia = _box_indices(model.A_b)
    ib = _box_indices(model.B_b)
    na, nb = len(ia), len(ib)
    dim = n + na + nb + nb + n + n + nx

    p = SdpProblem()
    p.add_scalar("alpha")
    p.add_symmetric("P", n, min_eig=margin)
    p.add_symmetric("U", n, min_eig=margin)
    p.add_rectangular("B_c", nu, ny)
    p.add_rectangular("C_c", nu, nu)
    p.add_rectangular("D_c", nu, ny)
    for t in range(na):
        p.add_scalar(f"kappa_{t}", lower=margin)
    for t in range(nb):
        p.add_scalar(f"mu_{t}", lower=margin)

    # F = Sd @ D_c @ TD + Sd @ C_c @ TC + Sb @ B_c @ TD  (gain placements)
    Sd = np.zeros((2 * nu, nu))
    Sd[:nu, :] = np.eye(nu)
    Sb = np.zeros((2 * nu, nu))
    Sb[nu:, :] = np.eye(nu)
    TD = np.zeros((ny, ny + nu))
    TD[:, :ny] = np.eye(ny)
    TC = np.zeros((nu, ny + nu))
    TC[:, ny:] = np.eye(nu)
    gain_terms = [("D_c", Sd, TD), ("C_c", Sd, TC), ("B_c", Sb, TD)]

    e = p.expr(dim)
    e.add_matrix_term("P", np.eye(n), aug.Abar, 0, 0, symmetrize=True)
    for name, S, T in gain_terms:
        e.add_matrix_term(name, Pk @ aug.Bbar @ S, T @ aug.Cbar, 0, 0, symmetrize=True)
    PBFkC = Pk @ aug.Bbar @ Fk @ aug.Cbar
    e.add_constant(-(PBFkC + PBFkC.T), 0, 0)
    e.add_matrix_term("P", np.eye(n), aug.Bbar @ Fk @ aug.Cbar, 0, 0, symmetrize=True)
    e.add_scalar_term("alpha", np.eye(n), 0, 0)
    for t, (i, j) in enumerate(ia):
        Ejj = np.zeros((n, n))
        Ejj[j, j] = 1.0
        e.add_scalar_term(f"kappa_{t}", Ejj, 0, 0)
    r = n
    if na:
        sel = np.zeros((n, na))
        for t, (i, j) in enumerate(ia):
            sel[i, t] = 1.0
        e.add_matrix_term("P", sel.T, np.eye(n), r, 0)
        for t, (i, j) in enumerate(ia):
            D = np.zeros((na, na))
            D[t, t] = -model.A_b[i, j] ** -2.0
            e.add_scalar_term(f"kappa_{t}", D, r, r)
        r += na
    if nb:
        sel = np.zeros((n, nb))
        for t, (i, k) in enumerate(ib):
            sel[i, t] = 1.0
        e.add_matrix_term("P", sel.T, np.eye(n), r, 0)
        for t, (i, k) in enumerate(ib):
            D = np.zeros((nb, nb))
            D[t, t] = -model.B_b[i, k] ** -2.0
            e.add_scalar_term(f"mu_{t}", D, r, r)
        r += nb
        # scaled input-multiplier rows: diag(muk) W.T F Cbar against -(2 muk - mu)
        WT = np.zeros((nb, 2 * nu))
        for t, (i, k) in enumerate(ib):
            WT[t, k] = muk[t]
        for name, S, T in gain_terms:
            e.add_matrix_term(name, WT @ S, T @ aug.Cbar, r, 0)
        for t, (i, k) in enumerate(ib):
            D = np.zeros((nb, nb))
            D[t, t] = 1.0
            e.add_scalar_term(f"mu_{t}", D, r, r)
            Dc = np.zeros((nb, nb))
            Dc[t, t] = -2.0 * muk[t]
            e.add_constant(Dc, r, r)
        r += nb
    # (P - Pk) trust-region rows against -(2 Uk - U)
    e.add_matrix_term("P", Uk, np.eye(n), r, 0)
    e.add_constant(-Uk @ Pk, r, 0)
    e.add_matrix_term("U", np.eye(n), np.eye(n), r, r)
    e.add_constant(-2.0 * Uk, r, r)
    r += n
    # gain-step rows against -U; orientation matters: the Schur reduction
    # must produce (Bbar dF Cbar).T U^{-1} (Bbar dF Cbar) to majorize the
    # bilinear remainder Sym((P-Pk) Bbar dF Cbar)
    for name, S, T in gain_terms:
        e.add_matrix_term(name, aug.Bbar @ S, T @ aug.Cbar, r, 0)
    e.add_constant(-(aug.Bbar @ Fk @ aug.Cbar), r, 0)
    e.add_matrix_term("U", -np.eye(n), np.eye(n), r, r)
    r += n
    e.add_matrix_term("P", aug.J, np.eye(n), r, 0)
    e.add_constant(-float(zeta) * np.eye(nx), r, r)
    p.add_constraint(e, "nsd", "spca")
    p.set_objective({"alpha": 1.0})
    return p


def _pi_candidates(model: PlantModel) -> List[ControllerGains]:
    """Deterministic nominal PI designs used to start the iteration.

    Each candidate is a regulator for the integrator-augmented nominal plant
    projected onto the output-feedback structure; candidates that fail the
    algebraic design are skipped and every survivor is screened by the
    certification LMI before use.
    """
    from scipy.linalg import solve_continuous_are

    nx, nu, ny = model.n_x, model.n_u, model.n_y
    Api = np.block([[model.A, np.zeros((nx, ny))],
                    [model.C, np.zeros((ny, ny))]])
    Bpi = np.vstack([model.B, np.zeros((ny, nu))])
    CtC = model.C @ model.C.T
    try:
        Cpinv = model.C.T @ np.linalg.inv(CtC)
    except np.linalg.LinAlgError:
        Cpinv = np.linalg.pinv(model.C)
    Bc0 = np.eye(nu, ny)
    out = []
    for (qx, qs, r) in [(1.0, 1.0, 1.0), (1.0, 10.0, 1.0), (10.0, 1.0, 1.0),
                        (1.0, 3.0, 1.0), (3.0, 1.0, 1.0), (1.0, 1.0, 10.0),
                        (1.0, 10.0, 3.0)]:
        Q = np.diag([qx] * nx + [qs] * ny)
        R = r * np.eye(nu)
        try:
            X = solve_continuous_are(Api, Bpi, Q, R)
        except (np.linalg.LinAlgError, ValueError):
            continue
        K = np.linalg.solve(R, Bpi.T @ X)
        Dc = -K[:, :nx] @ Cpinv
        Ks = K[:, nx:]
        Cc = -Ks @ np.linalg.pinv(Bc0) if ny != nu else -Ks
        try:
            out.append(ControllerGains(B_c=Bc0, C_c=Cc, D_c=Dc))
        except DimensionMismatch:
            continue
    return out


def synthesize(model: PlantModel, opts: Optional[SynthesisOptions] = None):
    """Co-design controller gains and a common Lyapunov certificate.

    Runs the sequential parametric convex approximation: an initialization
    pass fixes the starting center (flat start per the algorithm, upgraded to
    the best certification-screened nominal PI design when one certifies a
    higher level), then each outer iteration solves the convex step problem
    over the ``zeta`` decade grid (one trisection refinement) and re-centers
    at accepted iterates.  Accepted objectives are non-decreasing up to
    solver noise; the loop stops when the accepted objective stalls within
    ``eps_alg`` above the noise floor, after a rejected step fails a single
    re-centered retry, or at ``max_outer``.

    Returns
    -------
    (gains, certificate, trace)

    Raises
    ------
    InitializationInfeasible
        If the initialization solves fail outright.
    StalledBelowZero
        If the iteration converges without a positive certified objective.
    """
    opts = opts or SynthesisOptions()
    nx, nu, ny = model.n_x, model.n_u, model.n_y
    n = nx + nu
    ib = _box_indices(model.B_b)
    trace: List[dict] = []

    def pack_F(g: ControllerGains) -> np.ndarray:
        F = np.zeros((2 * nu, ny + nu))
        F[:nu, :ny] = g.D_c
        F[:nu, ny:] = g.C_c
        F[nu:, :ny] = g.B_c
        return F

    # -- initialization: flat start level and Lyapunov matrix ----------------
    def level_at(z):
        sol = solve(_init_alpha_problem(model, z, opts.margin), tol=opts.tol)
        if not sol.ok:
            return None
        return (float(sol["alpha"]) / z, sol)

    init = _grid_maximize(level_at, opts.zeta_exponents)
    if init is None:
        raise InitializationInfeasible("flat-start level problem failed on all zeta")
    _, zeta0, (obj0, sol0) = init
    alpha0 = float(sol0["alpha"])
    P0 = _init_P(model, alpha0, zeta0, opts)
    trace.append({"phase": "init", "alpha": alpha0, "zeta": zeta0,
                  "objective": alpha0 / zeta0, "start": "flat"})

    Pk, Fk, Uk = P0, np.zeros((2 * nu, ny + nu)), np.eye(n)
    muk = np.ones(len(ib))

    if opts.init == "auto":
        best_cand = None
        for g in _pi_candidates(model):
            try:
                cand = certify(model, g, [1.0], tol=opts.tol)
            except AllSolvesFailed:
                continue
            if cand.objective > 0 and (best_cand is None
                                       or cand.objective > best_cand[0]):
                best_cand = (cand.objective, g, cand)
        if best_cand is not None and best_cand[0] > max(0.0, alpha0 / zeta0):
            _, g, cand = best_cand
            Pk = cand.P
            Fk = pack_F(g)
            if ib:
                muk = np.array([cand.mu[pair] for pair in ib])
            trace.append({"phase": "init", "alpha": cand.alpha, "zeta": cand.zeta,
                          "objective": cand.objective, "start": "screened_pi"})

    # -- outer iteration ------------------------------------------------------
    best = None          # (objective, zeta, solution)
    prev_obj = None
    stalls = 0
    for k in range(opts.max_outer):
        def step_at(z, _Pk=Pk, _Fk=Fk, _muk=muk, _Uk=Uk):
            sol = solve(_spca_step_problem(model, _Pk, _Fk, _muk, _Uk, z,
                                           opts.margin), tol=opts.tol)
            if not sol.ok:
                return None
            return (float(sol["alpha"]) / z, sol)

        r = _grid_maximize(step_at, opts.zeta_exponents)
        if r is None:
            trace.append({"phase": "iterate", "k": k, "status": "all_solves_failed"})
            break
        obj, z, (_, sol) = r
        gains_k = ControllerGains(B_c=sol["B_c"], C_c=sol["C_c"], D_c=sol["D_c"])
        F = pack_F(gains_k)
        tie = 1e-8 * max(1.0, abs(best[0]) if best else 1.0)
        accepted = best is None or obj >= best[0] - tie
        trace.append({"phase": "iterate", "k": k, "objective": obj, "zeta": z,
                      "alpha": float(sol["alpha"]), "accepted": bool(accepted),
                      "norm_F": float(np.linalg.norm(F))})
        if accepted:
            if best is None or obj > best[0]:
                best = (obj, z, sol)
            Pk = np.asarray(sol["P"], dtype=float)
            Fk = F
            Uk = np.asarray(sol["U"], dtype=float)
            if ib:
                muk = np.array([float(sol[f"mu_{t}"]) for t in range(len(ib))])
            if (prev_obj is not None and abs(obj - prev_obj) <= opts.eps_alg
                    and obj > opts.conv_floor):
                break
            prev_obj = obj
            stalls = 0
        else:
            stalls += 1
            Uk = np.eye(n)
            muk = np.ones(len(ib))
            if best is not None:
                Pk = np.asarray(best[2]["P"], dtype=float)
                Fk = pack_F(ControllerGains(B_c=best[2]["B_c"],
                                            C_c=best[2]["C_c"],
                                            D_c=best[2]["D_c"]))
            if stalls >= 2:
                break

    if best is None or best[0] <= 0.0:
        raise StalledBelowZero(best[0] if best else float("-inf"), trace)
    obj, z, sol = best
    gains = ControllerGains(B_c=sol["B_c"], C_c=sol["C_c"], D_c=sol["D_c"])
    aug = augment(model, gains)
    ia = _box_indices(model.A_b)
    kappa = {pair: float(sol[f"kappa_{t}"]) for t, pair in enumerate(ia)}
    mu = {pair: float(sol[f"mu_{t}"]) for t, pair in enumerate(ib)}
    cert = SynthesisCertificate(
        P=np.asarray(sol["P"], dtype=float), alpha=float(sol["alpha"]),
        zeta=float(z), kappa=kappa, mu=mu, gains=gains, eps_c=float("nan"),
        objective=obj,
        diagnostics={"norm_Cbar": _spectral_norm(aug.Cbar),
                     "max_constraint_violation": sol.max_constraint_violation,
                     "status": sol.status.value, "iterations": len(trace)},
    )
    cert.eps_c = eps_c(cert, model.k_b)
    return gains, cert, trace


# ---------------------------------------------------------------------------
# digital-implementation oriented certificate refinement
# ---------------------------------------------------------------------------

def refine_for_etc(model: PlantModel, gains: ControllerGains,
                   objective_fraction: float = 0.5,
                   t_grid: Sequence[float] = (2.0, 3.0, 4.5, 7.0, 10.0, 16.0, 24.0),
                   s_factors: Sequence[float] = (1.05, 1.3, 1.8, 2.6, 4.0, 6.0),
                   tol: float = conic.DEFAULT_TOL) -> SynthesisCertificate:
    """Re-certify fixed gains with a Lyapunov matrix shaped for sampling bounds.

    The certified maximum inter-sample time and the admissible relative
    trigger threshold both grow with the ratio
    ``alpha^2 lambda_min(P) / (theta_B^2 lambda_max(P))``, a quantity the
    plain level-maximizing certificate ignores (the level ``alpha/zeta`` is
    scale invariant, the ratio is not).  This pass fixes the certified level
    at ``objective_fraction`` of the best achievable one by tying
    ``alpha = level * zeta``, pins the scale with ``I <= P <= t I``, caps
    ``||P Bbar Fhat|| <= s`` on a small grid, maximizes ``zeta`` (hence
    ``alpha`` at fixed shape), and keeps the grid point with the largest
    resulting true ratio.  The result is a valid certificate like any other.
    """
    aug = augment(model, gains)
    base = certify(model, gains, [1.0], tol=tol)
    if base.objective <= 0:
        return base
    level = objective_fraction * base.objective
    s_base = max(_spectral_norm(aug.Bbar @ aug.Fhat), 1e-12)
    best = None
    for t_cap in t_grid:
        for s_fac in s_factors:
            s_cap = s_fac * s_base
            prob = _certification_problem(model, aug, None, p_floor=1.0,
                                          p_cap=t_cap, pbf_cap=s_cap,
                                          alpha_of_zeta=level)
            prob.set_objective({"zeta": 1.0})
            sol = solve(prob, tol=tol)
            if not sol.ok:
                continue
            zeta = float(sol["zeta"])
            alpha = level * zeta
            if alpha <= 0:
                continue
            P = np.asarray(sol["P"], dtype=float)
            lam = np.linalg.eigvalsh(P)
            nPBF = _spectral_norm(P @ aug.Bbar @ aug.Fhat) \
                + _spectral_norm(P) * _spectral_norm(model.B_b) \
                * _spectral_norm(aug.Fhat)
            ratio = alpha ** 2 * lam[0] / max(nPBF, 1e-300) ** 2 / lam[-1]
            if best is None or ratio > best[0]:
                best = (ratio, t_cap, s_cap, sol, alpha, zeta)
    if best is None:
        return base
    _, t_cap, s_cap, sol, alpha, zeta = best
    cert = _extract_certificate(model, gains, aug, sol, zeta, alpha)
    cert.diagnostics["refined_for_etc"] = {"t_cap": t_cap, "s_cap": s_cap}
    return cert


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def certificate_to_dict(cert: SynthesisCertificate, model: PlantModel,
                        task: RegulationTask) -> dict:
    return {
        "model": model_to_dict(model, task),
        "gains": {
            "B_c": cert.gains.B_c.tolist(),
            "C_c": cert.gains.C_c.tolist(),
            "D_c": cert.gains.D_c.tolist(),
        },
        "P": cert.P.tolist(),
        "alpha": cert.alpha,
        "zeta": cert.zeta,
        "kappa": {f"{i},{j}": v for (i, j), v in cert.kappa.items()},
        "mu": {f"{i},{k}": v for (i, k), v in cert.mu.items()},
        "eps_c": cert.eps_c,
        "objective": cert.objective,
        "diagnostics": cert.diagnostics,
    }


def certificate_from_dict(data: dict):
    model, task = model_from_dict(data["model"])
    gains = ControllerGains(
        B_c=data["gains"]["B_c"], C_c=data["gains"]["C_c"], D_c=data["gains"]["D_c"]
    )
    cert = SynthesisCertificate(
        P=np.asarray(data["P"], dtype=float),
        alpha=float(data["alpha"]),
        zeta=float(data["zeta"]),
        kappa={tuple(int(x) for x in k.split(",")): float(v)
               for k, v in data["kappa"].items()},
        mu={tuple(int(x) for x in k.split(",")): float(v)
            for k, v in data["mu"].items()},
        gains=gains,
        eps_c=float(data["eps_c"]),
        objective=float(data["objective"]),
        diagnostics=data.get("diagnostics", {}),
    )
    return cert, model, task


def save_certificate(path, cert: SynthesisCertificate, model: PlantModel,
                     task: RegulationTask):
    with open(path, "w") as fh:
        json.dump(certificate_to_dict(cert, model, task), fh, indent=2)
        fh.write("\n")


def load_certificate(path):
    with open(path) as fh:
        return certificate_from_dict(json.load(fh))
