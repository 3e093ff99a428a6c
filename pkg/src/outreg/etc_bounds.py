"""Certified constants and error bounds for event-triggered implementation.

Given a synthesis certificate, this module computes the growth and gain
constants of the sampled-data closed loop, the certified supremum ``h_max``
of inter-sample intervals, and the certified regulation-error radius
``eps_d`` of the event-triggered implementation as a function of the sample
spacing bound ``h_bar`` and the quadratic trigger thresholds ``(q0, q1)``.

``Undefined`` outcomes (radicand or shared denominator nonpositive, spacing
beyond ``h_max``) are first-class values represented as ``None``; nothing
here raises for them.

Formula interpretation notes
----------------------------
Two printed constants are dimensionally inconsistent as stated and are
implemented in the unique composing reading:

* ``beta`` multiplies the integrator gain by the output map on the measured
  channel only: ``beta = ||P|| * ||B_c C||`` (the formal product of ``B_c``
  with the full stacked output matrix does not compose).
* ``theta_AB`` bounds the drift of the intersample deviation.  Between
  samples both the held input and the sampled controller slope are frozen,
  so the deviation drift is ``Abar + dA`` embedded; the printed
  input-channel correction cancels exactly under the consistent embedding
  (it is identically zero whenever the dimensions allow a literal reading),
  leaving ``theta_AB = max ||Abar + embed(dA)||`` over the box.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .conic import psd_check
from .errors import DimensionMismatch
from .model import AugmentedSystem, ControllerGains, PlantModel, embed_dB
from .synthesis import SynthesisCertificate

LIMIT_TOL = 1e-10          # removable-singularity switch for theta_AB -> 0
VERTEX_CAP = 20            # max box entries enumerated exactly


def _spec_norm(M) -> float:
    return float(np.linalg.norm(np.atleast_2d(M), 2))


def _vertex_max_norm(base: np.ndarray, gens, cap: Optional[int] = None):
    """Max spectral norm of ``base + sum s_i G_i`` over sign vertices.

    The norm is convex and the family affine, so the maximum over the box is
    attained at a vertex.  Beyond ``cap`` active generators the triangle
    upper bound ``||base|| + sum ||G_i||`` is returned instead; either path
    yields a valid upper bound and the method used is reported.
    """
    cap = VERTEX_CAP if cap is None else cap
    gens = [np.asarray(g, dtype=float) for g in gens if np.any(g)]
    m = len(gens)
    if m == 0:
        return _spec_norm(base), "exact"
    if m > cap:
        return _spec_norm(base) + sum(_spec_norm(g) for g in gens), "upper_bound"
    stackgen = np.stack(gens)
    best = 0.0
    total = 1 << m
    chunk = 8192
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        signs = ((idx[:, None] >> np.arange(m)[None, :]) & 1) * 2.0 - 1.0
        stack = base[None, :, :] + np.tensordot(signs, stackgen, axes=(1, 0))
        sv = np.linalg.svd(stack, compute_uv=False)
        best = max(best, float(sv[:, 0].max()))
    return best, "vertex"


@dataclass
class EtcConstants:
    """Norm constants of the sampled-data loop used by every bound below."""

    beta: float
    rho_B: float
    rho_AB: float
    theta_B: float
    theta_AB: float
    lambda_min_P: float
    lambda_max_P: float
    norm_Cbar: float
    theta_B_method: str = "vertex"
    theta_AB_method: str = "vertex"

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "beta", "rho_B", "rho_AB", "theta_B", "theta_AB",
            "lambda_min_P", "lambda_max_P", "norm_Cbar",
            "theta_B_method", "theta_AB_method")}

    @classmethod
    def from_dict(cls, d: dict) -> "EtcConstants":
        return cls(**d)


def etc_constants(aug: AugmentedSystem, model: PlantModel, P: np.ndarray,
                  gains: ControllerGains) -> EtcConstants:
    """Compute all sampled-data constants for a certificate matrix ``P``.

    ``theta_B`` maximizes ``||P (Bbar + embed(dB)) Fhat||`` over the input box
    (vertex-exact up to 20 uncertain entries, triangle bound beyond);
    ``theta_AB`` bounds the intersample drift as described in the module
    notes.  All norms are spectral; bound-matrix norms are spectral norms of
    the bound matrices themselves.
    """
    P = np.asarray(P, dtype=float)
    nx, nu = model.n_x, model.n_u
    lam = np.linalg.eigvalsh(P)
    nC = _spec_norm(aug.Cbar)
    beta = _spec_norm(P) * _spec_norm(gains.B_c @ model.C)
    rho_B = (_spec_norm(aug.Bbar) + _spec_norm(model.B_b)) ** 2 \
        * _spec_norm(aug.Fhat) ** 2
    rho_AB = rho_B * nC ** 2 + (_spec_norm(aug.Abar) + _spec_norm(model.A_b)) ** 2
    gensB = []
    for i in range(nx):
        for k in range(nu):
            if model.B_b[i, k] > 0:
                E = np.zeros((nx, nu))
                E[i, k] = model.B_b[i, k]
                gensB.append(P @ embed_dB(E, nu) @ aug.Fhat)
    theta_B, mB = _vertex_max_norm(P @ aug.Bbar @ aug.Fhat, gensB)
    gensA = []
    n = nx + nu
    for i in range(nx):
        for j in range(nx):
            if model.A_b[i, j] > 0:
                E = np.zeros((n, n))
                E[i, j] = model.A_b[i, j]
                gensA.append(E)
    theta_AB, mAB = _vertex_max_norm(aug.Abar, gensA)
    return EtcConstants(
        beta=beta, rho_B=rho_B, rho_AB=rho_AB, theta_B=theta_B,
        theta_AB=theta_AB, lambda_min_P=float(lam[0]), lambda_max_P=float(lam[-1]),
        norm_Cbar=nC, theta_B_method=mB, theta_AB_method=mAB,
    )


def exp_growth(h: float, theta_AB: float) -> float:
    """Accumulated intersample growth ``(exp(theta_AB h) - 1) / theta_AB``.

    The singularity at ``theta_AB = 0`` is removable; below ``LIMIT_TOL`` the
    series value ``h (1 + theta_AB h / 2)`` is used.
    """
    if h < 0:
        raise ValueError("h must be nonnegative")
    if theta_AB <= LIMIT_TOL:
        return h * (1.0 + theta_AB * h / 2.0)
    return float(np.expm1(theta_AB * h) / theta_AB)


def _radicand(c: EtcConstants, alpha: float, q1: float):
    """Numerator and denominator of the squared growth budget in ``h_max``."""
    s = math.sqrt(q1)
    num = alpha ** 2 * s * c.lambda_min_P / ((1.0 + 2.0 * s) ** 2 * c.lambda_max_P) \
        - 2.0 * c.theta_B ** 2 * q1 * c.norm_Cbar ** 2
    den = 6.0 * c.theta_B ** 2 * (q1 * c.rho_B * c.norm_Cbar ** 4
                                  + 6.0 * c.rho_AB * c.norm_Cbar ** 2) \
        + 3.0 * c.beta ** 2 * (c.rho_B * q1 * c.norm_Cbar ** 2 + c.rho_AB) ** 2
    return num, den


def h_max(constants: EtcConstants, alpha: float, zeta: float,
          q1: float) -> Optional[float]:
    """Certified supremum of inter-sample intervals, or ``None`` when undefined.

    Undefined exactly when the radicand numerator is nonpositive, which by
    construction happens exactly for ``q1`` at or above the perfect-tracking
    threshold.  ``zeta`` is part of the certificate tuple but does not enter
    this bound.
    """
    if alpha <= 0 or q1 < 0:
        return None
    num, den = _radicand(constants, alpha, q1)
    if num <= 0.0:
        return None
    if den <= 0.0:
        return float("inf")
    r = math.sqrt(num / den)
    t = constants.theta_AB
    if t <= LIMIT_TOL:
        return r
    return float(math.log1p(t * r) / t)


def _common_denominator(h_bar: float, q1: float, c: EtcConstants,
                        alpha: float) -> float:
    s = math.sqrt(q1)
    e2 = exp_growth(h_bar, c.theta_AB) ** 2
    return (
        -c.theta_B ** 2 * (2.0 * q1 * c.norm_Cbar ** 2
                           + 6.0 * q1 * c.rho_B * c.norm_Cbar ** 4 * e2
                           + 6.0 * c.rho_AB * c.norm_Cbar ** 2 * e2)
        - 3.0 * c.beta ** 2 * (c.rho_B * q1 * c.norm_Cbar ** 2 + c.rho_AB) ** 2 * e2
        + alpha ** 2 * s * c.lambda_min_P
        / ((1.0 + 2.0 * s) ** 2 * c.lambda_max_P)
    )


def f1(h_bar: float, q1: float, constants: EtcConstants, alpha: float,
       zeta: float) -> Optional[float]:
    """Absolute-threshold error gain; ``None`` when the denominator is nonpositive."""
    c = constants
    den = _common_denominator(h_bar, q1, c, alpha)
    if den <= 0.0:
        return None
    e2 = exp_growth(h_bar, c.theta_AB) ** 2
    num = c.theta_B ** 2 * (2.0 + 6.0 * c.rho_B * c.norm_Cbar ** 2 * e2) \
        * c.norm_Cbar ** 4 + 3.0 * c.beta ** 2 * c.rho_B * c.norm_Cbar ** 4 * e2
    return float(num / den)


def f2(h_bar: float, q1: float, constants: EtcConstants, alpha: float,
       zeta: float) -> Optional[float]:
    """Nonlinearity error gain; ``None`` when the denominator is nonpositive."""
    c = constants
    den = _common_denominator(h_bar, q1, c, alpha)
    if den <= 0.0:
        return None
    s = math.sqrt(q1)
    e2 = exp_growth(h_bar, c.theta_AB) ** 2
    num = 6.0 * c.theta_B ** 2 * c.norm_Cbar ** 6 * e2 \
        + 3.0 * c.beta ** 2 * c.norm_Cbar ** 4 * e2 \
        + alpha * zeta * c.norm_Cbar ** 2 * s / (1.0 + 2.0 * s)
    return float(num / den)


def eps_d(h_bar: float, q0: float, q1: float, k_b: float,
          constants: EtcConstants, alpha: float, zeta: float,
          enforce_h_max: bool = True) -> Optional[float]:
    """Certified error radius of the event-triggered implementation.

    ``eps_d**2 = f1 * q0 + f2 * k_b**2``; ``None`` whenever the bound does not
    apply (nonpositive denominator, or ``h_bar`` beyond the certified
    ``h_max`` unless ``enforce_h_max`` is disabled for diagnostics).
    """
    if enforce_h_max:
        hm = h_max(constants, alpha, zeta, q1)
        if hm is None or h_bar > hm:
            return None
    v1 = f1(h_bar, q1, constants, alpha, zeta)
    v2 = f2(h_bar, q1, constants, alpha, zeta)
    if v1 is None or v2 is None:
        return None
    return float(math.sqrt(max(0.0, v1 * float(q0) + v2 * float(k_b) ** 2)))


def q1_perfect_tracking_bound(constants: EtcConstants, alpha: float) -> float:
    """Supremum of relative thresholds with a defined sampling bound.

    Solves ``sqrt(q1) (2 sqrt(q1) + 1)^2 = alpha^2 lambda_min /
    (2 ||Cbar||^2 theta_B^2 lambda_max)`` for ``q1`` (the map is strictly
    increasing in ``sqrt(q1)``).  Below this threshold, zero absolute
    threshold and zero nonlinearity give exact asymptotic tracking under
    event-triggered updates.
    """
    if alpha <= 0:
        return 0.0
    c = constants
    if c.theta_B == 0.0:
        return float("inf")
    rhs = alpha ** 2 * c.lambda_min_P / (2.0 * c.norm_Cbar ** 2
                                         * c.theta_B ** 2 * c.lambda_max_P)
    if rhs <= 0.0:
        return 0.0

    def g(s):
        return s * (2.0 * s + 1.0) ** 2 - rhs

    hi = 1.0
    while g(hi) < 0.0:
        hi *= 2.0
    s_star = brentq(g, 0.0, hi, xtol=1e-15, rtol=8.9e-16)
    return float(s_star ** 2)


# ---------------------------------------------------------------------------
# quadratic trigger matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerMatrix:
    """Symmetric quadratic-form matrix over ``[w_j; y_j; w_s; y_s; 1]``."""

    Q: np.ndarray
    block: int           # size of one (w, y) block, n_y + n_u

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape != (2 * self.block + 1, 2 * self.block + 1):
            raise DimensionMismatch(
                f"trigger matrix must be {2 * self.block + 1} square, got {Q.shape}")
        if np.max(np.abs(Q - Q.T)) > 1e-12 * max(1.0, float(np.max(np.abs(Q)))):
            raise DimensionMismatch("trigger matrix must be symmetric")
        Qs = 0.5 * (Q + Q.T)
        Qs.setflags(write=False)
        object.__setattr__(self, "Q", Qs)

    def fires(self, v_last: np.ndarray, v_now: np.ndarray) -> bool:
        """Trigger test on stacked ``[v_last; v_now; 1]``; fires when >= 0."""
        v = np.concatenate([v_last, v_now, [1.0]])
        return bool(v @ self.Q @ v >= 0.0)


def qtilde(q0: float, q1: float, n: int) -> TriggerMatrix:
    """Mixed absolute/relative trigger matrix.

    The quadratic form over ``[w_j; y_j; w_s; y_s; 1]`` equals

        ||(w_s - w_j, y_s - y_j)||^2 - q1 ||(w_s, y_s)||^2 - q0,

    so an update fires once the held information deviates beyond the mixed
    threshold.  ``n`` is the stacked (w, y) block size.
    """
    if q0 < 0 or q1 < 0:
        raise ValueError("q0 and q1 must be nonnegative")
    dim = 2 * n + 1
    Q = np.zeros((dim, dim))
    Q[:n, :n] = np.eye(n)
    Q[n:2 * n, n:2 * n] = (1.0 - q1) * np.eye(n)
    Q[:n, n:2 * n] = -np.eye(n)
    Q[n:2 * n, :n] = -np.eye(n)
    Q[-1, -1] = -q0
    return TriggerMatrix(Q=Q, block=n)


def q_dominated(Q: TriggerMatrix, q0: float, q1: float,
                tol: float = 1e-8) -> bool:
    """Whether ``Q`` is dominated by the mixed-threshold matrix, i.e. every
    certified bound for thresholds ``(q0, q1)`` applies to triggers using ``Q``."""
    ref = qtilde(q0, q1, Q.block)
    if ref.Q.shape != Q.Q.shape:
        raise DimensionMismatch("trigger matrices have different dimensions")
    return psd_check(ref.Q - Q.Q, tol)


# ---------------------------------------------------------------------------
# bundled certificate
# ---------------------------------------------------------------------------

@dataclass
class EtcCertificate:
    """Event-triggered implementation certificate at one configuration."""

    constants: EtcConstants
    alpha: float
    zeta: float
    k_b: float
    q0: float
    q1: float
    h_bar: float
    h_max: Optional[float]
    f1: Optional[float]
    f2: Optional[float]
    eps_d: Optional[float]
    q1_bound: float = float("nan")
    notes: dict = field(default_factory=dict)

    @property
    def defined(self) -> bool:
        return self.eps_d is not None

    def to_dict(self) -> dict:
        return {
            "constants": self.constants.to_dict(),
            "alpha": self.alpha, "zeta": self.zeta, "k_b": self.k_b,
            "q0": self.q0, "q1": self.q1, "h_bar": self.h_bar,
            "h_max": self.h_max, "f1": self.f1, "f2": self.f2,
            "eps_d": self.eps_d, "q1_bound": self.q1_bound,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EtcCertificate":
        d = dict(d)
        d["constants"] = EtcConstants.from_dict(d["constants"])
        return cls(**d)


def build_etc_certificate(cert: SynthesisCertificate, model: PlantModel,
                          aug: AugmentedSystem, q0: float, q1: float,
                          h_bar: float) -> EtcCertificate:
    """Evaluate every event-triggered bound for one ``(q0, q1, h_bar)``."""
    c = etc_constants(aug, model, cert.P, cert.gains)
    hm = h_max(c, cert.alpha, cert.zeta, q1)
    defined = hm is not None and h_bar <= hm
    v1 = f1(h_bar, q1, c, cert.alpha, cert.zeta) if defined else None
    v2 = f2(h_bar, q1, c, cert.alpha, cert.zeta) if defined else None
    ed = eps_d(h_bar, q0, q1, model.k_b, c, cert.alpha, cert.zeta) if defined else None
    return EtcCertificate(
        constants=c, alpha=cert.alpha, zeta=cert.zeta, k_b=model.k_b,
        q0=float(q0), q1=float(q1), h_bar=float(h_bar), h_max=hm,
        f1=v1, f2=v2, eps_d=ed,
        q1_bound=q1_perfect_tracking_bound(c, cert.alpha),
    )


def save_etc_certificate(path, ec: EtcCertificate):
    with open(path, "w") as fh:
        json.dump(ec.to_dict(), fh, indent=2)
        fh.write("\n")


def load_etc_certificate(path) -> EtcCertificate:
    with open(path) as fh:
        return EtcCertificate.from_dict(json.load(fh))
