import math

import numpy as np
import pytest

from outreg import etc_bounds as E, model as M, synthesis as S
from outreg.errors import DimensionMismatch


def tame_certified(a=2.0, b=1.0, cc=1.0, bg=1.0, box=0.0, k_b=0.5):
    model = M.PlantModel(A=[[-a]], B=[[b]], C=[[1.0]],
                         A_b=[[box]], B_b=[[box]], k_b=k_b)
    gains = M.ControllerGains(B_c=[[bg]], C_c=[[-cc]], D_c=[[0.0]])
    cert = S.certify(model, gains, [1.0])
    aug = M.augment(model, gains)
    consts = E.etc_constants(aug, model, cert.P, gains)
    return model, gains, cert, consts


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

def test_constants_zero_boxes_zero_fhat():
    model = M.PlantModel(A=[[-1.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]], k_b=0.0)
    gains = M.ControllerGains(B_c=[[1.0]], C_c=[[0.0]], D_c=[[0.0]])
    aug = M.augment(model, gains)
    c = E.etc_constants(aug, model, np.eye(2), gains)
    assert c.theta_B == 0.0
    assert c.rho_B == 0.0


def test_constants_all_ones_hand_computed():
    model = M.PlantModel(A=[[1.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[1.0]], B_b=[[1.0]], k_b=0.0)
    gains = M.ControllerGains(B_c=[[1.0]], C_c=[[1.0]], D_c=[[1.0]])
    aug = M.augment(model, gains)
    c = E.etc_constants(aug, model, np.eye(2), gains)
    assert c.beta == pytest.approx(1.0)                     # ||P|| ||B_c C||
    assert c.rho_B == pytest.approx(4.0 * 2.0)              # (1+1)^2 ||Fhat||^2
    assert c.rho_AB == pytest.approx(8.0 + 4.0)             # rho_B + (1+1)^2
    assert c.theta_B == pytest.approx(2.0 * math.sqrt(2.0))  # vertex dB=+1
    assert c.theta_AB == pytest.approx(2.0)                 # vertex dA=+1
    assert c.theta_B_method == "vertex" and c.theta_AB_method == "vertex"


def test_constants_upper_bound_path_beyond_cap():
    model, _ = __import__("outreg.presets", fromlist=["example1"]).example1()
    gains = M.ControllerGains(B_c=np.eye(2), C_c=-np.eye(2), D_c=np.zeros((2, 2)))
    aug = M.augment(model, gains)
    import outreg.etc_bounds as eb
    old = eb.VERTEX_CAP
    try:
        eb.VERTEX_CAP = 4        # force the triangle-bound fallback
        c = E.etc_constants(aug, model, np.eye(6), gains)
    finally:
        eb.VERTEX_CAP = old
    assert c.theta_AB_method == "upper_bound"
    c2 = E.etc_constants(aug, model, np.eye(6), gains)
    assert c2.theta_AB_method == "vertex"
    assert c.theta_AB >= c2.theta_AB - 1e-12   # fallback is an upper bound


# ---------------------------------------------------------------------------
# growth factor and h_max
# ---------------------------------------------------------------------------

def test_exp_growth_values():
    assert E.exp_growth(0.0, 1.0) == 0.0
    assert E.exp_growth(0.5, 0.0) == pytest.approx(0.5)
    assert E.exp_growth(1.0, 1.0) == pytest.approx(math.e - 1.0)


def test_h_max_undefined_at_boundary():
    _, _, cert, c = tame_certified()
    q1b = E.q1_perfect_tracking_bound(c, cert.alpha)
    assert E.h_max(c, cert.alpha, cert.zeta, q1b * 1.5) is None
    assert E.h_max(c, cert.alpha, cert.zeta, q1b / 2.0) > 0


def test_h_max_small_theta_series_limit():
    _, _, cert, c = tame_certified()
    q1 = E.q1_perfect_tracking_bound(c, cert.alpha) / 2.0
    import dataclasses
    c0 = dataclasses.replace(c, theta_AB=1e-10)
    c1 = dataclasses.replace(c, theta_AB=1e-9)
    h0 = E.h_max(c0, cert.alpha, cert.zeta, q1)     # series branch
    h1 = E.h_max(c1, cert.alpha, cert.zeta, q1)     # log1p branch
    assert h1 == pytest.approx(h0, rel=1e-6)


def test_radicand_positive_iff_below_q1_bound():
    for spec in [(2.0, 1.0, 1.0, 1.0), (3.0, 2.0, 1.0, 1.5), (4.0, 1.0, 2.0, 2.0)]:
        _, _, cert, c = tame_certified(*spec)
        q1b = E.q1_perfect_tracking_bound(c, cert.alpha)
        num_lo, _ = E._radicand(c, cert.alpha, q1b * (1 - 1e-9))
        num_hi, _ = E._radicand(c, cert.alpha, q1b * (1 + 1e-9))
        assert num_lo > 0 > num_hi


def test_q1_bound_hand_solvable():
    # sqrt(q1) (2 sqrt(q1) + 1)^2 = 9 has the root q1 = 1
    c = E.EtcConstants(beta=0.0, rho_B=0.0, rho_AB=0.0, theta_B=1.0,
                       theta_AB=0.0, lambda_min_P=1.0, lambda_max_P=1.0,
                       norm_Cbar=1.0)
    alpha = math.sqrt(18.0)
    assert E.q1_perfect_tracking_bound(c, alpha) == pytest.approx(1.0, rel=1e-9)
    assert E.q1_perfect_tracking_bound(c, 0.0) == 0.0
    import dataclasses
    assert E.q1_perfect_tracking_bound(
        dataclasses.replace(c, theta_B=0.0), 1.0) == float("inf")


# ---------------------------------------------------------------------------
# f1 / f2 / eps_d
# ---------------------------------------------------------------------------

def test_eps_d_zero_in_perfect_regime():
    _, _, cert, c = tame_certified(k_b=0.0)
    q1 = E.q1_perfect_tracking_bound(c, cert.alpha) / 2.0
    hm = E.h_max(c, cert.alpha, cert.zeta, q1)
    assert E.eps_d(0.9 * hm, 0.0, q1, 0.0, c, cert.alpha, cert.zeta) == 0.0


def test_eps_d_undefined_beyond_h_max():
    _, _, cert, c = tame_certified()
    q1 = E.q1_perfect_tracking_bound(c, cert.alpha) / 2.0
    hm = E.h_max(c, cert.alpha, cert.zeta, q1)
    assert E.eps_d(2.0 * hm, 0.0, q1, 0.5, c, cert.alpha, cert.zeta) is None


def test_f1_f2_monotone_in_h_bar():
    _, _, cert, c = tame_certified()
    q1 = E.q1_perfect_tracking_bound(c, cert.alpha) / 2.0
    hm = E.h_max(c, cert.alpha, cert.zeta, q1)
    hs = np.linspace(0.0, hm, 60)
    f1s = [E.f1(h, q1, c, cert.alpha, cert.zeta) for h in hs]
    f2s = [E.f2(h, q1, c, cert.alpha, cert.zeta) for h in hs]
    assert all(v is not None for v in f1s + f2s)
    assert all(b >= a - 1e-12 for a, b in zip(f1s, f1s[1:]))
    assert all(b >= a - 1e-12 for a, b in zip(f2s, f2s[1:]))


def test_eps_d_dominates_eps_c_on_corpus():
    for spec in [(2.0, 1.0, 1.0, 1.0), (3.0, 2.0, 1.0, 1.5), (4.0, 1.0, 2.0, 2.0)]:
        model, _, cert, c = tame_certified(*spec, box=0.02, k_b=0.3)
        if cert.objective <= 0:
            continue
        epsc = S.eps_c(cert, model.k_b)
        q1b = E.q1_perfect_tracking_bound(c, cert.alpha)
        for q1 in (q1b / 8, q1b / 3, q1b / 2):
            hm = E.h_max(c, cert.alpha, cert.zeta, q1)
            for h in np.linspace(0.0, hm, 6):
                ed = E.eps_d(h, 0.01, q1, model.k_b, c, cert.alpha, cert.zeta)
                if ed is not None:
                    assert ed >= epsc - 1e-9


def test_f2_limit_recovers_continuous_radius():
    model, gains, _, _ = tame_certified(5.0, 1.0, 1.0, 2.73)
    cert = S.refine_for_etc(model, gains, objective_fraction=0.25)
    aug = M.augment(model, gains)
    c = E.etc_constants(aug, model, cert.P, gains)
    kb = 0.5
    epsc2 = S.eps_c(cert, kb) ** 2
    f2v = E.f2(1e-8, 1e-6, c, cert.alpha, cert.zeta)
    assert abs(f2v * kb ** 2 - epsc2) / epsc2 < 0.01


# ---------------------------------------------------------------------------
# trigger matrices
# ---------------------------------------------------------------------------

def test_qtilde_boundary_triggers():
    Q = E.qtilde(0.0, 0.0, 2)
    v = np.array([1.0, -2.0])
    assert Q.fires(v, v)          # zero form on equal blocks: fires


def test_qtilde_absolute_threshold_expansion():
    Q = E.qtilde(0.5, 0.0, 1)
    # unit deviation: form value = deviation^2 - 0.5
    dev = np.array([1.0])
    base = np.array([0.0])
    v = np.concatenate([base, base + dev, [1.0]])
    val = v @ Q.Q @ v
    assert val == pytest.approx(1.0 - 0.5)
    assert Q.fires(base, base + dev)
    assert not Q.fires(base, base + 0.5 * dev)


def test_qtilde_matches_scalar_formula_1000_vectors():
    rng = np.random.default_rng(9)
    n = 3
    for _ in range(1000):
        q0, q1 = rng.uniform(0, 2), rng.uniform(0, 2)
        Q = E.qtilde(q0, q1, n)
        a, b = rng.normal(size=n), rng.normal(size=n)
        v = np.concatenate([a, b, [1.0]])
        lhs = v @ Q.Q @ v
        rhs = np.linalg.norm(b - a) ** 2 - q1 * np.linalg.norm(b) ** 2 - q0
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


def test_q_dominated():
    Q = E.qtilde(0.3, 0.2, 2)
    assert E.q_dominated(Q, 0.3, 0.2)
    bigger = E.TriggerMatrix(Q=Q.Q + np.eye(5), block=2)
    assert not E.q_dominated(bigger, 0.3, 0.2)
    zero = E.TriggerMatrix(Q=np.zeros((5, 5)), block=2)
    assert E.q_dominated(zero, 0.0, 0.0)          # equality case Q~ >= 0
    assert not E.q_dominated(zero, 0.5, 0.0)      # -q0 corner breaks psd
    with pytest.raises(DimensionMismatch):
        E.TriggerMatrix(Q=np.zeros((4, 4)), block=2)   # wrong dimension
    with pytest.raises(DimensionMismatch):
        E.TriggerMatrix(Q=np.triu(np.ones((5, 5))), block=2)   # not symmetric


def test_etc_certificate_round_trip(tmp_path):
    model, gains, cert, c = tame_certified()
    aug = M.augment(model, gains)
    q1 = E.q1_perfect_tracking_bound(c, cert.alpha) / 2.0
    hm = E.h_max(c, cert.alpha, cert.zeta, q1)
    ec = E.build_etc_certificate(cert, model, aug, q1, q1, 0.9 * hm)
    assert ec.defined
    path = tmp_path / "etc.json"
    E.save_etc_certificate(path, ec)
    ec2 = E.load_etc_certificate(path)
    assert ec2.to_dict() == ec.to_dict()
    path2 = tmp_path / "etc2.json"
    E.save_etc_certificate(path2, ec2)
    assert path.read_bytes() == path2.read_bytes()
