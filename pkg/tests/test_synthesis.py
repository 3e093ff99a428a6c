import numpy as np
import pytest

from outreg import conic, model as M, synthesis as S
from outreg.errors import NotPositiveDefinite, StalledBelowZero
from conftest import random_stable_system


# ---------------------------------------------------------------------------
# certification LMI
# ---------------------------------------------------------------------------

def test_certification_reduces_to_nominal_lyapunov(scalar_gains):
    # no uncertainty: a stable nominal loop certifies at positive level
    model = M.PlantModel(A=[[-1.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]], k_b=0.0)
    cert = S.certify(model, scalar_gains, [1.0])
    assert cert.objective > 0
    assert cert.eps_c == 0.0          # k_b = 0 with positive level


def test_certification_scalar_with_boxes_vertex_confirmed(scalar_model, scalar_gains):
    cert = S.certify(scalar_model, scalar_gains, [0.1, 1.0, 10.0])
    assert cert.objective > 0
    check = S.vertex_verify(scalar_model, scalar_gains, cert.P, cert.alpha,
                            cert.zeta)
    assert check.verified
    assert check.vertices_checked == 4


def test_certification_unstable_zero_gains():
    model = M.PlantModel(A=[[1.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]], k_b=0.0)
    gains = M.ControllerGains(B_c=[[0.0]], C_c=[[1.0]], D_c=[[0.0]])
    cert = S.certify(model, gains, [1.0])
    assert cert.objective <= 0
    assert not cert.certified
    assert cert.eps_c == float("inf")


def test_objective_is_scale_invariant_in_zeta(scalar_model, scalar_gains):
    # the eliminated certification program is jointly homogeneous, so the
    # certified level is flat across the zeta grid
    objs = []
    for z in (1e-2, 1.0, 1e2):
        c = S.certify(scalar_model, scalar_gains, [z])
        objs.append(c.objective)
    assert max(objs) - min(objs) <= 1e-6 * max(1.0, abs(objs[0]))


def test_certify_reports_per_zeta_diagnostics(scalar_model, scalar_gains):
    cert = S.certify(scalar_model, scalar_gains, [0.1, 1.0])
    assert len(cert.diagnostics["per_zeta"]) == 2


def test_eps_c_unit_plug_in():
    gains = M.ControllerGains(B_c=[[1.0]], C_c=[[1.0]], D_c=[[0.0]])
    cert = S.SynthesisCertificate(
        P=np.eye(2), alpha=1.0, zeta=1.0, kappa={}, mu={}, gains=gains,
        eps_c=float("nan"), objective=1.0, diagnostics={"norm_Cbar": 1.0})
    assert S.eps_c(cert, 2.0) == pytest.approx(2.0)
    assert S.eps_c(cert, 0.0) == 0.0
    cert.objective = -1.0
    assert S.eps_c(cert, 2.0) == float("inf")


def test_eps_c_scales_linearly_in_kb(scalar_model, scalar_gains):
    cert = S.certify(scalar_model, scalar_gains, [1.0])
    assert S.eps_c(cert, 1.0) == pytest.approx(2 * S.eps_c(cert, 0.5))


# ---------------------------------------------------------------------------
# convexification lemmas
# ---------------------------------------------------------------------------

def test_linearize_bilinear_exact_at_center():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        Y = rng.normal(size=(p, m))
        Z = -Y - 0.5 * np.eye(p, m)   # make Sym(Y.T Z) comfortably negative?
        Yk, Zk = Y.copy(), Z.copy()
        if conic.max_eig(Y.T @ Z + Z.T @ Y) > -1e-9:
            Z = Z - 2.0 * Y
            Zk = Z.copy()
        if conic.max_eig(Y.T @ Z + Z.T @ Y) > -1e-9:
            continue
        U = np.eye(p) * rng.uniform(0.5, 2.0)
        blk = S.linearize_bilinear(Y, Z, Yk, Zk, U)
        assert conic.max_eig(blk) <= 1e-9


def test_linearize_bilinear_implication_100_draws():
    # whenever the block is NSD, the bilinear symmetrization is NSD
    rng = np.random.default_rng(2)
    checked = 0
    while checked < 100:
        p, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        Yk = rng.normal(size=(p, m))
        Zk = -Yk - rng.uniform(0.5, 2.0) * np.eye(p, m)
        if conic.max_eig(Yk.T @ Zk + Zk.T @ Yk) > -0.2:
            continue
        U = rng.normal(size=(p, p))
        U = U @ U.T + 0.3 * np.eye(p)
        scale = 1.0
        for _ in range(40):
            Y = Yk + scale * rng.normal(size=(p, m)) * 0.1
            Z = Zk + scale * rng.normal(size=(p, m)) * 0.1
            blk = S.linearize_bilinear(Y, Z, Yk, Zk, U)
            if conic.max_eig(blk) <= 0.0:
                break
            scale *= 0.5
        else:
            continue
        assert conic.max_eig(Y.T @ Z + Z.T @ Y) <= 1e-9
        checked += 1


def test_linearize_bilinear_rejects_indefinite_U():
    Y = np.eye(2)
    with pytest.raises(NotPositiveDefinite):
        S.linearize_bilinear(Y, Y, Y, Y, np.diag([1.0, -1.0]))


def test_inverse_overapprox_identity_and_scalar():
    out = S.inverse_overapprox(np.eye(3), np.eye(3))
    assert np.allclose(out, -np.eye(3))
    out = S.inverse_overapprox([[2.0]], [[1.0]])
    assert out[0, 0] == pytest.approx(0.0)
    assert out[0, 0] >= -0.5


def test_inverse_overapprox_dominates_100_draws():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        G = rng.normal(size=(n, n))
        U = G @ G.T + 0.2 * np.eye(n)
        H = rng.normal(size=(n, n))
        Uk = H @ H.T + 0.2 * np.eye(n)
        out = S.inverse_overapprox(U, Uk)
        assert conic.min_eig(out + np.linalg.inv(U)) >= -1e-10


def test_inverse_overapprox_rejects_non_pd():
    with pytest.raises(NotPositiveDefinite):
        S.inverse_overapprox(np.diag([1.0, -1.0]), np.eye(2))


# ---------------------------------------------------------------------------
# vertex oracle
# ---------------------------------------------------------------------------

def test_vertex_verify_zero_boxes_single_vertex(scalar_gains):
    model = M.PlantModel(A=[[-1.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]], k_b=0.0)
    cert = S.certify(model, scalar_gains, [1.0])
    check = S.vertex_verify(model, scalar_gains, cert.P, cert.alpha, cert.zeta)
    assert check.verified and check.vertices_checked == 1


def test_vertex_verify_refutes_bogus_certificate(scalar_model, scalar_gains):
    # identity P with a large claimed decay fails already at the zero vertex
    check = S.vertex_verify(scalar_model, scalar_gains, np.eye(2), 100.0, 1.0)
    assert check.result == "Refuted"
    assert check.vertex is not None


def test_vertex_verify_skips_beyond_cap(scalar_model, scalar_gains):
    check = S.vertex_verify(scalar_model, scalar_gains, np.eye(2), 0.0, 1.0,
                            max_entries=1)
    assert check.result == "Skipped"


def _pi_gains_for(model, rng):
    """LQR-based PI gains for corpus systems (n_y = n_x, C arbitrary rank)."""
    from scipy.linalg import solve_continuous_are
    nx, nu, ny = model.n_x, model.n_u, model.n_y
    Api = np.block([[model.A, np.zeros((nx, ny))],
                    [model.C, np.zeros((ny, ny))]])
    Bpi = np.vstack([model.B, np.zeros((ny, nu))])
    X = solve_continuous_are(Api, Bpi, np.eye(nx + ny), np.eye(nu))
    K = Bpi.T @ X
    Dc = -K[:, :nx] @ np.linalg.pinv(model.C)
    Bc = np.eye(nu, ny)
    Ks = K[:, nx:]
    Cc = -Ks if ny == nu else -Ks @ np.linalg.pinv(Bc)
    return M.ControllerGains(B_c=Bc, C_c=Cc, D_c=Dc)


def test_matrix_cube_soundness_corpus():
    # acceptance: >= 50 random certified systems, vertex oracle confirms all
    rng = np.random.default_rng(2024)
    confirmed = 0
    attempts = 0
    while confirmed < 50 and attempts < 400:
        attempts += 1
        n_x = int(rng.integers(1, 4))
        n_u = int(rng.integers(1, 3))
        n_y = n_u
        model = random_stable_system(rng, n_x, n_u, n_y, box=0.05,
                                     max_entries=int(rng.integers(1, 13)))
        try:
            gains = _pi_gains_for(model, rng)
        except Exception:
            continue
        try:
            cert = S.certify(model, gains, [1.0])
        except Exception:
            continue
        if cert.objective <= 0:
            continue
        check = S.vertex_verify(model, gains, cert.P, cert.alpha, cert.zeta)
        assert check.result == "Verified", (
            f"refuted certificate at attempt {attempts}: worst {check.worst_eig}")
        confirmed += 1
    assert confirmed >= 50, f"only {confirmed} certified systems in {attempts} draws"


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def test_synthesize_scalar_zero_uncertainty_quick():
    model = M.PlantModel(A=[[-1.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]], k_b=0.0)
    gains, cert, trace = S.synthesize(model, S.SynthesisOptions(max_outer=5))
    outer = sum(1 for t in trace if t.get("phase") == "iterate")
    assert outer <= 5
    assert cert.objective > 0
    recheck = S.certify(model, gains, [cert.zeta])
    assert recheck.objective >= cert.objective - 1e-6


def test_synthesize_certification_consistency_with_boxes(scalar_model):
    gains, cert, _ = S.synthesize(scalar_model, S.SynthesisOptions(max_outer=6))
    assert cert.objective > 0
    recheck = S.certify(scalar_model, gains, [cert.zeta])
    assert recheck.objective >= cert.objective - 1e-6
    check = S.vertex_verify(scalar_model, gains, cert.P, cert.alpha, cert.zeta)
    assert check.verified


def test_synthesize_monotone_accepted_trace(scalar_model):
    _, _, trace = S.synthesize(scalar_model, S.SynthesisOptions(max_outer=6))
    accepted = [t["objective"] for t in trace
                if t.get("phase") == "iterate" and t.get("accepted")]
    for a, b in zip(accepted, accepted[1:]):
        assert b >= a - 1e-6 * max(1.0, abs(a))


def test_synthesize_uncontrollable_stalls_below_zero():
    model = M.PlantModel(A=[[1.0]], B=[[0.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]], k_b=0.0)
    with pytest.raises(StalledBelowZero):
        S.synthesize(model, S.SynthesisOptions(max_outer=6))


def test_assemble_certification_is_solvable_problem(scalar_model, scalar_gains):
    prob = S.assemble_certification(scalar_model, scalar_gains, 1.0)
    sol = conic.solve(prob)
    assert sol.ok
    assert sol["alpha"] > 0


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_certificate_round_trip(tmp_path, scalar_model, scalar_gains,
                                scalar_task):
    cert = S.certify(scalar_model, scalar_gains, [1.0])
    path = tmp_path / "cert.json"
    S.save_certificate(path, cert, scalar_model, scalar_task)
    cert2, model2, task2 = S.load_certificate(path)
    assert np.array_equal(cert2.P, cert.P)
    assert cert2.alpha == cert.alpha and cert2.zeta == cert.zeta
    assert cert2.kappa == cert.kappa and cert2.mu == cert.mu
    assert cert2.eps_c == cert.eps_c and cert2.objective == cert.objective
    assert np.array_equal(cert2.gains.D_c, cert.gains.D_c)
    assert np.array_equal(model2.A, scalar_model.A)
    # bit-exact on re-serialization
    path2 = tmp_path / "cert2.json"
    S.save_certificate(path2, cert2, model2, task2)
    assert path.read_bytes() == path2.read_bytes()
