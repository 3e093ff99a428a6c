import json

import numpy as np
import pytest

from outreg import model as M
from outreg.errors import DimensionMismatch, EquilibriumInfeasible, NegativeBound
from outreg.presets import example1


def test_validate_example1_preset():
    model, task = example1()
    rep = M.validate_model(model, task)
    assert rep.ok
    assert rep.equilibrium_residual <= 1e-9
    assert rep.warnings == []


def test_validate_zero_system():
    model = M.PlantModel(A=[[0.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]], k_b=0.0)
    rep = M.validate_model(model, M.RegulationTask(y_d=[0.0]))
    assert rep.ok
    x_d, u_d, res = M.nominal_equilibrium(model, [0.0])
    assert np.allclose(x_d, 0.0) and np.allclose(u_d, 0.0) and res <= 1e-12


def test_validate_unreachable_output_warns():
    model = M.PlantModel(A=[[1.0]], B=[[1.0]], C=[[0.0]],
                         A_b=[[0.0]], B_b=[[0.0]], k_b=0.0)
    rep = M.validate_model(model, M.RegulationTask(y_d=[1.0]))
    assert rep.ok                       # warnings, not errors
    assert rep.equilibrium_residual == pytest.approx(1.0, abs=1e-12)
    assert any("unreachable" in w for w in rep.warnings)


def test_constructor_errors():
    with pytest.raises(NegativeBound):
        M.PlantModel(A=[[0.0]], B=[[1.0]], C=[[1.0]],
                     A_b=[[-0.1]], B_b=[[0.0]])
    with pytest.raises(DimensionMismatch):
        M.PlantModel(A=[[0.0, 1.0]], B=[[1.0]], C=[[1.0]],
                     A_b=[[0.0]], B_b=[[0.0]])
    with pytest.raises(NegativeBound):
        M.PlantModel(A=[[0.0]], B=[[1.0]], C=[[1.0]],
                     A_b=[[0.0]], B_b=[[0.0]], k_b=-1.0)


def test_nominal_equilibrium_scalar():
    model = M.PlantModel(A=[[0.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]])
    # realized A* = -1, B* = 1: x_d = 2, u_d = -A* x_d = 2
    x_d, u_d, _ = M.nominal_equilibrium(model, [2.0], dA=[[-1.0]])
    assert x_d == pytest.approx([2.0])
    assert u_d == pytest.approx([2.0])


def test_nominal_equilibrium_example1_normal_equations_oracle():
    model, task = example1()
    x_d, u_d, res = M.nominal_equilibrium(model, task.y_d)
    assert res <= 1e-9
    # independent oracle: dense normal equations on the stacked 6x6 system
    S = np.zeros((6, 6))
    S[:2, :4] = model.C
    S[2:, :4] = model.A
    S[2:, 4:] = model.B
    rhs = np.concatenate([task.y_d, np.zeros(4)])
    sol = np.linalg.solve(S.T @ S, S.T @ rhs)
    assert np.allclose(np.concatenate([x_d, u_d]), sol, atol=1e-7)


def test_nominal_equilibrium_infeasible():
    model = M.PlantModel(A=[[0.0]], B=[[0.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]])
    with pytest.raises(EquilibriumInfeasible) as exc:
        M.nominal_equilibrium(model, [0.0], k_const=[1.0])
    assert exc.value.residual == pytest.approx(1.0, rel=1e-9)


def test_augment_block_placement():
    model = M.PlantModel(A=[[2.0]], B=[[3.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]])
    gains = M.ControllerGains(B_c=[[4.0]], C_c=[[5.0]], D_c=[[6.0]])
    aug = M.augment(model, gains)
    assert np.array_equal(aug.Abar, [[2.0, 0.0], [0.0, 0.0]])
    assert np.array_equal(aug.Bbar, [[3.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(aug.Cbar, np.eye(2))
    assert np.array_equal(aug.J, [[1.0, 0.0]])
    assert np.array_equal(aug.F, [[6.0, 5.0], [4.0, 0.0]])
    assert np.array_equal(aug.Fhat, [[6.0, 5.0], [0.0, 0.0]])


def test_augment_example1_dimensions():
    model, _ = example1()
    gains = M.ControllerGains(B_c=np.eye(2), C_c=np.eye(2), D_c=np.zeros((2, 2)))
    aug = M.augment(model, gains)
    assert aug.Abar.shape == (6, 6)
    assert np.array_equal(aug.Abar[:4, :4], model.A)
    assert np.all(aug.Abar[4:, :] == 0) and np.all(aug.Abar[:, 4:] == 0)


def test_augment_zero_gains():
    model = M.PlantModel(A=[[1.0]], B=[[1.0]], C=[[1.0]],
                         A_b=[[0.0]], B_b=[[0.0]])
    gains = M.ControllerGains(B_c=[[0.0]], C_c=[[0.0]], D_c=[[0.0]])
    aug = M.augment(model, gains)
    assert np.all(aug.F == 0) and np.array_equal(aug.Fhat, aug.F)


def test_augment_pure_function():
    model, _ = example1()
    gains = M.ControllerGains(B_c=np.eye(2), C_c=np.eye(2), D_c=np.ones((2, 2)))
    a1, a2 = M.augment(model, gains), M.augment(model, gains)
    for f in ("Abar", "Bbar", "Cbar", "J", "F", "Fhat"):
        assert np.array_equal(getattr(a1, f), getattr(a2, f))


def test_embed_definitions():
    assert np.array_equal(M.embed_dA([[0.0]], 1), np.zeros((2, 2)))
    assert np.array_equal(M.embed_dA([[0.3]], 1), [[0.3, 0.0], [0.0, 0.0]])
    assert np.array_equal(M.embed_dB([[0.2]], 1), [[0.2, 0.0], [0.0, 0.0]])


def test_embed_dA_equals_J_sandwich():
    rng = np.random.default_rng(7)
    for _ in range(20):
        nx, nu = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        dA = rng.normal(size=(nx, nx))
        J = np.hstack([np.eye(nx), np.zeros((nx, nu))])
        assert np.array_equal(M.embed_dA(dA, nu), J.T @ dA @ J)


def test_closed_loop_equilibrium_property():
    # the PI structure pins the closed-loop equilibrium at the regulation
    # target for every realization admitting a steady state
    rng = np.random.default_rng(3)
    for trial in range(25):
        nx, nu = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        ny = nu
        A = rng.normal(size=(nx, nx))
        B = rng.normal(size=(nx, nu))
        C = rng.normal(size=(ny, nx))
        model = M.PlantModel(A=A, B=B, C=C, A_b=0.05 * np.ones((nx, nx)),
                             B_b=0.05 * np.ones((nx, nu)), k_b=0.0)
        gains = M.ControllerGains(B_c=rng.normal(size=(nu, ny)),
                                  C_c=rng.normal(size=(nu, nu)) + 2 * np.eye(nu),
                                  D_c=rng.normal(size=(nu, ny)))
        if not gains.cc_full_rank():
            continue
        y_d = rng.normal(size=ny)
        dA = rng.uniform(-1, 1, (nx, nx)) * model.A_b
        dB = rng.uniform(-1, 1, (nx, nu)) * model.B_b
        try:
            x_d, u_d, _ = M.nominal_equilibrium(model, y_d, dA=dA, dB=dB)
        except EquilibriumInfeasible:
            continue
        w_d = M.controller_equilibrium(model, gains, x_d, u_d, y_d)
        # closed-loop right-hand side at (x_d, w_d)
        y = C @ x_d
        u = gains.C_c @ w_d + gains.D_c @ (y - y_d)
        dx = (A + dA) @ x_d + (B + dB) @ u
        dw = gains.B_c @ (y - y_d)
        assert np.linalg.norm(np.concatenate([dx, dw])) <= 1e-8


def test_cc_rank_tolerance():
    gains = M.ControllerGains(B_c=[[1.0]], C_c=[[1e-12]], D_c=[[0.0]])
    assert not gains.cc_full_rank() or abs(gains.C_c[0, 0]) > 0  # scalar: sv ratio is 1
    g2 = M.ControllerGains(B_c=np.zeros((2, 1)), C_c=[[1.0, 0.0], [0.0, 1e-12]],
                           D_c=np.zeros((2, 1)))
    assert not g2.cc_full_rank()


def test_model_file_round_trip(tmp_path):
    model, task = example1()
    path = tmp_path / "model.json"
    M.save_model(path, model, task)
    m2, t2 = M.load_model(path)
    assert np.array_equal(m2.A, model.A) and np.array_equal(m2.B_b, model.B_b)
    assert m2.k_b == model.k_b and np.array_equal(t2.y_d, task.y_d)


def test_model_file_rejects_unknown_keys(tmp_path):
    model, task = example1()
    data = M.model_to_dict(model, task)
    data["extra"] = 1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(DimensionMismatch):
        M.load_model(path)


def test_sinusoid_realization_bounds():
    model, _ = example1()
    real = M.UncertaintyRealization(dA=np.zeros((4, 4)), dB=np.zeros((4, 2)),
                                    nonlinearity="sinusoid", k_b=1.0)
    assert real.effective_k_b == pytest.approx(2.0)   # k_b * sqrt(n_x)
    x = np.array([np.pi / 2, -np.pi / 2, 0.0, np.pi])
    assert np.allclose(real.k(x), 0.5 * np.sin(x))
