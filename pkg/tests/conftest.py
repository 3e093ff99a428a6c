import numpy as np
import pytest

from outreg import model as M


@pytest.fixture
def scalar_model():
    return M.PlantModel(A=[[-1.0]], B=[[1.0]], C=[[1.0]],
                        A_b=[[0.1]], B_b=[[0.1]], k_b=0.5)


@pytest.fixture
def scalar_task():
    return M.RegulationTask(y_d=[2.0])


@pytest.fixture
def scalar_gains():
    return M.ControllerGains(B_c=[[1.0]], C_c=[[-1.0]], D_c=[[-10.0]])


def random_stable_system(rng, n_x, n_u, n_y=None, box=0.05, max_entries=None):
    """Random plant with a comfortably Hurwitz nominal A and sparse boxes."""
    n_y = n_u if n_y is None else n_y
    A = rng.normal(size=(n_x, n_x))
    A = A - (np.max(np.linalg.eigvals(A).real) + 1.0) * np.eye(n_x)
    B = rng.normal(size=(n_x, n_u))
    C = rng.normal(size=(n_y, n_x))
    A_b = np.full((n_x, n_x), box)
    B_b = np.full((n_x, n_u), box)
    if max_entries is not None:
        mask = np.zeros(n_x * n_x + n_x * n_u, dtype=bool)
        keep = rng.choice(mask.size, size=min(max_entries, mask.size), replace=False)
        mask[keep] = True
        A_b = A_b * mask[:n_x * n_x].reshape(n_x, n_x)
        B_b = B_b * mask[n_x * n_x:].reshape(n_x, n_u)
    return M.PlantModel(A=A, B=B, C=C, A_b=A_b, B_b=B_b, k_b=0.0)
