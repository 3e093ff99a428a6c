"""Named benchmark presets."""

import numpy as np

from .model import PlantModel, RegulationTask

# Four-state, two-input benchmark with an unstable nominal state matrix,
# uniform 0.1 uncertainty boxes on every A and B entry, and a bounded
# per-coordinate sinusoid nonlinearity.  Target output [9, 10].
_EX1_A = [
    [1.40, -0.21, 6.71, -5.68],
    [-0.58, -4.29, 0.00, 0.67],
    [1.07, 4.27, -6.65, 5.89],
    [0.05, 4.27, 1.34, -2.10],
]
_EX1_B = [
    [0.00, 0.00],
    [5.68, 0.00],
    [1.14, -3.15],
    [1.14, 0.00],
]
_EX1_C = [
    [1.0, 0.0, 1.0, -1.0],
    [0.0, 1.0, 0.0, 0.0],
]

EXAMPLE1_KB = 0.5   # nonlinearity amplitude used by the bundled experiments


def example1():
    """The bundled example-1 benchmark: (PlantModel, RegulationTask)."""
    model = PlantModel(
        A=_EX1_A,
        B=_EX1_B,
        C=_EX1_C,
        A_b=0.1 * np.ones((4, 4)),
        B_b=0.1 * np.ones((4, 2)),
        k_b=EXAMPLE1_KB,
    )
    task = RegulationTask(y_d=[9.0, 10.0])
    return model, task
