"""Robust practical output regulation toolkit.

Synthesizes dynamic output-feedback controllers (multivariable PI structure)
for linear plants with element-wise (box) parameter uncertainty and a
norm-bounded nonlinearity, certifies the closed loop with a common quadratic
Lyapunov function obtained from linear matrix inequalities, derives certified
bounds for an event-triggered digital implementation, and validates all
certificates against a closed-loop simulator with brute-force oracles.

Subpackages / modules
---------------------
model       plant/task/controller data types, equilibria, block embeddings
conic       affine symmetric-matrix expressions and a small SDP front end
synthesis   certification LMIs, sequential convex synthesis, vertex oracle
etc_bounds  event-triggered implementation constants and error bounds
sim         fixed-step closed-loop simulation and sweep experiments
cli         command-line front end with reproducible run manifests
"""

__version__ = "0.1.0"

from . import model, conic, synthesis, etc_bounds, sim  # noqa: F401,E402
