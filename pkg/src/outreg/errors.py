"""Exception types shared across the toolkit."""


class OutregError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatch(OutregError):
    """Matrix or vector dimensions are inconsistent."""


class NegativeBound(OutregError):
    """An uncertainty bound matrix has a negative entry."""


class EquilibriumInfeasible(OutregError):
    """No steady state matches the requested output within tolerance."""

    def __init__(self, residual: float):
        self.residual = float(residual)
        super().__init__(f"equilibrium system inconsistent, residual {residual:.3e}")


class NotSymmetric(OutregError):
    """A matrix expected to be symmetric is not."""


class NotPositiveDefinite(OutregError):
    """A matrix expected to be positive definite is not."""


class SingularBlock(OutregError):
    """A Schur pivot block is singular or not negative definite."""


class AllSolvesFailed(OutregError):
    """Every solver call in a grid search failed."""


class InitializationInfeasible(OutregError):
    """The synthesis initialization LMIs could not be solved."""


class StalledBelowZero(OutregError):
    """Synthesis converged without reaching a positive objective."""

    def __init__(self, objective: float, trace=None):
        self.objective = float(objective)
        self.trace = trace
        super().__init__(
            f"synthesis stalled at objective {objective:.3e} <= 0; no stability certificate"
        )


class NonFiniteState(OutregError):
    """Simulated state exceeded the divergence guard."""

    def __init__(self, t: float, trajectory=None):
        self.t = float(t)
        self.trajectory = trajectory
        super().__init__(f"state magnitude exceeded divergence guard at t={t:.6g}")


class UsageError(OutregError):
    """Bad command-line arguments or malformed input files."""
