"""Exception hierarchy shared by all gridforge modules."""


class GridforgeError(Exception):
    """Base class for every error raised by this package."""


class MalformedCase(GridforgeError):
    """Case file cannot be read (syntax, missing table, wrong column count)."""


class InconsistentCase(GridforgeError):
    """Case file parses but references are dangling or the slack is ill-defined."""


class NoSlackGenerator(InconsistentCase):
    pass


class IslandedNetwork(GridforgeError):
    """Removing a branch splits the network into several islands."""


class Diverged(GridforgeError):
    """Newton-Raphson power flow did not reach the mismatch tolerance."""


class UnconvergedInput(GridforgeError):
    pass


class IllFormedProgram(GridforgeError):
    pass


class BackendUnavailable(GridforgeError):
    pass


class SolverFailure(GridforgeError):
    pass


class BoundDomainError(GridforgeError):
    """Angle bounds outside the (-pi/2, pi/2) domain of the trigonometric envelopes."""


class EmptyFeasibleSet(GridforgeError):
    """The relaxation is infeasible over the whole box: every input is insecure."""


class EmptyPolytope(GridforgeError):
    pass


class DegeneratePolytope(GridforgeError):
    pass


class NlpFailure(GridforgeError):
    pass


class TooFewPoints(GridforgeError):
    pass


class ConfigError(GridforgeError):
    pass
