"""Exception types shared across the package."""


class ArtifactError(Exception):
    """Base class for all package errors."""


class ParameterError(ArtifactError, ValueError):
    """Invalid model, payoff or configuration parameters."""


class DomainError(ArtifactError, ValueError):
    """Evaluation point outside the domain of a pricing function."""


class DiscretizationError(ArtifactError, RuntimeError):
    """A numerical scheme's safety guard fired too often."""


class UnsupportedModelError(ArtifactError, ValueError):
    """Operation is not defined for the requested model."""


class StructuralError(ArtifactError, ValueError):
    """Inputs have inconsistent shapes or missing required tracks."""


class RegimeViolationError(ArtifactError, RuntimeError):
    """A path left the regime assumed by the requested pricing formula."""


class UnsupportedRecursionError(ArtifactError, RuntimeError):
    """No continuation pricer is declared for a reachable strong-arbitrage time."""


class SolverError(ArtifactError, RuntimeError):
    """A PDE or root solver failed or was configured unstably."""


class SingularityError(ArtifactError, RuntimeError):
    """Singular price activity at a zero price."""


class IndeterminateError(ArtifactError, RuntimeError):
    """Convergence of an improper integral could not be decided numerically."""
