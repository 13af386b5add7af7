"""Exception hierarchy for the laboratory.

Every failure mode that callers are expected to handle gets its own class;
the CLI maps the coarse families to exit codes (validation: 2,
convergence: 3, blow-up: 4).
"""


class VortexLabError(Exception):
    """Base class for all package errors."""


class DegenerateMetricError(VortexLabError):
    """Metric matrix is not positive definite at a queried point."""


class IntegrationError(VortexLabError):
    """Geodesic integrator lost its invariant (speed drift past tolerance)."""


class RelaxationError(VortexLabError):
    """Geodesic relaxation failed to reach the residual tolerance."""


class CollapseError(VortexLabError):
    """Curve length fell below the collapse threshold during relaxation."""


class OutOfChartError(VortexLabError):
    """Point lies outside the tubular chart."""


class AmbiguityError(VortexLabError):
    """Nearest-point projection onto the loop has two competing minimizers."""


class NormalizationError(VortexLabError):
    """Energy normalization undefined (epsilon >= 1)."""


class ExtractionError(VortexLabError):
    """Filament extraction hit an unresolvable ambiguous face."""


class HomologyError(VortexLabError):
    """Current difference does not bound in the competitor class."""


class SolverError(VortexLabError):
    """Linear-program or linear-algebra backend did not converge."""


class StabilityError(VortexLabError):
    """Requested time step exceeds the stability bound."""


class BlowUpError(VortexLabError):
    """NaN/Inf detected in an evolved field."""


class TraceError(VortexLabError):
    """Flow trace lacks the checkpoints required for the computation."""


class DegeneracyError(VortexLabError):
    """Jacobi operator has an eigenvalue inside the nondegeneracy margin."""


class DomainError(VortexLabError):
    """Parameter outside its admissible ball/interval."""


class ChartOverflowError(VortexLabError):
    """Perturbation amplitude exceeds the tubular chart radius."""


class DegreeError(VortexLabError):
    """Scalar saddle projection has no sign change over the parameter ball."""


class ConvergenceError(VortexLabError):
    """Iterative search exhausted its budget before meeting the target."""


class ValidationError(VortexLabError):
    """Experiment configuration violates an invariant."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class ResumeError(VortexLabError):
    """Checkpoint incompatible with the active configuration."""
