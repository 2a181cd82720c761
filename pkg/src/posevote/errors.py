"""Exception types shared across the package."""


class PoseVoteError(Exception):
    """Base class for all posevote errors."""


class DegenerateGeometry(PoseVoteError):
    """A projection denominator is too close to zero to evaluate.

    Signals that the (pose, correspondence) pair violates the separation
    assumptions; callers typically drop the pair and tally it.
    """


class InvalidEpsilon(PoseVoteError):
    """Grid resolution outside the usable (0, 1) range."""


class EmptyHistogram(PoseVoteError):
    """No cell received any count; there is no best vertex."""


class EmptyStructure(PoseVoteError):
    """The octree retained no surfaces; there is no best leaf."""


class ParameterOutOfRange(PoseVoteError):
    """Surface parameters fall outside the family's declared domain."""


class CoefficientOutOfRange(PoseVoteError):
    """Hyperplane coefficients must satisfy |a_i| <= 1, |b| <= d."""


class RejectionOverflow(PoseVoteError):
    """Scene generation exceeded its rejection-sampling budget."""


class ParseError(PoseVoteError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class EmptyInput(PoseVoteError):
    """Input file contained no correspondences."""


class MismatchedConfigs(PoseVoteError):
    """Benchmark records do not share comparable configurations."""
