"""Error types shared across the package, with CLI exit-code mapping."""

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_FACTOR_ERROR = 3
EXIT_BAD_INPUT = 4


class NestqrError(Exception):
    """Base class for all package errors.

    Attributes
    ----------
    error_class : str
        Short machine-readable tag (stable across releases).
    exit_code : int
        Suggested process exit code for CLI front ends.
    """

    error_class = "error"
    exit_code = EXIT_BAD_INPUT


class FormatError(NestqrError):
    """Malformed input file (Matrix Market, CLI problem spec, ...)."""

    error_class = "bad_input"
    exit_code = EXIT_BAD_INPUT

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SingularPivotError(NestqrError):
    """A triangular factor has a pivot at or below the singularity floor.

    Surfaced, never patched: pivot perturbation is out of scope by design.
    """

    error_class = "singular_pivot"
    exit_code = EXIT_FACTOR_ERROR

    def __init__(self, index, value, context=""):
        where = f" in {context}" if context else ""
        super().__init__(f"singular pivot{where}: |R[{index},{index}]| = {abs(value):.3e}")
        self.index = index
        self.value = value
        self.context = context


class IllConditionedInterfaceError(NestqrError):
    """sigma_min of an interface block is below the floor (unscaled mode)."""

    error_class = "ill_conditioned_interface"
    exit_code = EXIT_FACTOR_ERROR

    def __init__(self, interface, sigma_min, floor):
        super().__init__(
            f"interface {interface}: sigma_min = {sigma_min:.3e} below floor {floor:.3e}"
        )
        self.interface = interface
        self.sigma_min = sigma_min


class StructurallySingularError(NestqrError):
    """No perfect row/column matching exists (matrix cannot be full rank)."""

    error_class = "structurally_singular"
    exit_code = EXIT_FACTOR_ERROR

    def __init__(self, n_matched, n):
        super().__init__(
            f"structurally singular: only {n_matched} of {n} columns can be matched to rows"
        )
        self.n_matched = n_matched
        self.n = n


class PartitionError(NestqrError):
    """Invalid partitioning request (e.g. more levels than the grid supports)."""

    error_class = "bad_partition"
    exit_code = EXIT_BAD_INPUT


class NotConvergedError(NestqrError):
    """Raised only by CLI plumbing when a solve does not reach tolerance."""

    error_class = "not_converged"
    exit_code = EXIT_NOT_CONVERGED
