"""Exception types shared across the workbench."""

from __future__ import annotations


class VoltmpcError(Exception):
    """Base class for all workbench errors."""


# --- case parsing / network building -------------------------------------

class CaseSyntaxError(VoltmpcError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingTableError(VoltmpcError):
    pass


class DanglingReferenceError(VoltmpcError):
    pass


class ZeroImpedanceError(VoltmpcError):
    pass


class DisconnectedGraphError(VoltmpcError):
    pass


class UnknownBusError(VoltmpcError):
    pass


# --- power flow ------------------------------------------------------------

class DimensionMismatchError(VoltmpcError):
    pass


class PowerFlowNonConvergence(VoltmpcError):
    def __init__(self, iterations: int, mismatch: float):
        self.iterations = iterations
        self.mismatch = mismatch
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(max |mismatch| = {mismatch:.3e} p.u.)"
        )


class SingularJacobianError(VoltmpcError):
    pass


# --- estimation ------------------------------------------------------------

class SingularInformationError(VoltmpcError):
    def __init__(self, cond: float, line: tuple[int, int] | None = None):
        self.cond = cond
        self.line = line
        where = f" for line {line}" if line is not None else ""
        super().__init__(
            f"normal-matrix condition number {cond:.3e} exceeds the limit{where}; "
            "operating point is uninformative"
        )


class MissingEstimateError(VoltmpcError):
    pass


# --- MPC (centralized and distributed) --------------------------------------

class MissingPartialsError(VoltmpcError):
    pass


class MpcSolveError(VoltmpcError):
    """Controller optimization failed; carries the best available solution."""

    def __init__(self, message: str, solution=None):
        self.solution = solution
        super().__init__(message)


class MpcInfeasibleError(MpcSolveError):
    pass


class SlackBusError(VoltmpcError):
    pass


class MissingReplicaError(VoltmpcError):
    pass


class AdmmNotConvergedError(VoltmpcError):
    """Consensus loop hit its round limit; the last iterate is attached."""

    def __init__(self, iterations: int, residual: float, solution=None, report=None):
        self.iterations = iterations
        self.residual = residual
        self.solution = solution
        self.report = report
        super().__init__(
            f"consensus residual {residual:.3e} after {iterations} rounds"
        )


# --- scenario / profiles -----------------------------------------------------

class SchemaError(VoltmpcError):
    pass


class RaggedSeriesError(VoltmpcError):
    pass


class MalformedCurveError(VoltmpcError):
    pass


class PlantDivergedError(VoltmpcError):
    def __init__(self, instant: int, cause: Exception):
        self.instant = instant
        self.cause = cause
        super().__init__(f"plant power flow diverged at instant {instant}: {cause}")


class ConfigError(VoltmpcError):
    pass


# --- cli ---------------------------------------------------------------------

class GridMismatchError(VoltmpcError):
    pass
