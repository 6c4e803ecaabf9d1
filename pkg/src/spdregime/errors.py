"""Exception hierarchy shared by all spdregime modules."""


class SPDRegimeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SPDRegimeError):
    """Operands have incompatible dimensions."""


class DomainError(SPDRegimeError):
    """Input lies outside the mathematical domain of the operation."""


class EigFailure(SPDRegimeError):
    """Eigensolver did not converge within its sweep cap."""

    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


class MeanFailure(SPDRegimeError):
    """Karcher-mean fixed point iteration did not reach tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class RetractionError(SPDRegimeError):
    """QR retraction hit a rank-deficient factor."""


class ConfigError(SPDRegimeError):
    """Invalid or inconsistent configuration."""


class DataError(SPDRegimeError):
    """Input data violates a precondition (too short, empty, degenerate)."""


class ZeroVolatility(DataError):
    """Return window has (numerically) zero standard deviation."""


class EmptySplit(DataError):
    """Purging or embargo removed every training window."""


class TrainingDiverged(SPDRegimeError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class OptFailure(SPDRegimeError):
    """Portfolio optimizer did not reach its KKT tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class EstimationError(DataError):
    """Not enough (filtered) observations to estimate moments."""


class MissingColumn(DataError):
    """CSV is missing a required column."""


class UnparseableCell(DataError):
    """CSV cell could not be parsed as a number or date."""

    def __init__(self, message: str, row: int, col: int):
        super().__init__(message)
        self.row = row
        self.col = col


class NonMonotonicDates(DataError):
    """Date column is not strictly increasing."""


class NonPositivePrice(DataError):
    """Price table contains a zero or negative price."""


class AllAssetsDropped(DataError):
    """Cleaning removed every asset from the table."""
