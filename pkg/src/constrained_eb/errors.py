"""Exception hierarchy.

Every error carries a short ``code`` and the ``module`` that raised it so the
command line front end can emit a machine readable record and choose an exit
status from the category (configuration, data or numerical failure).
"""


class ConstrainedEBError(Exception):
    """Base class for all package errors."""

    code = "Error"
    module = "core"
    exit_status = 4

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details

    def to_record(self):
        rec = {"error": self.code, "module": self.module, "message": str(self)}
        rec.update({k: _jsonable(v) for k, v in self.details.items()})
        return rec


def _jsonable(v):
    try:
        return v.tolist()
    except AttributeError:
        return v


class ConfigError(ConstrainedEBError):
    code = "ConfigError"
    exit_status = 2


class DataError(ConstrainedEBError):
    code = "DataError"
    exit_status = 3


class NumericalError(ConstrainedEBError):
    code = "NumericalError"
    exit_status = 4


# bures
class NonSymmetric(DataError):
    code, module = "NonSymmetric", "bures"


class IndefiniteBeyondTolerance(NumericalError):
    code, module = "IndefiniteBeyondTolerance", "bures"


class FromNotPositiveDefinite(NumericalError):
    code, module = "FromNotPositiveDefinite", "bures"


# models
class DomainError(DataError):
    code, module = "DomainError", "models"


class SingularCovariance(NumericalError):
    code, module = "SingularCovariance", "models"


class EmptyDataset(DataError):
    code, module = "EmptyDataset", "models"


class DimensionError(DataError):
    code, module = "DimensionError", "models"


class DegenerateSample(NumericalError):
    code, module = "DegenerateSample", "models"


# gmodel
class GridTooLarge(ConfigError):
    code, module = "GridTooLarge", "gmodel"


class AllAtomsZeroLikelihood(NumericalError):
    code, module = "AllAtomsZeroLikelihood", "gmodel"


class NonConvergence(NumericalError):
    code, module = "NonConvergence", "gmodel"


# transport
class InfeasibleMarginals(DataError):
    code, module = "InfeasibleMarginals", "transport"


class CycleLimit(NumericalError):
    code, module = "CycleLimit", "transport"


class Infeasible(NumericalError):
    code, module = "Infeasible", "transport"


class Unbounded(NumericalError):
    code, module = "Unbounded", "transport"


class EmptyRow(DataError):
    code, module = "EmptyRow", "transport"


class ProblemTooLarge(ConfigError):
    code, module = "ProblemTooLarge", "transport"


# constrain
class BayesCovarianceSingular(NumericalError):
    code, module = "BayesCovarianceSingular", "constrain"


class GridInfeasible(NumericalError):
    code, module = "GridInfeasible", "constrain"


# cli
class ParseError(DataError):
    code, module = "ParseError", "cli"


class ColumnMismatch(DataError):
    code, module = "ColumnMismatch", "cli"


class RowCountMismatch(DataError):
    code, module = "RowCountMismatch", "cli"


class UnknownScenario(ConfigError):
    code, module = "UnknownScenario", "cli"
