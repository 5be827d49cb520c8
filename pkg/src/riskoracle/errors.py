"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`RiskOracleError`. The ``exit_code`` attribute is what the CLI returns
when the error escapes a subcommand.
"""


class RiskOracleError(Exception):
    exit_code = 1


class ConfigError(RiskOracleError):
    exit_code = 2


class DataError(RiskOracleError):
    exit_code = 3


class NumericError(RiskOracleError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    pass


class DegenerateBatchError(NumericError):
    pass


class OptimizerAbort(NumericError):
    pass


class ContractError(NumericError):
    pass


class StateError(RiskOracleError):
    pass


class PartitionError(ConfigError):
    pass


class NormalizationError(DataError):
    pass


class IndicatorError(DataError):
    pass


class SamplingError(DataError):
    def __init__(self, message, earliest=None):
        super().__init__(message)
        self.earliest = earliest


class SplitError(DataError):
    pass


class AffinityError(DataError):
    pass


class FeatureError(DataError):
    pass


class TrainingError(DataError):
    pass
