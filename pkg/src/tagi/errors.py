"""Exception hierarchy. The CLI maps these onto exit codes."""


class TagiError(Exception):
    exit_code = 1


class DimensionError(TagiError, ValueError):
    exit_code = 3


class DegenerateInputError(TagiError, ValueError):
    exit_code = 3


class ContractError(TagiError):
    exit_code = 3


class ConfigError(TagiError):
    exit_code = 3


class VocabularyError(TagiError, ValueError):
    exit_code = 3


class LengthError(TagiError, ValueError):
    exit_code = 3


class NumericalError(TagiError, FloatingPointError):
    exit_code = 4


class TrainingFailure(NumericalError):
    pass


class FormatError(TagiError):
    exit_code = 5
