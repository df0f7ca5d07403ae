"""Exception taxonomy shared across the package.

Each error carries a short machine-parsable ``code`` that the CLI prints,
plus an exit-code bucket: 3 for bad inputs/config, 1 for runtime failures.
"""


class AvtlabError(Exception):
    code = "INTERNAL"
    exit_code = 1


class ShapeError(AvtlabError):
    code = "SHAPE"
    exit_code = 3


class NumericError(AvtlabError):
    code = "NUMERIC"


class ContractError(AvtlabError):
    code = "CONTRACT"
    exit_code = 3


class DomainError(AvtlabError):
    code = "DOMAIN"
    exit_code = 3


class DegenerateInputError(AvtlabError):
    code = "DEGENERATE_INPUT"
    exit_code = 3


class IterationLimitError(AvtlabError):
    code = "ITERATION_LIMIT"


class InputError(AvtlabError):
    code = "BAD_INPUT"
    exit_code = 3


class StateError(AvtlabError):
    code = "BAD_STATE"
    exit_code = 3


class GenerationError(AvtlabError):
    code = "GENERATION"


class SplitError(AvtlabError):
    code = "SPLIT"


class TableError(AvtlabError):
    code = "TABLE"
    exit_code = 3


class ConfigError(AvtlabError):
    code = "CONFIG"
    exit_code = 3


class MissingPosteriorsError(ConfigError):
    code = "MISSING_POSTERIORS"


class PretrainingError(AvtlabError):
    code = "PRETRAINING_FAILED"


class MediaIOError(AvtlabError):
    code = "MEDIA_IO"
