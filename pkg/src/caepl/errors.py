"""Exception hierarchy.

Every error raised deliberately by the package derives from :class:`CaeplError`;
the CLI maps each subclass to its own exit status.
"""


class CaeplError(Exception):
    exit_code = 1
    code = "error"


class ShapeError(CaeplError, ValueError):
    code = "shape"


class ParameterError(CaeplError, ValueError):
    code = "parameter"


class ContractError(CaeplError, RuntimeError):
    code = "contract"


class SpecError(CaeplError, ValueError):
    exit_code = 2
    code = "spec"


class ConfigError(CaeplError, ValueError):
    exit_code = 2
    code = "config"


class TransferError(CaeplError, KeyError):
    exit_code = 6
    code = "transfer"

    def __str__(self):
        return Exception.__str__(self)


class DataError(CaeplError, ValueError):
    exit_code = 4
    code = "data"


class MissingCheckpointError(CaeplError, FileNotFoundError):
    exit_code = 3
    code = "missing_checkpoint"


class IntegrityError(CaeplError, IOError):
    exit_code = 5
    code = "integrity"


class VersionError(CaeplError, IOError):
    exit_code = 5
    code = "version"


class UndefinedScoreError(CaeplError, ZeroDivisionError):
    exit_code = 7
    code = "undefined_score"
