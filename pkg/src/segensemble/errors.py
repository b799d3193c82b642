"""Exception types shared by all modules.

Every error carries the process exit code the CLI reports for it.
"""


class SegEnsembleError(Exception):
    exit_code = 1


class InputMissingError(SegEnsembleError, FileNotFoundError):
    exit_code = 2


class UnsupportedFormatError(SegEnsembleError, ValueError):
    pass


class CorruptInputError(SegEnsembleError, ValueError):
    pass


class InvalidArgumentError(SegEnsembleError, ValueError):
    exit_code = 4


class InvalidSpecError(SegEnsembleError, ValueError):
    exit_code = 4


class InvalidTransformError(SegEnsembleError, ValueError):
    exit_code = 5


class IncompatibleMemberError(SegEnsembleError, ValueError):
    exit_code = 3


class IncompatibleVolumesError(SegEnsembleError, ValueError):
    exit_code = 3


class EmptyEnsembleError(SegEnsembleError, ValueError):
    pass


class EmptyDomainError(SegEnsembleError, ValueError):
    pass


class CorruptVotesError(SegEnsembleError, ValueError):
    pass


class UndefinedCorrelationError(SegEnsembleError, ValueError):
    pass


class VolumeIOError(SegEnsembleError, OSError):
    pass
