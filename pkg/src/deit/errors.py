"""Exception hierarchy shared by every deit module."""


class DeiTError(Exception):
    pass


class ShapeError(DeiTError, ValueError):
    pass


class ParameterError(DeiTError, ValueError):
    pass


class ContractError(DeiTError, RuntimeError):
    pass


class EmptyTapeError(ContractError):
    pass


class FormatError(DeiTError, ValueError):
    pass


class CorruptionError(FormatError):
    pass


class VersionError(FormatError):
    pass


class UsageError(DeiTError):
    pass
