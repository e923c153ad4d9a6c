"""Exception hierarchy shared by every module in the package."""


class SmcError(Exception):
    """Base class for all toolkit errors."""


# oracle
class UnalignedRegion(SmcError, ValueError):
    pass


class InvalidSelector(SmcError, ValueError):
    pass


class LayoutMismatch(SmcError, ValueError):
    pass


# encoder
class EncodingError(SmcError):
    pass


class DisplacementOutOfRange(EncodingError, ValueError):
    pass


class UnsupportedOperand(EncodingError, ValueError):
    pass


class UnknownOpcode(EncodingError, ValueError):
    pass


class UnboundLabel(EncodingError, KeyError):
    pass


# codegen
class UnitTooLarge(SmcError, ValueError):
    pass


class IterationOutOfRange(SmcError, ValueError):
    pass


# exec memory
class PermissionDenied(SmcError, PermissionError):
    pass


class OutOfMemory(SmcError, MemoryError):
    pass


class AlreadyReleased(SmcError, RuntimeError):
    pass


# clocks / pmc
class Unsupported(SmcError, RuntimeError):
    pass


class UnavailableTimer(SmcError, RuntimeError):
    pass


class NoTimerAvailable(SmcError, RuntimeError):
    pass


class UnknownVendor(SmcError, ValueError):
    pass


# guard
class InvalidRegion(SmcError, ValueError):
    pass


class OracleMismatch(SmcError, RuntimeError):
    pass


class KernelFault(SmcError, RuntimeError):
    """The native kernel died (signal) while checksumming."""


# bench
class VariantUnsupported(SmcError, RuntimeError):
    pass


class ChecksumMismatch(SmcError, RuntimeError):
    pass
