"""Exception hierarchy shared by every module in the package."""


class SecureMLEError(Exception):
    """Base class for all package errors."""


class ShapeError(SecureMLEError, ValueError):
    pass


class CovarianceNotPD(SecureMLEError, ValueError):
    pass


class DomainError(SecureMLEError, ValueError):
    pass


class NotRepresentable(SecureMLEError, ValueError):
    pass


class LayoutError(SecureMLEError, ValueError):
    pass


class RankError(SecureMLEError, ValueError):
    pass


class ProtocolOrderError(SecureMLEError, RuntimeError):
    pass


class ProtocolAborted(SecureMLEError, RuntimeError):
    pass


class TransportTimeout(SecureMLEError, TimeoutError):
    pass


class ReplayError(SecureMLEError, ValueError):
    pass


class AuditError(SecureMLEError, ValueError):
    pass


class AlignmentError(SecureMLEError, ValueError):
    pass


class MissingDataError(SecureMLEError, ValueError):
    pass


class ConfigError(SecureMLEError, ValueError):
    pass
