"""Exception hierarchy shared by agents, manager and codec."""


class ClambsError(Exception):
    """Base class; ``code`` is the name sent in protocol Error frames."""

    code = "Error"


class MalformedOid(ClambsError, ValueError):
    code = "MalformedOid"


class UnknownOid(ClambsError, KeyError):
    code = "UnknownOid"

    def __str__(self):
        return Exception.__str__(self)


class MalformedFrame(ClambsError, ValueError):
    code = "MalformedFrame"


class ProcessNotFound(ClambsError, LookupError):
    code = "ProcessNotFound"


class BackendUnavailable(ClambsError, RuntimeError):
    code = "BackendUnavailable"


class PortInUse(ClambsError, OSError):
    code = "PortInUse"


class SizeExceeded(ClambsError, ValueError):
    code = "SizeExceeded"


class PeerDisconnected(ClambsError, ConnectionError):
    code = "PeerDisconnected"


class NoData(ClambsError, LookupError):
    code = "NoData"


class BadFilter(ClambsError, ValueError):
    code = "BadFilter"


class DomainError(ClambsError, ValueError):
    code = "DomainError"


class RemoteError(ClambsError):
    """An Error frame received from a peer."""

    def __init__(self, code, message=""):
        super().__init__(f"{code}: {message}" if message else code)
        self.remote_code = code
        self.message = message


_BY_CODE = {
    cls.code: cls
    for cls in (
        MalformedOid, UnknownOid, MalformedFrame, ProcessNotFound,
        BackendUnavailable, SizeExceeded, PeerDisconnected, NoData,
        BadFilter, DomainError,
    )
}


def error_class(code):
    """Map an Error-frame code back to the local exception class, if any."""
    return _BY_CODE.get(code)
