"""Exception types raised across the package."""


class TmsError(Exception):
    pass


class ParseError(TmsError):
    """A configuration, map or scenario file could not be parsed."""


class ValidationError(TmsError, ValueError):
    def __init__(self, field, reason=""):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}" if reason else field)


# event system / ordering

class DuplicateListenerId(TmsError):
    pass


class UnknownListener(TmsError):
    pass


class ParentCycle(TmsError):
    pass


class CycleError(TmsError):
    """Dependencies are cyclic. ``members`` is one cycle, in dependency order:
    each member depends on the next one, and the last depends on the first."""

    def __init__(self, members):
        self.members = list(members)
        super().__init__("dependency cycle: " + " -> ".join(self.members))


# kernel

class DuplicateModuleId(TmsError):
    pass


class UnknownDependency(TmsError):
    pass


class UnknownFactory(TmsError):
    pass


class InitError(TmsError):
    def __init__(self, module_id, cause=None):
        self.module_id = module_id
        self.cause = cause
        super().__init__(f"module {module_id!r} failed to initialize: {cause!r}")


# comms

class UnknownVehicle(TmsError):
    pass


class QueueFull(TmsError):
    pass


class BindError(TmsError):
    pass


# protocol

class ProtocolError(TmsError):
    pass


class EncodeError(ProtocolError):
    pass


class DecodeError(ProtocolError):
    pass


class TruncatedStream(ProtocolError):
    """The stream ended in the middle of a frame."""


class EndOfStream(TmsError, EOFError):
    """The stream ended cleanly at a frame boundary."""


# datastore

class DanglingEdge(ParseError):
    def __init__(self, src, dst):
        self.src, self.dst = src, dst
        super().__init__(f"edge {src}->{dst} names an unknown node")


class UnknownEdge(TmsError):
    pass


class UnknownNode(TmsError):
    pass


# fleet simulator

class ConnectError(TmsError):
    pass


class AssertionFailure(TmsError):
    def __init__(self, failures, report=None):
        self.failures = list(failures)
        self.report = report
        super().__init__("unmet expectations: " + "; ".join(self.failures))
