"""Exception hierarchy shared by every gryphon module."""


class GryphonError(Exception):
    """Base class. ``code`` is a short machine-readable tag."""

    code = "error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class SchemaError(GryphonError):
    code = "schema"


class EventError(GryphonError):
    code = "event"

    def __init__(self, message: str, code: str | None = None, position: int | None = None):
        super().__init__(message, code)
        self.position = position


class ParseError(GryphonError):
    code = "syntax"


class TypeCheckError(GryphonError):
    code = "type"


class EvaluationError(GryphonError):
    code = "evaluation"


class GraphError(GryphonError):
    """Graph validation failure. ``code`` is one of cycle, schema-mismatch,
    kind-mismatch, dangling-reference, not-a-tree, duplicate, bad-document."""

    code = "graph"

    def __init__(self, message: str, code: str | None = None, subject: str | None = None):
        super().__init__(message, code)
        self.subject = subject


class MatchError(GryphonError):
    code = "match"


class InterpError(GryphonError):
    code = "interp"


class FrameError(GryphonError):
    code = "frame"


class LogCorruptError(GryphonError):
    code = "log-corrupt"


class BrokerError(GryphonError):
    code = "broker"


class RewriteError(GryphonError):
    code = "not-applicable"


class SimulationError(GryphonError):
    code = "simulation"
