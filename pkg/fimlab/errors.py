from typing import Any, Dict, Optional


class FimlabError(Exception):
    """
    Base error: a stable machine-readable code, a message, and optional detail.
    The CLI turns these into an exit code plus one JSON line on stderr.
    """

    exit_code = 1

    def __init__(self, code: str, message: str, detail: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.detail = dict(detail or {})

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": self.message, "detail": self.detail}


class InputRejected(FimlabError):
    """Invalid input: domain violation, dimension mismatch, bad config."""


class Unsupported(FimlabError):
    """The operation is not defined for this input (e.g. enumerating an infinite-support head)."""


class NumericalFailure(FimlabError):
    exit_code = 2


def require(cond: bool, code: str, message: str, **detail: Any) -> None:
    if not cond:
        raise InputRejected(code, message, detail)
