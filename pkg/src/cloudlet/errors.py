"""Error types shared across the cluster runtime.

Every error carries a stable machine-readable ``code`` so callers (CLI,
HTTP service, tests) can branch on it without parsing messages.
"""

from __future__ import annotations


class CloudletError(Exception):
    """Base error with a stable code string."""

    code = "INTERNAL"

    def __init__(self, message: str = "", *, code: str | None = None):
        super().__init__(message or self.__class__.code)
        if code is not None:
            self.code = code


class UnknownComponent(CloudletError):
    code = "UNKNOWN_COMPONENT"


class NoFreeUplink(CloudletError):
    code = "NO_FREE_UPLINK"


class NonPositiveInput(CloudletError):
    code = "NON_POSITIVE_INPUT"


class NonPositiveLoad(CloudletError):
    code = "NON_POSITIVE_LOAD"


class EmptyNodeSet(CloudletError):
    code = "EMPTY_NODE_SET"


class NoLiveReplica(CloudletError):
    code = "NO_LIVE_REPLICA"


class StaleGateway(CloudletError):
    code = "STALE_GATEWAY"

    def __init__(self, message: str = "", *, current_epoch: int = 0):
        super().__init__(message)
        self.current_epoch = current_epoch


class NotFound(CloudletError):
    code = "NOT_FOUND"


class QueueFull(CloudletError):
    code = "QUEUE_FULL"


class UnknownNode(CloudletError):
    code = "UNKNOWN_NODE"


class DuplicateId(CloudletError):
    code = "DUPLICATE_ID"


class PortPolicyViolation(CloudletError):
    code = "PORT_POLICY"


class ParseError(CloudletError):
    code = "PARSE_ERROR"


class ValidationError(CloudletError):
    code = "VALIDATION_ERROR"

    def __init__(self, message: str = "", *, locations: list[str] | None = None):
        super().__init__(message)
        self.locations = locations or []
