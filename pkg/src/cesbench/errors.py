"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for backend failures, 4 for data problems.
"""

from __future__ import annotations


class CesbenchError(Exception):
    exit_code = 1


class ConfigError(CesbenchError, ValueError):
    exit_code = 2


class BackendError(CesbenchError):
    exit_code = 3


class DataError(CesbenchError, ValueError):
    exit_code = 4


# dataset


class MalformedRow(DataError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class DuplicateId(DataError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"duplicate id {item_id!r}")


class UnknownLabel(DataError):
    def __init__(self, value: str, line: int):
        self.value = value
        self.line = line
        super().__init__(f"line {line}: unknown label {value!r}")


class UnlabeledRecord(DataError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"record {item_id!r} has no label")


class InsufficientClassSize(DataError):
    def __init__(self, cls, have: int, need: int):
        self.cls = cls
        self.have = have
        self.need = need
        super().__init__(f"class {cls} has {have} labeled records, need more than {need}")


# vectors


class DimensionMismatch(DataError):
    pass


class ZeroNormVector(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyClass(DataError):
    pass


class NonFiniteLoss(DataError):
    pass


class CacheCorrupt(DataError):
    def __init__(self, key: str, reason: str = "checksum mismatch"):
        self.key = key
        super().__init__(f"cache record {key[:16]}...: {reason}")


# backends


class TransportError(BackendError):
    def __init__(self, status: int | None, body: str = ""):
        self.status = status
        self.body = body[:200]
        super().__init__(f"transport failure (status={status}): {self.body}")


class RateLimited(BackendError):
    def __init__(self, retry_after: float | None):
        self.retry_after = retry_after
        super().__init__(f"rate limited (retry_after={retry_after})")


class EmptyResponse(BackendError):
    pass


class BackendUnavailable(BackendError):
    pass


class AbortedRun(BackendError):
    def __init__(self, item_id: str, cause: BaseException):
        self.item_id = item_id
        self.cause = cause
        super().__init__(f"run aborted at item {item_id!r}: {cause}")


class ImageUnreadable(DataError):
    pass


# discovery


class TooFewPoints(DataError):
    pass


class DegenerateInput(DataError):
    pass


class UnresolvedCluster(BackendError):
    def __init__(self, label: int, raw: str):
        self.label = label
        self.raw = raw
        super().__init__(f"cluster {label} could not be mapped; model said {raw!r}")


class EmptyCluster(DataError):
    pass


class UnmappedCluster(DataError):
    pass


# metrics / cost


class ItemMismatch(DataError):
    pass


class UnknownPricing(ConfigError):
    def __init__(self, model_id: str, mode: str):
        self.model_id = model_id
        self.mode = mode
        super().__init__(f"no pricing entry for model={model_id!r} mode={mode!r}")


class MissingDefinition(ConfigError):
    pass
