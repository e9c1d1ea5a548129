"""Exception hierarchy shared by every tier.

Each class carries a stable ``code`` used verbatim in wire responses.
"""

from __future__ import annotations


class TrinityError(Exception):
    code = "ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.__class__.__name__)
        self.details = details


# data model
class DuplicateEntity(TrinityError):
    code = "DUPLICATE_ENTITY"


class ValidationFailed(TrinityError):
    code = "VALIDATION_FAILED"

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class DestructiveChange(TrinityError):
    code = "DESTRUCTIVE_CHANGE"


class MissingPremiseEndpoint(TrinityError):
    code = "MISSING_PREMISE_ENDPOINT"


class UnknownEntity(TrinityError):
    code = "UNKNOWN_ENTITY"


# sharding
class EmptyShardMap(TrinityError):
    code = "EMPTY_SHARD_MAP"


class DuplicateShard(TrinityError):
    code = "DUPLICATE_SHARD"


class UnknownShard(TrinityError):
    code = "UNKNOWN_SHARD"


class LastShard(TrinityError):
    code = "LAST_SHARD"


# relational
class EngineClosed(TrinityError):
    code = "ENGINE_CLOSED"


class PrimaryKeyViolation(TrinityError):
    code = "PRIMARY_KEY_VIOLATION"


class RowNotFound(TrinityError):
    code = "ROW_NOT_FOUND"


class TypeMismatch(TrinityError):
    code = "TYPE_MISMATCH"


class OpNotAllowed(TrinityError):
    code = "OP_NOT_ALLOWED"


class Conflict(TrinityError):
    code = "CONFLICT"


class AlreadyFinished(TrinityError):
    code = "ALREADY_FINISHED"


class LsnGap(TrinityError):
    code = "LSN_GAP"


class NotMaster(TrinityError):
    code = "NOT_MASTER"


class CorruptLog(TrinityError):
    code = "CORRUPT_LOG"


# routing
class NoHealthyTarget(TrinityError):
    code = "NO_HEALTHY_TARGET"


class CrossShardTransaction(TrinityError):
    code = "CROSS_SHARD_TRANSACTION"


class PartialMissing(TrinityError):
    code = "PARTIAL_MISSING"


class NodeUnavailable(TrinityError):
    """A target did not answer (crashed or cut off)."""

    code = "NODE_UNAVAILABLE"


# replication
class NotStructured(TrinityError):
    code = "NOT_STRUCTURED"


class UnmappedEntity(TrinityError):
    code = "UNMAPPED_ENTITY"


class PrimaryUnavailable(TrinityError):
    code = "PRIMARY_UNAVAILABLE"


class ShardUnreachable(TrinityError):
    code = "SHARD_UNREACHABLE"


# nosql
class NotPrimary(TrinityError):
    code = "NOT_PRIMARY"

    def __init__(self, message: str = "", current_epoch: int = 0):
        super().__init__(message, current_epoch=current_epoch)
        self.current_epoch = current_epoch


class StaleEpoch(TrinityError):
    code = "STALE_EPOCH"


class UnknownCollection(TrinityError):
    code = "UNKNOWN_COLLECTION"


class UnknownNode(TrinityError):
    code = "UNKNOWN_NODE"


class InvalidBox(TrinityError):
    code = "INVALID_BOX"


class NoEligibleSecondary(TrinityError):
    code = "NO_ELIGIBLE_SECONDARY"


class NoPrimary(TrinityError):
    code = "NO_PRIMARY"


# simulator / service
class ScenarioParseError(TrinityError):
    code = "SCENARIO_PARSE_ERROR"


class MalformedMessage(TrinityError):
    code = "MALFORMED_MESSAGE"


class UnknownVerb(TrinityError):
    code = "UNKNOWN_VERB"
