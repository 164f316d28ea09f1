"""Typed errors raised across the toolkit.

Everything derives from :class:`RcfuseError` so callers (and the CLI) can
catch one base class. :class:`InvariantViolation` marks construction bugs
rather than bad input; the CLI maps it to exit code 3.
"""


class RcfuseError(Exception):
    """Base class for all toolkit errors."""


class InvariantViolation(RcfuseError):
    """An internal invariant was broken (not a user-input problem)."""


# geometry
class NonPositiveDepth(RcfuseError, ValueError):
    pass


# surface fitting
class EmptyMask(RcfuseError, ValueError):
    pass


class EmptyReferenceSet(RcfuseError, ValueError):
    pass


# pillars / lift-splat
class DimensionMismatch(RcfuseError, ValueError):
    pass


class DuplicatePillarCoord(InvariantViolation):
    pass


class DepthOutOfRange(RcfuseError, ValueError):
    pass


# box codec / losses
class NonPositiveDimension(RcfuseError, ValueError):
    pass


class NoPositives(RcfuseError, ValueError):
    pass


# synthetic scenes
class DegenerateSpec(RcfuseError, ValueError):
    pass


class MaskTooSmall(RcfuseError, ValueError):
    pass


# storage
class StorageError(RcfuseError):
    pass


class BadMagic(StorageError):
    pass


class TruncatedPayload(StorageError):
    pass


class UnknownSchema(StorageError):
    pass


class ParseError(StorageError):
    pass


class NonRigidRotation(StorageError):
    pass


class UnsupportedDepth(StorageError):
    pass


class ShapeMismatch(StorageError):
    pass


class InvalidSpec(RcfuseError, ValueError):
    """A scene or pipeline spec is malformed; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
