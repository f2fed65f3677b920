"""Exception hierarchy shared by all worldmesh modules."""

from __future__ import annotations


class WorldMeshError(Exception):
    """Base class for every error raised by this package."""


# geometry kernel
class InvalidPolygon(WorldMeshError, ValueError):
    pass


class InsetCollapse(WorldMeshError):
    pass


class NonManifoldInput(WorldMeshError):
    pass


class EmptyMesh(WorldMeshError):
    pass


# layout
class SchemaError(WorldMeshError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class InvariantError(WorldMeshError):
    def __init__(self, message: str, offending_ids: tuple[str, ...] = ()):
        super().__init__(message)
        self.offending_ids = offending_ids


class ExhaustedAttempts(WorldMeshError):
    def __init__(self, reports: list):
        super().__init__(f"no valid layout after {len(reports)} attempts")
        self.reports = reports


# structure
class OpeningOutsideWall(WorldMeshError):
    pass


# cameras
class NoFreeSpace(WorldMeshError):
    pass


class ZeroQuaternion(WorldMeshError, ValueError):
    pass


# rendering / texturing
class BadRange(WorldMeshError, ValueError):
    pass


class MissingObjectTexture(WorldMeshError):
    pass


class DimensionMismatch(WorldMeshError, ValueError):
    pass


class BehindCamera(WorldMeshError):
    pass


# objects
class DegenerateObb(WorldMeshError):
    pass


class NoSupportFound(WorldMeshError):
    pass


class NoWallFound(WorldMeshError):
    pass


class UnresolvableOverlap(WorldMeshError):
    pass


# verification / reconstruction
class AdapterFailure(WorldMeshError):
    pass


class NoValidDepthPixels(WorldMeshError):
    pass


# pipeline
class MissingPriorArtifact(WorldMeshError):
    pass


class VerificationExhausted(WorldMeshError):
    def __init__(self, camera_id: str, results: list):
        super().__init__(f"{camera_id}: all {len(results)} attempts failed verification")
        self.camera_id = camera_id
        self.results = results


class StageFailure(WorldMeshError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
