"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MeshRagError(Exception):
    """Base class for all errors raised by meshrag."""


class EmptyGeometry(MeshRagError):
    pass


class DegenerateExtent(MeshRagError):
    pass


class SingularTransform(MeshRagError):
    pass


class BadCount(MeshRagError):
    pass


class NoNormals(MeshRagError):
    pass


class BackendFailure(MeshRagError):
    """A generator or segmenter backend failed to answer a request.

    ``key`` identifies the request (part id or prompt index) when known.
    """

    def __init__(self, message: str, key: int | None = None):
        super().__init__(message)
        self.key = key


class BackendUnavailable(BackendFailure):
    """The backend could not be reached at all (connection refused, timeout)."""


class UnknownPart(BackendFailure):
    pass


class EmptySegmentation(MeshRagError):
    pass


class NoCorrespondences(MeshRagError):
    pass


class PipelineEmpty(MeshRagError):
    def __init__(self, message: str, failures: dict[int, str] | None = None, unreachable: bool = False):
        super().__init__(message)
        self.failures = failures or {}
        self.unreachable = unreachable


class EmptyResidual(MeshRagError):
    pass
