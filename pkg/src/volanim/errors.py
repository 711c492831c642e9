"""Exception types shared across the toolkit."""


class VolanimError(Exception):
    """Base class for all toolkit errors."""


class MeshValidationError(VolanimError):
    """Mesh violates a structural invariant (bad indices, degenerate faces, ...)."""


class MeshFormatError(VolanimError):
    """A mesh or sidecar file could not be parsed."""


class ModelValidationError(VolanimError):
    """A skinned model violates an invariant (weights, skeleton, bounds)."""


class RegistrationError(VolanimError):
    """Non-rigid registration could not be set up or run."""


class FitError(VolanimError):
    """Body-model fitting failed (e.g. initialization too far from the frame)."""


class ConfigError(VolanimError):
    """Pipeline configuration is invalid or references missing files."""
