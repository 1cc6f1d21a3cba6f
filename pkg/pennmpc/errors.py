"""Exception hierarchy shared by every penn-mpc module."""

from __future__ import annotations


class PennMpcError(Exception):
    """Base class for all errors raised by penn-mpc."""


class ConfigError(PennMpcError, ValueError):
    """Invalid, unknown or unresolvable configuration."""


class ShapeError(PennMpcError, ValueError):
    """Array dimensions do not match the declared layout."""


class TrainingError(PennMpcError):
    """Training diverged or cannot proceed."""


class ModelError(PennMpcError):
    """A model produced unusable output or was used outside its mode."""


class CheckpointError(PennMpcError):
    """A checkpoint file is corrupt, truncated or of an unsupported version."""


class DatasetError(PennMpcError):
    """Dataset content cannot be parsed or is unusable."""


class SchemaError(DatasetError):
    """A CSV or manifest does not have the expected columns/fields."""


class GeometryError(PennMpcError):
    """A track specification does not describe a closed loop."""


class OffTrackError(PennMpcError):
    """A pose is too far from the track centerline to be projected."""


class ControlError(PennMpcError):
    """The controller could not produce an update (e.g. every rollout invalid)."""
