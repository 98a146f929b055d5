"""Overlap — Exception hierarchy."""

from typing import Any, Optional


class OverlapError(Exception):
    """Base class; `code` is the machine-readable name used by the CLI."""

    code = "overlap_error"


class ConfigError(OverlapError, ValueError):
    code = "config_error"


class DegenerateConfigurationError(OverlapError, ValueError):
    code = "degenerate_configuration"


class DatabaseOrderError(OverlapError, ValueError):
    code = "database_order"


class VocabularyError(OverlapError, ValueError):
    code = "vocabulary_error"


class FormatError(OverlapError, ValueError):
    code = "format_error"


class ProtocolError(FormatError):
    code = "protocol_error"


class ChannelClosedError(OverlapError, ConnectionError):
    code = "channel_closed"


class PeerSessionError(OverlapError):
    """A peer session ended abnormally; `log` holds the rounds completed so far."""

    code = "peer_session"

    def __init__(self, message: str, log: Optional[Any] = None):
        super().__init__(message)
        self.log = log


class ClassificationError(OverlapError, ValueError):
    code = "classification_error"


class AnnotationError(OverlapError, ValueError):
    code = "annotation_error"


class SceneError(OverlapError, ValueError):
    code = "scene_error"
