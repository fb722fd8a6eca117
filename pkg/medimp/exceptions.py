"""Error types raised by medimp.

Every expected failure derives from ``MedimpError``; the command-line entry
point maps it to ``exit_code`` and anything else to a generic failure.
"""


class MedimpError(Exception):
    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ShapeError(MedimpError, ValueError):
    """Tensor extents incompatible with an operation."""


class ConfigError(MedimpError, ValueError):
    """Invalid or inconsistent run configuration."""


class PromptError(MedimpError, ValueError):
    """Prompt rendering or generation failed."""


class CategorizationError(PromptError):
    """A clinical value fell outside every bin of its rule."""


class LeakageError(PromptError):
    """A raw clinical numeral leaked into prompt text."""


class VolumeError(MedimpError, ValueError):
    """Volume state or file does not fit the requested operation."""


class CheckpointError(MedimpError):
    """Checkpoint file is missing, corrupted or from another format version."""


class CohortError(MedimpError, ValueError):
    """Cohort generation or lookup failed."""


class EvaluationError(MedimpError):
    """Downstream evaluation cannot be computed."""


class MetricError(MedimpError, ValueError):
    """Metric inputs are inconsistent."""
