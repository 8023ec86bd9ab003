"""Shared exception types.

Validation-class errors (bad config, bad file, bad labels) are distinct from
runtime-class errors (non-invertible model, diverged training) so the CLI can
map them to different exit codes.
"""


class FacflowError(Exception):
    """Base class for all library errors."""


class ValidationError(FacflowError):
    """Invalid configuration, arguments, or labels; raised before any work."""


class DataFormatError(ValidationError):
    """Malformed dataset / codes / checkpoint file."""


class NonInvertibleError(FacflowError):
    """A flow evaluation produced non-finite values or a singular Jacobian.

    ``layer_index`` identifies the offending layer in generative order, or is
    None when the problem is not attributable to a single layer.
    """

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class TrainingDivergedError(FacflowError):
    """Training loss became non-finite; the model keeps its last good state."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []
