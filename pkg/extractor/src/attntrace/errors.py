"""Error surface for the extraction pipeline."""


class AttntraceError(Exception):
    """Base class; everything raised on purpose derives from this."""


class InvalidConfig(AttntraceError):
    """An ExtractionConfig field violates its invariant."""


class ModelLoadError(AttntraceError):
    """The pipeline could not be loaded or lacks a component we need."""


class TokenizationOverflow(AttntraceError):
    """A prompt tokenizes to more positions than the model's context length."""


class NoMatchingLayers(AttntraceError):
    """No cross-attention layer resolves to the requested map resolution."""


class PromptFileError(AttntraceError):
    """The prompt list file is missing, empty, or malformed."""
