"""Exception hierarchy shared by every module in the package."""


class BeliefMetaError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(BeliefMetaError, ValueError):
    pass


class UnsupportedOpError(BeliefMetaError, ValueError):
    pass


class NonFiniteError(BeliefMetaError, FloatingPointError):
    pass


class NonScalarOutputError(BeliefMetaError, ValueError):
    pass


class NodeNotInGraphError(BeliefMetaError, ValueError):
    pass


class EvidenceError(BeliefMetaError, ValueError):
    """Negative, empty or otherwise malformed evidence / label input."""


class SamplingError(BeliefMetaError, ValueError):
    pass


class DatasetParseError(BeliefMetaError, ValueError):
    pass


class LabelError(BeliefMetaError, RuntimeError):
    """Query-set label access or reveal violates the labeling protocol."""


class ConfigError(BeliefMetaError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(BeliefMetaError, ValueError):
    pass
