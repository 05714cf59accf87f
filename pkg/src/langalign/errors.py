"""Exception types raised by the library.

Every error deliberately carries enough context to name the offending
input; silent coercion (e.g. mapping a zero-norm vector to similarity 0)
is never performed because it would corrupt contrastive losses invisibly.
"""


class LangAlignError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(LangAlignError):
    pass


class ZeroNormVector(LangAlignError):
    pass


class EmptyInput(LangAlignError):
    pass


class NonFiniteEvaluation(LangAlignError):
    pass


class EmptyList(LangAlignError):
    pass


class ShapeMismatch(LangAlignError):
    pass


class LabelOutOfRange(LangAlignError):
    pass


class MissingPairing(LangAlignError):
    pass


class NoPositiveAvailable(LangAlignError):
    def __init__(self, label, message=None):
        self.label = label
        super().__init__(message or f"no same-label source instance for class {label}")


class InvalidSpec(LangAlignError):
    pass


class InsufficientInstances(LangAlignError):
    def __init__(self, label, message=None):
        self.label = label
        super().__init__(message or f"not enough instances of class {label}")


class MissingParallelTwin(LangAlignError):
    pass


class EmptyClass(LangAlignError):
    def __init__(self, label, message=None):
        self.label = label
        super().__init__(message or f"class {label} has no members")


class MethodEpisodeMismatch(LangAlignError):
    pass


class EmptyCorpus(LangAlignError):
    pass


class LayerOutOfRange(LangAlignError):
    pass


class ConfigError(LangAlignError):
    """Invalid or unknown keys in an experiment/config file."""
