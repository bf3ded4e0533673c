"""Exception hierarchy shared across the package."""


class TopoAlignError(Exception):
    """Base class for all package errors."""


class LexiconError(TopoAlignError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OutOfVocabularyError(LexiconError):
    def __init__(self, word):
        self.word = word
        super().__init__(f"out-of-vocabulary word {word!r}")


class TopologyError(TopoAlignError):
    """Raised when an operation is applied to a path or FSA of the wrong topology."""


class NoValidPathError(TopoAlignError):
    """No alignment path of the requested length exists in the FSA."""


class FormatError(TopoAlignError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ArpaError(FormatError):
    pass


class OverPrunedError(TopoAlignError):
    """Every hypothesis was pruned before the end of the utterance."""
