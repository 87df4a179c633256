"""Exception hierarchy shared by all lfcal modules.

``InputError`` subclasses map to CLI exit code 2, ``AlgorithmError``
subclasses to exit code 3.
"""


class LfcalError(Exception):
    """Base class for every error raised by lfcal."""


class InputError(LfcalError):
    """Malformed or inconsistent input data."""


class AlgorithmError(LfcalError):
    """A numerical procedure could not produce a valid result."""


class ParseError(InputError):
    pass


class EmptyInput(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class FrameMismatch(InputError):
    pass


class InsufficientFrames(AlgorithmError):
    pass


class InsufficientPoints(InputError):
    pass


class InsufficientMatches(InputError):
    pass


class InsufficientTracks(InputError):
    pass


class NotARotation(InputError):
    pass


class DegenerateGrid(InputError):
    pass


class PatternNotVisible(InputError):
    def __init__(self, placement_index: int, message: str = ""):
        self.placement_index = placement_index
        super().__init__(message or f"pattern placement {placement_index} is not fully visible in every view")


class EmptyFrustum(InputError):
    pass


class NoConvergence(AlgorithmError):
    pass


class DegenerateDepth(AlgorithmError):
    pass


class DegenerateGeometry(AlgorithmError):
    pass


class DegenerateConfiguration(AlgorithmError):
    pass


class DegenerateOrientations(AlgorithmError):
    pass


class NoConsensus(AlgorithmError):
    pass


class EmptyChain(AlgorithmError):
    pass


class AllTracksFiltered(AlgorithmError):
    pass


class GaugeDrift(AlgorithmError):
    pass
