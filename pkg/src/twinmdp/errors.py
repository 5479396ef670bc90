"""Exception types raised across the library.

Each subsystem raises a dedicated class so callers can distinguish bad
input data from bad configuration without parsing messages.
"""


class TwinMdpError(Exception):
    """Base class for all library errors."""


# --- trajectory corpus ------------------------------------------------------

class CorpusError(TwinMdpError):
    """A trajectory record failed validation.

    ``line`` is the 1-based line number in the corpus file, or None when the
    object was constructed directly.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MalformedRecord(CorpusError):
    pass


class ScoreOutOfRange(CorpusError):
    pass


class ChosenEntityNotInCandidates(CorpusError):
    pass


class NonMonotoneTurnIndex(CorpusError):
    pass


class IoFailure(TwinMdpError):
    pass


# --- topology ---------------------------------------------------------------

class UnknownEntity(TwinMdpError):
    pass


class EmptyGraphNoEdges(TwinMdpError):
    pass


# --- abstraction / hmm ------------------------------------------------------

class EntityNotInVocabulary(TwinMdpError):
    pass


class EntityNotInGraph(TwinMdpError):
    pass


class DimensionMismatch(TwinMdpError):
    pass


class DegenerateData(TwinMdpError):
    pass


class SchemeMismatch(TwinMdpError):
    pass


# --- reward learning --------------------------------------------------------

class EmptyPairSet(TwinMdpError):
    pass


# --- offline RL / evaluation ------------------------------------------------

class EmptyData(TwinMdpError):
    pass


class MissingCandidateSets(TwinMdpError):
    pass


class NoCandidates(TwinMdpError):
    pass


# --- context interventions --------------------------------------------------

class EmptyCandidates(TwinMdpError):
    pass


# --- simulator --------------------------------------------------------------

class InfeasibleConfig(TwinMdpError):
    pass


# --- statistics -------------------------------------------------------------

class TooFewTrials(TwinMdpError):
    pass


class LengthMismatch(TwinMdpError):
    pass


class UnsupportedK(TwinMdpError):
    pass


class BadRanks(TwinMdpError):
    pass


# --- pipeline ---------------------------------------------------------------

class MissingArtifact(TwinMdpError):
    pass


class ConfigInvalid(TwinMdpError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


class StageFailed(TwinMdpError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
