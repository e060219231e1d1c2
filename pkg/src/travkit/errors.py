"""Exception types shared across the package."""


class TravkitError(Exception):
    """Base class for all package-specific errors."""


class InvalidConfigError(TravkitError):
    """Configuration value or combination is not usable."""


class InvalidInputError(TravkitError):
    """Operation received data violating its preconditions."""


class OutOfBoundsError(InvalidInputError):
    """A pose or point lies outside the world."""


class NoOverlapError(InvalidInputError):
    """Sensor streams share no common time interval."""


class TooShortError(InvalidInputError):
    """Tick table shorter than the requested frame window."""


class DegenerateVectorError(InvalidInputError):
    """Vector norm too small for a cosine computation."""


class DegenerateGeometryError(InvalidInputError):
    """Point set does not span a plane."""


class InternalConsistencyError(TravkitError):
    """An invariant that should hold by construction was violated."""


class InvalidEdgeError(InvalidInputError):
    """Edge cost requested between non-adjacent or unobserved cells."""


class MissingArtifactError(TravkitError):
    """A prerequisite run artifact is absent.

    `producer` names the subcommand that creates it.
    """

    def __init__(self, artifact: str, producer: str):
        super().__init__(f"missing artifact {artifact!r}: run '{producer}' first")
        self.artifact = artifact
        self.producer = producer
