"""Exception hierarchy. Every domain failure derives from TrialForgeError."""


class TrialForgeError(Exception):
    """Base class for domain failures (CLI exit code 1)."""

    kind = "domain"


class VolumeError(TrialForgeError):
    kind = "volume"


class PhantomError(TrialForgeError):
    kind = "phantom"


class PlacementError(PhantomError):
    kind = "placement"


class ProfileError(TrialForgeError):
    kind = "profile"


class SpecError(TrialForgeError):
    kind = "spec"


class BuildError(TrialForgeError):
    kind = "build"


class InsertionError(TrialForgeError):
    kind = "insertion"


class RenderError(TrialForgeError):
    kind = "render"


class MetricError(TrialForgeError):
    kind = "metric"


class StatsError(TrialForgeError):
    kind = "stats"
