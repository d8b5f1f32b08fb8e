"""Exception hierarchy shared by every crowdkiln module.

File-system failures surface as the built-in ``OSError``; everything here is a
domain error raised on malformed inputs or impossible requests.
"""


class CrowdkilnError(Exception):
    pass


class MalformedFile(CrowdkilnError):
    pass


class OutOfBoundsPoint(CrowdkilnError):
    def __init__(self, index: int, x: float, y: float, width: int, height: int):
        self.index = index
        self.x = x
        self.y = y
        super().__init__(
            f"point {index} at ({x!r}, {y!r}) lies outside a {width}x{height} image"
        )


class DegenerateProjection(CrowdkilnError):
    pass


class NonPositiveSigma(CrowdkilnError, ValueError):
    pass


class TooFewPoints(CrowdkilnError, ValueError):
    pass


class NoEffectiveRows(CrowdkilnError):
    pass


class DegenerateStats(CrowdkilnError):
    pass


class ProfileMismatch(CrowdkilnError, ValueError):
    pass


class IndivisibleDimensions(CrowdkilnError, ValueError):
    pass


class ShapeError(CrowdkilnError, ValueError):
    pass


class FormatMismatch(CrowdkilnError):
    pass


class MissingTargets(CrowdkilnError):
    pass


class EmptyRecords(CrowdkilnError, ValueError):
    pass
