"""Exception types raised across the package."""


class SpireError(Exception):
    pass


class UnreachablePrecondition(SpireError):
    """No symbolic plan exists from the current state."""


class InvalidHandoffState(SpireError):
    """The state handed back by a learned section is not in the expected effect set."""


class PreconditionViolation(SpireError):
    pass


class DomainTooLarge(SpireError):
    pass


class StepAfterDone(SpireError):
    pass


class UnknownDomain(SpireError):
    pass


class OutOfCompetence(SpireError):
    """The scripted expert was queried outside the region it can handle."""


class ExpertIncompetent(SpireError):
    pass


class EmptyDataset(SpireError):
    pass


class ArchitectureMismatch(SpireError):
    pass


class ConfigError(SpireError):
    """Unknown or malformed configuration key."""
