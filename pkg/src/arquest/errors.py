"""Exception types shared across the package."""


class ArquestError(Exception):
    """Base class for all errors raised by this package."""


# -- loading / validation -------------------------------------------------

class ParseError(ArquestError):
    """A document could not be parsed at all (bad JSON, bad CSV, ...)."""


class ValidationError(ArquestError):
    """A parsed document violates a structural invariant."""


class SchemaError(ArquestError):
    """An external-source payload does not match its kind's schema."""


class ConfigError(ArquestError):
    """A configuration document is invalid."""


# -- lookups ---------------------------------------------------------------

class UnknownFactor(ArquestError):
    """A factor id does not exist in the knowledge base (or given set)."""


class UnknownIndicator(ArquestError):
    """An indicator id does not exist in the indicator definitions."""


class UnknownMunicipality(ArquestError):
    """A municipality is not present in the indicator table."""


class MissingFactor(ArquestError):
    """A ground-truth answer map does not cover every factor."""


# -- numerics --------------------------------------------------------------

class EmptyInput(ArquestError):
    """An operation received an empty collection it cannot work on."""


class LengthMismatch(ArquestError):
    """Two paired vectors differ in length."""


class DegenerateInput(ArquestError):
    """Input is degenerate for the requested statistic (e.g. zero variance)."""


# -- model gateway ---------------------------------------------------------

class EndpointError(ArquestError):
    """The chat-completion endpoint failed after all retries."""


class ProviderError(ArquestError):
    """The remote embedding provider failed after all retries."""


class MalformedReply(ArquestError):
    """A model reply could not be interpreted (no JSON, bad action, ...)."""


# -- session state machine ---------------------------------------------------

class InvalidProfile(ArquestError):
    """An applicant profile violates its invariants."""


class StateError(ArquestError):
    """An operation was attempted in the wrong session state."""


class OutOfTurn(ArquestError):
    """An answer was submitted for a factor that is not the pending question."""


class InvalidChoice(ArquestError):
    """A choice index is out of range for its factor."""


# -- synthetic cohort --------------------------------------------------------

class PoolExhausted(ArquestError):
    """A fixture pool has no entry matching the requested band."""


# -- persistence -------------------------------------------------------------

class CorruptLog(ArquestError):
    """A session event log has a sequence gap and cannot be trusted."""
