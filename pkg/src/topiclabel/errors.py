"""Exception hierarchy shared across the harness."""


class TopicLabelError(Exception):
    """Base class for all harness errors."""


class ValidationError(TopicLabelError):
    """Bad input: malformed files, invalid config, violated invariants."""


class ConfigMismatch(ValidationError):
    pass


class EmptyLabelError(ValidationError):
    """A completion or label reduced to nothing after parsing/normalizing."""


class GatewayError(TopicLabelError):
    """Completion backend failure."""


class AuthError(GatewayError):
    pass


class RetriesExhausted(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class ProviderError(TopicLabelError):
    """Embedding provider unreachable or returned garbage."""
