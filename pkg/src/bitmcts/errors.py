"""Exception hierarchy. ``exit_code`` maps each family onto the CLI's exit codes."""


class BitMCTSError(Exception):
    exit_code = 1


class ConfigError(BitMCTSError):
    exit_code = 2


class ProviderError(BitMCTSError):
    """A provider call failed. Retryable at the call site unless stated otherwise."""

    exit_code = 3


class TransportError(ProviderError):
    pass


class ProviderParseError(ProviderError):
    pass


class BudgetExhausted(ProviderError):
    pass


class CacheMissError(ProviderError):
    """Offline mode asked for a response the cache does not hold."""

    exit_code = 4


class InvariantViolation(BitMCTSError):
    exit_code = 5


class ContractViolation(InvariantViolation):
    """A caller broke an operation's precondition."""


class EmptyTableError(BitMCTSError):
    pass
