"""Exception hierarchy shared by all modules."""


class SmileCalError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(SmileCalError, ValueError):
    """Non-finite, non-positive or otherwise malformed numeric input."""


class DegenerateVolatilityError(InvalidInputError):
    """Greeks requested at zero volatility."""


class ArbitrageBoundError(InvalidInputError):
    """Price outside the no-arbitrage interval of the option."""


class BelowLowerBoundError(ArbitrageBoundError):
    pass


class AboveUpperBoundError(ArbitrageBoundError):
    pass


class ConvergenceError(SmileCalError, RuntimeError):
    """An iterative solver did not reach its tolerance."""


class QuoteDroppedError(SmileCalError):
    """A quote cannot be used at all (missing ask, expired, ...)."""


class IncoherentAskError(QuoteDroppedError):
    """The ask lies outside the arbitrage bounds; the quote is rejected."""


class QuoteParseError(SmileCalError, ValueError):
    """Malformed line in a quote file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidPointError(InvalidInputError):
    """A market point whose mid is not strictly inside the arbitrage bounds."""


class InvalidParamsError(InvalidInputError):
    """SVI parameters violating the validity constraints."""


class UndefinedPointError(InvalidInputError):
    """Diagnostic evaluated where the total variance vanishes."""


class InsufficientDataError(SmileCalError, ValueError):
    """Too few usable quotes to calibrate a smile."""
