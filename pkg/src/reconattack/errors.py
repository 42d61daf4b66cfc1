"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateProbeError(InvalidInputError):
    """A finite-difference probe would make alpha_u <= alpha_l."""


class InitiallyMisclassifiedError(RuntimeError):
    """The attack target is already misclassified at the initial parameters."""


class ExternalModelError(RuntimeError):
    """An external scoring command failed or broke the output contract."""

    def __init__(self, message, raw_output=""):
        super().__init__(f"{message} (raw output: {raw_output!r})")
        self.raw_output = raw_output
