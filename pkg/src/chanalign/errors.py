"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, numerical
failures exit 2, IO failures exit 3.
"""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; the message reports both."""


class ParameterError(ValueError):
    """A hyperparameter or operator argument is out of its legal range."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or unsupported."""


class ContractError(RuntimeError):
    """An API was called in a way its contract forbids."""


class HiddenLabelError(ContractError):
    """Task labels were requested for a sample whose labels are hidden."""


class DivergenceError(ArithmeticError):
    """A loss became non-finite during training."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
