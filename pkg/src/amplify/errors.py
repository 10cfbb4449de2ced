class ConfigError(ValueError):
    """Invalid configuration; CLI exit code 2."""

    exit_code = 2


class DataError(ValueError):
    """Malformed corpus or dataset parameters; CLI exit code 3."""

    exit_code = 3


class DivergenceError(FloatingPointError):
    """Non-finite training loss; CLI exit code 4."""

    exit_code = 4

    def __init__(self, step: int, lam, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step} (lambda_max={lam!r})")
        self.step = step
        self.lam = lam
        self.loss = loss
