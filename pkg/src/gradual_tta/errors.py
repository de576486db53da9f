"""
Exception types for the gradual-tta toolkit.

Library code raises these; only the CLI converts them into messages and exit codes.
"""


class ParameterError(ValueError):
    """Raised when an argument has an invalid value, shape, or structure."""

    pass


class ConfigurationError(ValueError):
    """Raised when a configuration is invalid or inconsistent with the selected method."""

    pass


class TrainingError(RuntimeError):
    """
    Raised when source or style-network pre-training diverges.

    Attributes:
        epoch: Epoch (or pre-training phase) in which the divergence happened
        step: Optimizer step within the epoch
        last_finite_loss: Last loss value that was still finite, if any
    """

    def __init__(
        self,
        message: str,
        epoch: int | None = None,
        step: int | None = None,
        last_finite_loss: float | None = None,
    ) -> None:
        details = []
        if epoch is not None:
            details.append(f"epoch={epoch}")
        if step is not None:
            details.append(f"step={step}")
        if last_finite_loss is not None:
            details.append(f"last_finite_loss={last_finite_loss:.6g}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.last_finite_loss = last_finite_loss


class UpdateRejectedError(RuntimeError):
    """Raised when an optimizer step is refused because of a non-finite loss or gradient."""

    pass


class EmptyMemoryError(LookupError):
    """Raised when sampling from a style memory that holds no entries."""

    pass
