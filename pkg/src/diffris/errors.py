"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shape violates an operation's contract."""


class ParameterError(ValueError):
    """Scalar argument outside its valid range (temperature, rank, schedule bounds)."""


class VocabularyError(ValueError):
    """Token id outside the encoder's vocabulary."""


class SequenceLengthError(ValueError):
    """Token sequence longer than the configured maximum."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value. Maps to CLI exit code 2."""


class FrozenContractError(RuntimeError):
    """A frozen backbone parameter changed; the message names the first differing tensor."""


class MetricInvariantError(RuntimeError):
    """An evaluation summary violated a metric bound or monotonicity law."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. Carries the offending batch's sample ids."""

    def __init__(self, message: str, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids) if batch_ids is not None else []
