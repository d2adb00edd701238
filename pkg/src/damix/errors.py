"""Exception taxonomy shared across the package."""


class DamixError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DamixError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(DamixError):
    """Invalid numeric operation (division by zero, empty reduction, ...)."""


class ConfigError(DamixError):
    """A configuration value is out of range or a config file is malformed."""


class SerializationError(DamixError):
    """A tensor or checkpoint file is malformed or truncated."""


class DomainLookupError(DamixError):
    """A domain id has no registered branch / agent."""


class DegenerateBatchError(DamixError):
    """A training batch cannot yield meaningful statistics (single-sample domain group)."""


class DegenerateWeightsError(DamixError):
    """Combination weights cannot be normalized (logit sum is exactly zero)."""


class StateError(DamixError):
    """Stateful component used before it was populated (e.g. empty agent registry)."""


class SamplerContractError(DamixError):
    """A batch violates the sampler's guarantees (identity with too few samples, no negatives)."""


class SamplingError(DamixError):
    """A dataset cannot satisfy the batch plan (too few identities)."""


class UndefinedLossError(DamixError):
    """A loss has no unmasked samples to average over."""


class CompositionError(DamixError):
    """A stage loss is missing a required component or carries a forbidden one."""


class EvaluationError(DamixError):
    """Retrieval / diagnostic evaluation preconditions violated."""


class TrainingAborted(DamixError):
    """Training hit a non-finite loss or gradient and stopped."""


class ReportError(DamixError):
    """Report emission failed (missing metric files, malformed manifest)."""
