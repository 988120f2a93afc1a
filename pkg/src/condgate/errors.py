"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input value lies outside the mathematical domain of the operation."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class InfeasibleError(ValueError):
    """The label sequence cannot be aligned to the available timesteps."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the target model."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed, truncated, or fails its checksum."""
