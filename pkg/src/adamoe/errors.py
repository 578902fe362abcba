"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shape or axis mismatch between tensors."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where finite math was required."""


class OracleError(RuntimeError):
    """A test oracle (e.g. finite differences) hit a non-finite intermediate."""


class RegistryError(ValueError):
    """Lookup of an unknown task or named resource."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or does not match the model."""
