"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not fit together."""

    def __init__(self, op, expected, got):
        self.op = op
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: expected {expected}, got {got}")


class ConfigError(ValueError):
    """A configuration value is out of its valid range."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar root, consumed graph, frozen update)."""


class InputError(ValueError):
    """Malformed input data (frames, clips, files)."""


class StorageError(InputError):
    """A stored artifact cannot be read or decoded."""


class IntegrityError(StorageError):
    """A stored file does not match the content hash recorded in its manifest."""


class CompatibilityError(ValueError):
    """Two artifacts (checkpoint, dataset, config) disagree on model dimensions."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
