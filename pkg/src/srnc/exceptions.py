"""Exception types shared across the package.

Each error carries the name of the module that raised it so the CLI can
report provenance and map the failure to a stable exit code.
"""


class SRNCError(Exception):
    module = "srnc"

    def __init__(self, message, *, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module


class GraphFormatError(SRNCError, ValueError):
    """Malformed or inconsistent on-disk graph data."""

    module = "graphstore"


class DivergenceError(SRNCError, FloatingPointError):
    """A loss or gradient became non-finite during training."""

    module = "trainer"


class ConfigError(SRNCError, ValueError):
    module = "cli"
