"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand extents are incompatible with an operation."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """A network, dataset or training configuration is invalid."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced where finite values are required."""


class ParseError(ValueError):
    """A file could not be decoded.

    ``kind`` is a short machine-readable tag such as ``"bad magic"`` or
    ``"truncated"``.
    """

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        msg = kind if not detail else f"{kind}: {detail}"
        super().__init__(msg)
