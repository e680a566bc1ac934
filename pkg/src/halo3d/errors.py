"""Exception types shared across the package."""


class Halo3dError(Exception):
    """Base class for package-specific failures."""


class ShapeMismatchError(Halo3dError, ValueError):
    """Array shape incompatible with an operation's contract."""


class ContractError(Halo3dError, ValueError):
    """An operation precondition was violated (non-shape)."""


class EmptyGroupError(Halo3dError, ValueError):
    """A pooling group contained no valid members."""


class NumericsError(Halo3dError, ArithmeticError):
    """NaN or Inf appeared in a value that must stay finite."""


class ConfigError(Halo3dError, ValueError):
    """A config file or CLI argument combination is invalid."""


class ParseError(Halo3dError, ValueError):
    """A serialized document is malformed; message names the field."""


class GenerationError(Halo3dError, RuntimeError):
    """Scene generation could not satisfy placement constraints."""
