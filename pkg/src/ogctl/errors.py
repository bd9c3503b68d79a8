"""Exception types shared across the package."""


class OgctlError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OgctlError):
    """Array shape or dimension mismatch; the message names the offending field."""


class NotFiniteError(OgctlError):
    """A NaN or Inf reached a public boundary."""


class ContainerError(OgctlError):
    """Malformed container file: bad magic, unsupported version, truncation, bad payload."""


class ConfigError(OgctlError):
    """Invalid or inconsistent configuration / precondition."""


class ZeroNormError(OgctlError):
    """An operation that needs a nonzero-norm vector received a (near-)zero one."""
