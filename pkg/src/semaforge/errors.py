"""Exception types shared across the package."""


class SemaforgeError(Exception):
    """Base class for all package errors."""


class DimensionError(SemaforgeError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(SemaforgeError, ValueError):
    """A documented precondition was violated by the caller."""


class GraphStateError(SemaforgeError, RuntimeError):
    """The autodiff tape is in the wrong state (e.g. backward called twice)."""


class LandmarkFormatError(SemaforgeError, ValueError):
    """A landmark file does not match the 81-line ``x y`` text format."""


class GeometryError(SemaforgeError, ValueError):
    """Degenerate geometry (e.g. all landmark points collinear)."""


class FragmentError(SemaforgeError, ValueError):
    """A fragment could not be produced (e.g. its mask is empty)."""
