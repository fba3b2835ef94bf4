"""Exception types shared across the package."""


class HalfSplatError(Exception):
    """Base class for all package errors."""


class CulledBehindCamera(HalfSplatError):
    """Primitive center is at or behind the near clipping plane."""


class DegenerateFrame(HalfSplatError):
    """Whitening transform of the ray-space covariance is numerically singular."""


class QuadratureNonConvergence(HalfSplatError):
    """Adaptive quadrature failed to reach tolerance within the refinement budget."""


class EmptyScene(HalfSplatError):
    """Scene contains no primitives."""


class ImageTooLarge(HalfSplatError):
    """Requested render target exceeds the supported pixel count."""


class MismatchedForward(HalfSplatError):
    """Backward-pass bookkeeping does not match the forward output."""


class ShapeMismatch(HalfSplatError):
    """Two images that must share a shape do not."""


class ImageTooSmall(HalfSplatError):
    """Image is smaller than the SSIM window."""


class NonFiniteLoss(HalfSplatError):
    """Training loss became NaN or infinite."""

    def __init__(self, iteration, value):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class MalformedHeader(HalfSplatError):
    """Point file header could not be parsed."""


class MissingProperty(HalfSplatError):
    """Point file header lacks a required property."""


class TruncatedPayload(HalfSplatError):
    """Point file body is shorter than the header promises."""


class UnsupportedCameraModel(HalfSplatError):
    """Camera model outside the supported pinhole whitelist."""


class ParseError(HalfSplatError):
    """Structured text input is invalid; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DecodeError(HalfSplatError):
    """Image file could not be decoded."""


class UnsupportedBitDepth(HalfSplatError):
    """Image bit depth other than 8 bits per channel."""


class EmptyPointCloud(HalfSplatError):
    """Point cloud used for initialization has no points."""
