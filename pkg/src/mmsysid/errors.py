"""Exception hierarchy.

The CLI maps :class:`DataError` to exit code 3 and :class:`NumericError` to
exit code 4; everything else derived from :class:`MmsysidError` is a usage or
configuration problem (exit code 2).
"""

from __future__ import annotations


class MmsysidError(Exception):
    pass


class InvalidParameterError(MmsysidError, ValueError):
    pass


class ConfigurationError(MmsysidError, ValueError):
    pass


class DataError(MmsysidError):
    pass


class FormatError(DataError):
    pass


class CorruptionError(DataError):
    pass


class SealedAccessError(DataError):
    """Raised when estimation code asks for the sealed ground truth."""


class EmptyMaskError(DataError):
    pass


class NumericError(MmsysidError):
    pass


class SingularDecompositionError(NumericError):
    pass


class InvertedElementError(NumericError):
    def __init__(self, particle: int, substep: int | None = None, det: float | None = None):
        self.particle = int(particle)
        self.substep = substep
        self.det = det
        msg = f"inverted element at particle {self.particle}"
        if substep is not None:
            msg += f", substep {substep}"
        if det is not None:
            msg += f" (det F = {det:.3e})"
        super().__init__(msg)


class NumericBlowupError(NumericError):
    def __init__(self, max_velocity: float, substep: int | None = None):
        self.max_velocity = float(max_velocity)
        self.substep = substep
        msg = f"non-finite grid state (max particle speed {self.max_velocity:.3e} m/s)"
        if substep is not None:
            msg += f" at substep {substep}"
        super().__init__(msg)


class UnderdeterminedError(MmsysidError, ValueError):
    pass


class DegenerateConfigurationError(MmsysidError, ValueError):
    pass


class BehindCameraError(MmsysidError, ValueError):
    pass
