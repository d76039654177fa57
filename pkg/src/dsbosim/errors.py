"""Exception types raised across the simulator."""

from __future__ import annotations


class DsboError(Exception):
    """Base class for all simulator errors."""


class InvalidTopologyError(DsboError):
    """Topology parameters cannot produce a valid communication graph."""


class InvalidParameterError(DsboError):
    """A numeric parameter is outside its admissible range."""


class TopologyGenerationError(DsboError):
    """Random topology generation failed to produce a connected graph."""


class InvalidMatrixError(DsboError):
    """A matrix violates a structural precondition (e.g. symmetry)."""


class InvalidInputError(DsboError):
    """Dimension or shape mismatch between inputs."""


class DegenerateInstanceError(DsboError):
    """A problem instance has no well-defined reference solution."""


class InnerSolveError(DsboError):
    """The proximal inner solve did not reach its tolerance.

    Carries the final gradient-norm residual so callers can decide
    whether to retry, loosen, or record a gap.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class MissingReevalError(DsboError):
    """A recursive estimator update needs a re-evaluated raw direction."""


class ConfigError(DsboError):
    """A run configuration is malformed or inconsistent."""
