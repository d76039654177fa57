"""Proximal smoothing of the lower-level objective and stationarity metrics.

For a proximal parameter ``gamma`` the smoothed value

    V(x, y) = min_t  G(x, t) + |t - y|^2 / (2 gamma)

never exceeds ``G(x, y)`` and is differentiable whenever the minimizer
``theta_star`` is unique, with

    grad V = ( grad_x G(x, theta_star),  (y - theta_star) / gamma ).

The penalized objective is ``psi_mu = mu F + G - V`` and its gradient
norm at the swarm averages, together with per-block consensus errors,
is the convergence measure recorded by the runner. These evaluations
are measurement oracles: the decentralized updates themselves never
call into this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InnerSolveError, InvalidParameterError
from .problems.base import BilevelProblem

__all__ = [
    "EnvelopeConfig",
    "StationarityRecord",
    "solve_theta_star",
    "moreau_value",
    "grad_moreau",
    "psi_value",
    "grad_psi",
    "swarm_metrics",
]


@dataclass(frozen=True)
class EnvelopeConfig:
    """Proximal parameter and inner-solve controls.

    The theory-backed range is ``0 < gamma < 1 / (2 L2)``, which makes
    the inner problem strongly convex with modulus ``1/gamma - L2``.
    Values outside the range are allowed (several experimental setups
    use them) but flagged by :meth:`range_warning`.
    """

    gamma: float
    inner_tol: float = 1e-10
    inner_max_iters: int = 10_000

    def __post_init__(self):
        if self.gamma <= 0:
            raise InvalidParameterError(f"gamma must be positive, got {self.gamma}")
        if self.inner_tol <= 0 or self.inner_max_iters < 1:
            raise InvalidParameterError("inner_tol must be > 0 and inner_max_iters >= 1")

    def range_warning(self, problem: BilevelProblem) -> str | None:
        limit = 1.0 / (2.0 * problem.L2)
        if self.gamma >= limit:
            return (
                f"gamma={self.gamma:g} outside theory-backed range (0, {limit:g}) "
                f"for L2={problem.L2:g}; smoothing may lose strong convexity"
            )
        return None


@dataclass(frozen=True)
class StationarityRecord:
    """Stationarity and consensus quantities at one iteration."""

    grad_psi_sq: float
    consensus_x: float
    consensus_y: float
    consensus_theta: float
    consensus_total: float
    mu: float


def _inner_grad(problem: BilevelProblem, x: np.ndarray, theta: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    _, gy = problem.grad_G(x, theta)
    return gy + (theta - y) / gamma


def solve_theta_star(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    cfg: EnvelopeConfig,
    theta0: np.ndarray | None = None,
) -> np.ndarray:
    """Minimize ``G(x, t) + |t - y|^2 / (2 gamma)`` over ``t``.

    Uses the instance's closed-form proximal map when available,
    otherwise gradient descent with step ``1 / (L2 + 1/gamma)``,
    warm-started from ``theta0``. Raises :class:`InnerSolveError` with
    the final residual if the iteration cap is hit.
    """
    closed = problem.prox_lower(x, y, cfg.gamma)
    if closed is not None:
        return closed
    theta = np.array(y if theta0 is None else theta0, dtype=float)
    step = 1.0 / (problem.L2 + 1.0 / cfg.gamma)
    residual = np.inf
    for _ in range(cfg.inner_max_iters):
        grad = _inner_grad(problem, x, theta, y, cfg.gamma)
        residual = float(np.linalg.norm(grad))
        if residual <= cfg.inner_tol:
            return theta
        theta -= step * grad
    raise InnerSolveError(
        f"proximal inner solve stalled at residual {residual:.3e} "
        f"after {cfg.inner_max_iters} iterations (tol {cfg.inner_tol:.1e})",
        residual=residual,
    )


def moreau_value(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    cfg: EnvelopeConfig,
    theta0: np.ndarray | None = None,
) -> float:
    theta = solve_theta_star(problem, x, y, cfg, theta0)
    return problem.G_value(x, theta) + float(np.sum((theta - y) ** 2)) / (2.0 * cfg.gamma)


def grad_moreau(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    cfg: EnvelopeConfig,
    theta0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Envelope gradient via the minimizer: no differentiation through theta_star."""
    theta = solve_theta_star(problem, x, y, cfg, theta0)
    gx, _ = problem.grad_G(x, theta)
    return gx, (y - theta) / cfg.gamma


def psi_value(problem: BilevelProblem, x: np.ndarray, y: np.ndarray, mu: float, cfg: EnvelopeConfig) -> float:
    if mu < 0:
        raise InvalidParameterError(f"mu must be nonnegative, got {mu}")
    return mu * problem.F_value(x, y) + problem.G_value(x, y) - moreau_value(problem, x, y, cfg)


def grad_psi(
    problem: BilevelProblem,
    x: np.ndarray,
    y: np.ndarray,
    mu: float,
    cfg: EnvelopeConfig,
    theta0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    if mu < 0:
        raise InvalidParameterError(f"mu must be nonnegative, got {mu}")
    vfx, vfy = grad_moreau(problem, x, y, cfg, theta0)
    ffx, ffy = problem.grad_F(x, y)
    gfx, gfy = problem.grad_G(x, y)
    return mu * ffx + gfx - vfx, mu * ffy + gfy - vfy


def consensus_energy(block: np.ndarray) -> float:
    """Average squared deviation from the swarm mean, one variable block."""
    mean = block.mean(axis=0)
    return float(np.mean(np.sum((block - mean) ** 2, axis=1)))


def swarm_metrics(problem: BilevelProblem, swarm, mu: float, cfg: EnvelopeConfig) -> StationarityRecord:
    """Stationarity at the agent averages plus per-block consensus errors.

    ``swarm`` is anything exposing stacked arrays ``x`` (n, dx), ``y``
    (n, dy), ``theta`` (n, dy).
    """
    x_bar = swarm.x.mean(axis=0)
    y_bar = swarm.y.mean(axis=0)
    gx, gy = grad_psi(problem, x_bar, y_bar, mu, cfg)
    cons_x = consensus_energy(swarm.x)
    cons_y = consensus_energy(swarm.y)
    cons_t = consensus_energy(swarm.theta)
    return StationarityRecord(
        grad_psi_sq=float(np.sum(gx**2) + np.sum(gy**2)),
        consensus_x=cons_x,
        consensus_y=cons_y,
        consensus_theta=cons_t,
        consensus_total=cons_x + cons_y + cons_t,
        mu=mu,
    )
