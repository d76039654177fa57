"""Per-agent bilevel objectives and stochastic gradient oracles.

A problem bundles ``n_agents`` pairs of smooth objectives ``f_i`` (upper)
and ``g_i`` (lower) over variables ``x`` (dimension ``dx``) and ``y``
(dimension ``dy``), together with smoothness constants ``L1``/``L2``
valid for all agents. Network-level objectives are agent means:
``F = mean_i f_i`` and ``G = mean_i g_i``.

Stochastic oracles are pure functions of a :class:`~dsbosim.seeding.DrawKey`:
the additive-Gaussian model perturbs the exact gradient with a zero-mean
vector whose total variance is at most ``delta**2``, and the mini-batch
model averages the gradient over indices drawn from the agent's dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError, InvalidParameterError
from ..seeding import DrawKey

__all__ = ["NoiseModel", "BilevelProblem", "sample_grad_f", "sample_grad_g", "measure_dissimilarity"]


@dataclass(frozen=True)
class NoiseModel:
    """Stochastic oracle configuration.

    ``delta_f``/``delta_g`` bound the root of the total gradient-vector
    variance for the additive Gaussian model; ``batch_size`` applies to
    the mini-batch model only.
    """

    kind: str = "additive_gaussian"
    delta_f: float = 0.0
    delta_g: float = 0.0
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in ("additive_gaussian", "minibatch"):
            raise InvalidParameterError(f"unknown noise kind {self.kind!r}")
        if self.delta_f < 0 or self.delta_g < 0:
            raise InvalidParameterError("noise levels must be nonnegative")
        if self.batch_size < 1:
            raise InvalidParameterError("batch size must be >= 1")


class BilevelProblem:
    """Base class for per-agent bilevel problem instances.

    Subclasses set ``n_agents``, ``dx``, ``dy``, ``L1``, ``L2``,
    ``F_lower_bound`` and implement the per-agent value/gradient oracles.
    All oracles are pure and safe to call concurrently.
    """

    n_agents: int
    dx: int
    dy: int
    L1: float
    L2: float
    F_lower_bound: float = 0.0
    name: str = "bilevel"

    # per-agent oracles -------------------------------------------------

    def f_value(self, agent: int, x: np.ndarray, y: np.ndarray) -> float:
        raise NotImplementedError

    def g_value(self, agent: int, x: np.ndarray, y: np.ndarray) -> float:
        raise NotImplementedError

    def grad_f(self, agent: int, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def grad_g(self, agent: int, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    # network means ------------------------------------------------------

    def F_value(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean([self.f_value(i, x, y) for i in range(self.n_agents)]))

    def G_value(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean([self.g_value(i, x, y) for i in range(self.n_agents)]))

    def grad_F(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gx = np.zeros(self.dx)
        gy = np.zeros(self.dy)
        for i in range(self.n_agents):
            gxi, gyi = self.grad_f(i, x, y)
            gx += gxi
            gy += gyi
        return gx / self.n_agents, gy / self.n_agents

    def grad_G(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gx = np.zeros(self.dx)
        gy = np.zeros(self.dy)
        for i in range(self.n_agents):
            gxi, gyi = self.grad_g(i, x, y)
            gx += gxi
            gy += gyi
        return gx / self.n_agents, gy / self.n_agents

    # optional fast paths -------------------------------------------------

    def prox_lower(self, x: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray | None:
        """Closed-form minimizer of ``G(x, t) + |t - y|^2 / (2 gamma)``, if known."""
        return None

    def grad_f_all(self, X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stacked per-agent upper gradients; row i evaluates agent i at (X[i], Y[i])."""
        out = [self.grad_f(i, X[i], Y[i]) for i in range(self.n_agents)]
        return np.stack([gx for gx, _ in out]), np.stack([gy for _, gy in out])

    def grad_g_all(self, X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = [self.grad_g(i, X[i], Y[i]) for i in range(self.n_agents)]
        return np.stack([gx for gx, _ in out]), np.stack([gy for _, gy in out])

    def batch_grad_f(self, agent, x, y, indices):
        """Mini-batch upper gradient; only for instances with datasets."""
        raise InvalidInputError(f"{self.name} has no sampling distribution for f")

    def batch_grad_g(self, agent, x, y, indices):
        raise InvalidInputError(f"{self.name} has no sampling distribution for g")

    def batch_indices(self, agent: int, which: str, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        raise InvalidInputError(f"{self.name} has no datasets to sample from")

    def check_agent(self, agent: int) -> None:
        if not 0 <= agent < self.n_agents:
            raise InvalidInputError(f"agent index {agent} out of range [0, {self.n_agents})")

    def check_dims(self, x: np.ndarray, y: np.ndarray) -> None:
        if x.shape != (self.dx,) or y.shape != (self.dy,):
            raise InvalidInputError(
                f"expected shapes ({self.dx},) and ({self.dy},), got {x.shape} and {y.shape}"
            )


def _gaussian_perturbation(rng: np.random.Generator, delta: float, dim: int) -> np.ndarray:
    # total vector variance delta**2, split evenly across coordinates
    return rng.standard_normal(dim) * (delta / np.sqrt(dim))


def sample_grad_f(
    problem: BilevelProblem,
    agent: int,
    x: np.ndarray,
    y: np.ndarray,
    noise: NoiseModel,
    draw_key: DrawKey,
) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased stochastic estimate of the upper gradient of agent ``agent``.

    Deterministic given ``draw_key``; with ``delta_f == 0`` (additive
    model) it equals the exact gradient bit for bit.
    """
    problem.check_agent(agent)
    problem.check_dims(x, y)
    if noise.kind == "minibatch":
        rng = draw_key.generator()
        idx = problem.batch_indices(agent, "val", noise.batch_size, rng)
        return problem.batch_grad_f(agent, x, y, idx)
    gx, gy = problem.grad_f(agent, x, y)
    if noise.delta_f == 0.0:
        return gx, gy
    eps = _gaussian_perturbation(draw_key.generator(), noise.delta_f, problem.dx + problem.dy)
    return gx + eps[: problem.dx], gy + eps[problem.dx :]


def sample_grad_g(
    problem: BilevelProblem,
    agent: int,
    x: np.ndarray,
    y: np.ndarray,
    noise: NoiseModel,
    draw_key: DrawKey,
) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased stochastic estimate of the lower gradient of agent ``agent``."""
    problem.check_agent(agent)
    problem.check_dims(x, y)
    if noise.kind == "minibatch":
        rng = draw_key.generator()
        idx = problem.batch_indices(agent, "train", noise.batch_size, rng)
        return problem.batch_grad_g(agent, x, y, idx)
    gx, gy = problem.grad_g(agent, x, y)
    if noise.delta_g == 0.0:
        return gx, gy
    eps = _gaussian_perturbation(draw_key.generator(), noise.delta_g, problem.dx + problem.dy)
    return gx + eps[: problem.dx], gy + eps[problem.dx :]


def measure_dissimilarity(problem: BilevelProblem, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Gradient-heterogeneity energies at one point.

    Returns ``(1/n) sum_i |grad f_i - grad F|^2`` and the analogous
    quantity for ``g``, with gradients taken over the stacked ``(x, y)``
    blocks.
    """
    problem.check_dims(x, y)
    n = problem.n_agents
    fs = [np.concatenate(problem.grad_f(i, x, y)) for i in range(n)]
    gs = [np.concatenate(problem.grad_g(i, x, y)) for i in range(n)]
    f_mean = np.mean(fs, axis=0)
    g_mean = np.mean(gs, axis=0)
    sigma_f_sq = float(np.mean([np.sum((v - f_mean) ** 2) for v in fs]))
    sigma_g_sq = float(np.mean([np.sum((v - g_mean) ** 2) for v in gs]))
    return sigma_f_sq, sigma_g_sq
