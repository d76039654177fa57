"""Per-agent descent directions, schedules, and gradient estimators.

The three update directions of agent ``i`` at penalty weight ``mu`` and
proximal parameter ``gamma`` are

    d_theta = grad_y g_i(x, theta) + (theta - y) / gamma
    d_x     = mu grad_x f_i(x, y) + grad_x g_i(x, y) - grad_x g_i(x, theta)
    d_y     = mu grad_y f_i(x, y) + grad_y g_i(x, y) - (y - theta) / gamma

Their stochastic counterparts draw one lower-level sample per call and
reuse it across every appearance of ``grad g_i``, so the two ``grad_x g``
terms in ``d_x`` carry identical perturbations and cancel exactly when
``theta == y``. Estimator wrappers (moving average, recursive
variance-corrected) smooth the raw stochastic directions per agent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, MissingReevalError
from .problems.base import BilevelProblem, NoiseModel
from .seeding import DrawKey, Stream, derive_draw_key

__all__ = [
    "DirectionTriple",
    "DirectionBatch",
    "Schedules",
    "EstimatorState",
    "deterministic_directions",
    "stochastic_directions",
    "swarm_stochastic_directions",
    "apply_estimator",
]


@dataclass(frozen=True)
class DirectionTriple:
    """One agent's update directions for (theta, x, y)."""

    d_theta: np.ndarray
    d_x: np.ndarray
    d_y: np.ndarray

    def __post_init__(self):
        for name, v in (("d_theta", self.d_theta), ("d_x", self.d_x), ("d_y", self.d_y)):
            if not np.isfinite(v).all():
                raise InvalidInputError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class DirectionBatch:
    """Stacked directions for the whole swarm (row i = agent i)."""

    d_theta: np.ndarray
    d_x: np.ndarray
    d_y: np.ndarray

    @classmethod
    def from_triples(cls, triples: list[DirectionTriple]) -> "DirectionBatch":
        return cls(
            d_theta=np.stack([t.d_theta for t in triples]),
            d_x=np.stack([t.d_x for t in triples]),
            d_y=np.stack([t.d_y for t in triples]),
        )

    def agent(self, i: int) -> DirectionTriple:
        return DirectionTriple(self.d_theta[i], self.d_x[i], self.d_y[i])


@dataclass(frozen=True)
class Schedules:
    """Penalty decay ``mu_k = mu0 (k+1)^(-p)`` and the step-size rule.

    Without overrides the steps follow the horizon rule
    ``lambda_theta = c_theta sqrt(n) / sqrt(K)`` with
    ``lambda_x = lambda_y = c_lambda * lambda_theta``, constant in ``k``.
    ``override_steps`` replaces all three with fixed values
    ``(lambda_theta, lambda_x, lambda_y)``.
    """

    mu0: float
    p: float
    c_theta: float = 1.0
    c_lambda: float = 1.0
    K: int = 1
    override_steps: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.mu0 <= 0:
            raise InvalidParameterError(f"mu0 must be positive, got {self.mu0}")
        if not 0.0 <= self.p < 0.25:
            raise InvalidParameterError(f"p must lie in [0, 1/4), got {self.p}")
        if self.c_theta <= 0 or self.c_lambda <= 0:
            raise InvalidParameterError("step constants must be positive")
        if self.K < 1:
            raise InvalidParameterError(f"K must be >= 1, got {self.K}")

    def mu_at(self, k: int) -> float:
        if k < 0:
            raise InvalidParameterError(f"iteration index must be >= 0, got {k}")
        return self.mu0 * float(k + 1) ** (-self.p)

    def steps_at(self, k: int, n: int) -> tuple[float, float, float]:
        if k < 0:
            raise InvalidParameterError(f"iteration index must be >= 0, got {k}")
        if self.override_steps is not None:
            return self.override_steps
        lam_theta = self.c_theta * np.sqrt(n) / np.sqrt(self.K)
        lam = self.c_lambda * lam_theta
        return (float(lam_theta), float(lam), float(lam))


def deterministic_directions(
    problem: BilevelProblem,
    agent: int,
    x: np.ndarray,
    y: np.ndarray,
    theta: np.ndarray,
    mu: float,
    gamma: float,
) -> DirectionTriple:
    """Exact descent directions of one agent."""
    if gamma <= 0:
        raise InvalidParameterError(f"gamma must be positive, got {gamma}")
    if mu < 0:
        raise InvalidParameterError(f"mu must be nonnegative, got {mu}")
    problem.check_dims(x, y)
    problem.check_dims(x, theta)
    gfx, gfy = problem.grad_f(agent, x, y)
    ggx_y, ggy_y = problem.grad_g(agent, x, y)
    ggx_t, ggy_t = problem.grad_g(agent, x, theta)
    return DirectionTriple(
        d_theta=ggy_t + (theta - y) / gamma,
        d_x=mu * gfx + (ggx_y - ggx_t),
        d_y=mu * gfy + ggy_y - (y - theta) / gamma,
    )


def _noise_draw(key: DrawKey, delta: float, dim: int) -> np.ndarray:
    return key.generator().standard_normal(dim) * (delta / np.sqrt(dim))


def stochastic_directions(
    problem: BilevelProblem,
    agent: int,
    x: np.ndarray,
    y: np.ndarray,
    theta: np.ndarray,
    mu: float,
    gamma: float,
    noise: NoiseModel,
    draw_key: DrawKey,
) -> DirectionTriple:
    """Sampled descent directions; unbiased for :func:`deterministic_directions`.

    ``draw_key`` is the agent-round master key; the per-call randomness
    streams are derived from it, so two calls with the same key produce
    identical triples. The lower-level sample is drawn once and shared
    by all three ``grad g`` appearances: for the mini-batch model that
    is one shared batch, for the additive model one shared perturbation
    on the ``x`` block of the two ``grad_x g`` evaluations.
    """
    if gamma <= 0:
        raise InvalidParameterError(f"gamma must be positive, got {gamma}")
    if mu < 0:
        raise InvalidParameterError(f"mu must be nonnegative, got {mu}")
    problem.check_dims(x, y)
    problem.check_dims(x, theta)

    if noise.kind == "minibatch":
        rng_g = draw_key.with_stream(Stream.MINIBATCH_G).generator()
        rng_f = draw_key.with_stream(Stream.MINIBATCH_F).generator()
        idx_g = problem.batch_indices(agent, "train", noise.batch_size, rng_g)
        idx_f = problem.batch_indices(agent, "val", noise.batch_size, rng_f)
        gfx, gfy = problem.batch_grad_f(agent, x, y, idx_f)
        ggx_y, ggy_y = problem.batch_grad_g(agent, x, y, idx_g)
        ggx_t, ggy_t = problem.batch_grad_g(agent, x, theta, idx_g)
    else:
        gfx, gfy = problem.grad_f(agent, x, y)
        ggx_y, ggy_y = problem.grad_g(agent, x, y)
        ggx_t, ggy_t = problem.grad_g(agent, x, theta)
        dim = problem.dx + problem.dy
        if noise.delta_f > 0:
            eps_f = _noise_draw(draw_key.with_stream(Stream.GRAD_F), noise.delta_f, dim)
            gfx = gfx + eps_f[: problem.dx]
            gfy = gfy + eps_f[problem.dx :]
        if noise.delta_g > 0:
            eps_y = _noise_draw(draw_key.with_stream(Stream.GRAD_G_AT_Y), noise.delta_g, dim)
            eps_t = _noise_draw(draw_key.with_stream(Stream.GRAD_G_AT_THETA), noise.delta_g, dim)
            ggx_y = ggx_y + eps_y[: problem.dx]
            ggy_y = ggy_y + eps_y[problem.dx :]
            # x-block perturbation shared with the (x, y) evaluation; only
            # the theta-side y block gets its own draw
            ggx_t = ggx_t + eps_y[: problem.dx]
            ggy_t = ggy_t + eps_t[problem.dx :]

    return DirectionTriple(
        d_theta=ggy_t + (theta - y) / gamma,
        d_x=mu * gfx + (ggx_y - ggx_t),
        d_y=mu * gfy + ggy_y - (y - theta) / gamma,
    )


def swarm_stochastic_directions(
    problem: BilevelProblem,
    X: np.ndarray,
    Y: np.ndarray,
    TH: np.ndarray,
    mu: float,
    gamma: float,
    noise: NoiseModel,
    base_seed: int,
    k: int,
) -> DirectionBatch:
    """All agents' sampled directions for round ``k``, stacked.

    Equivalent agent by agent to :func:`stochastic_directions` with
    ``derive_draw_key(base_seed, k, i)``; the noiseless additive case
    takes a vectorized path with no generator construction.
    """
    n = problem.n_agents
    if noise.kind == "additive_gaussian":
        gfx, gfy = problem.grad_f_all(X, Y)
        ggx_y, ggy_y = problem.grad_g_all(X, Y)
        ggx_t, ggy_t = problem.grad_g_all(X, TH)
        dim = problem.dx + problem.dy
        if noise.delta_f > 0:
            eps = np.stack(
                [_noise_draw(derive_draw_key(base_seed, k, i, Stream.GRAD_F), noise.delta_f, dim) for i in range(n)]
            )
            gfx = gfx + eps[:, : problem.dx]
            gfy = gfy + eps[:, problem.dx :]
        if noise.delta_g > 0:
            eps_y = np.stack(
                [_noise_draw(derive_draw_key(base_seed, k, i, Stream.GRAD_G_AT_Y), noise.delta_g, dim) for i in range(n)]
            )
            eps_t = np.stack(
                [
                    _noise_draw(derive_draw_key(base_seed, k, i, Stream.GRAD_G_AT_THETA), noise.delta_g, dim)
                    for i in range(n)
                ]
            )
            ggx_y = ggx_y + eps_y[:, : problem.dx]
            ggy_y = ggy_y + eps_y[:, problem.dx :]
            ggx_t = ggx_t + eps_y[:, : problem.dx]
            ggy_t = ggy_t + eps_t[:, problem.dx :]
        return DirectionBatch(
            d_theta=ggy_t + (TH - Y) / gamma,
            d_x=mu * gfx + (ggx_y - ggx_t),
            d_y=mu * gfy + ggy_y - (Y - TH) / gamma,
        )
    triples = [
        stochastic_directions(
            problem, i, X[i], Y[i], TH[i], mu, gamma, noise, derive_draw_key(base_seed, k, i)
        )
        for i in range(n)
    ]
    return DirectionBatch.from_triples(triples)


@dataclass(frozen=True)
class EstimatorState:
    """Per-agent estimator memory.

    ``rho`` holds the current averaging coefficients, one per variable
    block (theta, x, y); with ``rho == 1`` both recursive kinds reduce
    to the raw mini-batch estimate.
    """

    kind: str = "minibatch"
    rho: tuple[float, float, float] = (1.0, 1.0, 1.0)
    prev_estimate: DirectionTriple | None = None
    prev_raw: DirectionTriple | None = None

    def __post_init__(self):
        if self.kind not in ("minibatch", "momentum", "storm"):
            raise InvalidParameterError(f"unknown estimator kind {self.kind!r}")
        if isinstance(self.rho, (int, float)):
            object.__setattr__(self, "rho", (float(self.rho),) * 3)
        if not all(0.0 < r <= 1.0 for r in self.rho):
            raise InvalidParameterError(f"rho coefficients must lie in (0, 1], got {self.rho}")


def apply_estimator(
    state: EstimatorState,
    raw: DirectionTriple,
    raw_reeval_at_prev: DirectionTriple | None = None,
) -> tuple[DirectionTriple, EstimatorState]:
    """Fold one raw direction into the running estimate.

    minibatch:  estimate = raw
    momentum:   estimate = (1 - rho) prev_estimate + rho raw
    storm:      estimate = (1 - rho) (prev_estimate + raw - raw_at_prev) + rho raw

    where ``raw_at_prev`` re-evaluates the raw direction at the previous
    iterate with the current sample (required for storm after the first
    call). The first call of either recursive kind returns ``raw``.
    """
    if state.kind == "minibatch":
        return raw, state
    if state.prev_estimate is None:
        est = raw
    elif state.kind == "momentum":
        est = _blend(state.prev_estimate, raw, state.rho)
    else:  # storm
        if raw_reeval_at_prev is None:
            raise MissingReevalError(
                "storm needs the raw direction re-evaluated at the previous iterate"
            )
        # written as raw + (1 - rho)(prev - reeval) so the correction term
        # cancels exactly when iterates and samples repeat
        rt, rx, ry = state.rho
        prev, reeval = state.prev_estimate, raw_reeval_at_prev
        est = DirectionTriple(
            d_theta=raw.d_theta + (1.0 - rt) * (prev.d_theta - reeval.d_theta),
            d_x=raw.d_x + (1.0 - rx) * (prev.d_x - reeval.d_x),
            d_y=raw.d_y + (1.0 - ry) * (prev.d_y - reeval.d_y),
        )
    return est, replace(state, prev_estimate=est, prev_raw=raw)


def _blend(prev: DirectionTriple, raw: DirectionTriple, rho: tuple[float, float, float]) -> DirectionTriple:
    rt, rx, ry = rho
    return DirectionTriple(
        d_theta=(1.0 - rt) * prev.d_theta + rt * raw.d_theta,
        d_x=(1.0 - rx) * prev.d_x + rx * raw.d_x,
        d_y=(1.0 - ry) * prev.d_y + ry * raw.d_y,
    )
