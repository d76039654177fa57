"""Synchronous decentralized update rules over the whole swarm.

Every strategy advances all agents one round: it consumes the per-agent
direction estimates computed at the current iterates, performs its
communication pattern with the round's weight matrix, and commits the
new variables. No agent ever observes a partially updated round.

Available rules (``W`` is the mixing matrix, ``D_hat`` the raw estimate,
``lam`` the per-block step size):

se            v+ = W (v - lam D_hat)
gt_atc        T+ = W (T + D_hat - D_hat_prev);  v+ = W (v - lam T+)
gt_semi_atc   T+ = W (T + D_hat - D_hat_prev);  v+ = W v - lam T+
gt_non_atc    T+ = W T + D_hat - D_hat_prev;    v+ = W v - lam T+
extra         v+ = v + W v - Wt v_prev - lam (D_hat - D_hat_prev),  Wt = (W + I) / 2
ed            v+ = W (2 v - v_prev - lam (D_hat - D_hat_prev))

The tracker variants keep ``mean_i T_i == mean_i D_hat_i`` exactly (up
to rounding) by telescoping from zero initialization, which is what
corrects gradient heterogeneity across agents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .directions import DirectionBatch, DirectionTriple
from .errors import InvalidInputError, InvalidParameterError
from .topology import WeightMatrix

__all__ = ["SwarmState", "StepContext", "Strategy", "STRATEGIES", "make_strategy"]


@dataclass
class SwarmState:
    """Stacked per-agent variables plus strategy memory.

    ``x`` is (n, dx); ``y`` and ``theta`` are (n, dy). ``memory`` holds
    whatever the active strategy needs between rounds (trackers,
    previous raw estimates, previous iterates); a fresh state has empty
    memory and ``k == 0``.
    """

    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    k: int = 0
    memory: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.y.shape[0] != n or self.theta.shape[0] != n:
            raise InvalidInputError("x, y, theta must have one row per agent")
        if self.y.shape != self.theta.shape:
            raise InvalidInputError("y and theta must share dimensions")

    @property
    def n_agents(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "SwarmState":
        return SwarmState(
            x=self.x.copy(),
            y=self.y.copy(),
            theta=self.theta.copy(),
            k=self.k,
            memory={key: (v.copy() if isinstance(v, np.ndarray) else v) for key, v in self.memory.items()},
        )


@dataclass(frozen=True)
class StepContext:
    """Per-round parameters: weights, step sizes, penalty, proximal scale."""

    W: WeightMatrix
    steps: tuple[float, float, float]  # (lambda_theta, lambda_x, lambda_y)
    mu: float
    gamma: float

    def __post_init__(self):
        if any(s < 0 for s in self.steps):
            raise InvalidParameterError(f"step sizes must be nonnegative, got {self.steps}")


def _as_batch(estimates) -> DirectionBatch:
    if isinstance(estimates, DirectionBatch):
        return estimates
    if estimates and isinstance(estimates[0], DirectionTriple):
        return DirectionBatch.from_triples(list(estimates))
    raise InvalidInputError("estimates must be a DirectionBatch or a list of DirectionTriple")


_BLOCKS = ("theta", "x", "y")


class Strategy:
    """Base class: subclasses implement one synchronous round."""

    name = "base"

    def init_memory(self, swarm: SwarmState) -> None:
        """Populate ``swarm.memory`` for iteration 0 (default: nothing)."""

    def step(self, swarm: SwarmState, ctx: StepContext, estimates) -> int:
        """Advance the swarm one round in place; returns mixes performed."""
        raise NotImplementedError

    def _check(self, swarm: SwarmState, ctx: StepContext, est: DirectionBatch) -> None:
        n = swarm.n_agents
        if ctx.W.n != n:
            raise InvalidInputError(f"weight matrix is {ctx.W.n}x{ctx.W.n} but swarm has {n} agents")
        if est.d_x.shape != swarm.x.shape or est.d_y.shape != swarm.y.shape or est.d_theta.shape != swarm.theta.shape:
            raise InvalidInputError("estimate shapes do not match swarm variables")


class StochasticExchange(Strategy):
    """Mix the locally stepped iterates; no heterogeneity correction."""

    name = "se"

    def step(self, swarm, ctx, estimates):
        est = _as_batch(estimates)
        self._check(swarm, ctx, est)
        w = ctx.W.entries
        lam_t, lam_x, lam_y = ctx.steps
        swarm.theta = w @ (swarm.theta - lam_t * est.d_theta)
        swarm.x = w @ (swarm.x - lam_x * est.d_x)
        swarm.y = w @ (swarm.y - lam_y * est.d_y)
        swarm.k += 1
        return 1


class _TrackerStrategy(Strategy):
    """Shared tracker plumbing for the gradient-tracking placements."""

    def init_memory(self, swarm):
        for blk, var in zip(_BLOCKS, (swarm.theta, swarm.x, swarm.y)):
            swarm.memory[f"tracker_{blk}"] = np.zeros_like(var)
            swarm.memory[f"prev_raw_{blk}"] = np.zeros_like(var)

    def _update_trackers(self, swarm, w, est) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _apply(self, swarm, w, trackers, ctx) -> None:
        raise NotImplementedError

    def step(self, swarm, ctx, estimates):
        est = _as_batch(estimates)
        self._check(swarm, ctx, est)
        w = ctx.W.entries
        trackers = self._update_trackers(swarm, w, est)
        self._apply(swarm, w, trackers, ctx)
        for blk, raw in zip(_BLOCKS, (est.d_theta, est.d_x, est.d_y)):
            swarm.memory[f"tracker_{blk}"] = trackers[blk]
            swarm.memory[f"prev_raw_{blk}"] = raw
        swarm.k += 1
        return 2


class AtcTracking(_TrackerStrategy):
    """Mixed trackers applied before the variable mix (adapt-then-combine)."""

    name = "gt_atc"

    def _update_trackers(self, swarm, w, est):
        mem = swarm.memory
        return {
            blk: w @ (mem[f"tracker_{blk}"] + raw - mem[f"prev_raw_{blk}"])
            for blk, raw in zip(_BLOCKS, (est.d_theta, est.d_x, est.d_y))
        }

    def _apply(self, swarm, w, trackers, ctx):
        lam_t, lam_x, lam_y = ctx.steps
        swarm.theta = w @ (swarm.theta - lam_t * trackers["theta"])
        swarm.x = w @ (swarm.x - lam_x * trackers["x"])
        swarm.y = w @ (swarm.y - lam_y * trackers["y"])


class SemiAtcTracking(AtcTracking):
    """Mixed trackers, but each agent applies its own tracker after mixing variables."""

    name = "gt_semi_atc"

    def _apply(self, swarm, w, trackers, ctx):
        lam_t, lam_x, lam_y = ctx.steps
        swarm.theta = w @ swarm.theta - lam_t * trackers["theta"]
        swarm.x = w @ swarm.x - lam_x * trackers["x"]
        swarm.y = w @ swarm.y - lam_y * trackers["y"]


class NonAtcTracking(_TrackerStrategy):
    """Mixed tracker history with local innovations."""

    name = "gt_non_atc"

    def _update_trackers(self, swarm, w, est):
        mem = swarm.memory
        return {
            blk: w @ mem[f"tracker_{blk}"] + raw - mem[f"prev_raw_{blk}"]
            for blk, raw in zip(_BLOCKS, (est.d_theta, est.d_x, est.d_y))
        }

    def _apply(self, swarm, w, trackers, ctx):
        lam_t, lam_x, lam_y = ctx.steps
        swarm.theta = w @ swarm.theta - lam_t * trackers["theta"]
        swarm.x = w @ swarm.x - lam_x * trackers["x"]
        swarm.y = w @ swarm.y - lam_y * trackers["y"]


class _MergedCommunication(Strategy):
    """Shared memory layout for the single-round corrected strategies."""

    def init_memory(self, swarm):
        for blk, var in zip(_BLOCKS, (swarm.theta, swarm.x, swarm.y)):
            swarm.memory[f"prev_raw_{blk}"] = np.zeros_like(var)
        # previous iterates appear after the first round
        for blk in _BLOCKS:
            swarm.memory[f"prev_var_{blk}"] = None

    def _blocks(self, swarm, est):
        return zip(
            _BLOCKS,
            (swarm.theta, swarm.x, swarm.y),
            (est.d_theta, est.d_x, est.d_y),
        )

    def _commit(self, swarm, new_vars, est):
        for blk, var, raw in self._blocks(swarm, est):
            swarm.memory[f"prev_var_{blk}"] = var
            swarm.memory[f"prev_raw_{blk}"] = raw
        swarm.theta, swarm.x, swarm.y = new_vars["theta"], new_vars["x"], new_vars["y"]
        swarm.k += 1


class Extra(_MergedCommunication):
    """Difference-of-iterates correction with the averaged second matrix."""

    name = "extra"

    def step(self, swarm, ctx, estimates):
        est = _as_batch(estimates)
        self._check(swarm, ctx, est)
        w = ctx.W.entries
        lam = dict(zip(_BLOCKS, ctx.steps))
        new_vars = {}
        first = swarm.memory["prev_var_theta"] is None
        if first:
            for blk, var, raw in self._blocks(swarm, est):
                new_vars[blk] = w @ var - lam[blk] * raw
            mixes = 1
        else:
            w_tilde = 0.5 * (w + np.eye(ctx.W.n))
            for blk, var, raw in self._blocks(swarm, est):
                prev_var = swarm.memory[f"prev_var_{blk}"]
                prev_raw = swarm.memory[f"prev_raw_{blk}"]
                new_vars[blk] = var + w @ var - w_tilde @ prev_var - lam[blk] * (raw - prev_raw)
            mixes = 2
        self._commit(swarm, new_vars, est)
        return mixes


class ExactDiffusion(_MergedCommunication):
    """Single-mix correction of the local step differences."""

    name = "ed"

    def step(self, swarm, ctx, estimates):
        est = _as_batch(estimates)
        self._check(swarm, ctx, est)
        w = ctx.W.entries
        lam = dict(zip(_BLOCKS, ctx.steps))
        new_vars = {}
        first = swarm.memory["prev_var_theta"] is None
        if first:
            for blk, var, raw in self._blocks(swarm, est):
                new_vars[blk] = w @ (var - lam[blk] * raw)
        else:
            for blk, var, raw in self._blocks(swarm, est):
                prev_var = swarm.memory[f"prev_var_{blk}"]
                prev_raw = swarm.memory[f"prev_raw_{blk}"]
                new_vars[blk] = w @ (2.0 * var - prev_var - lam[blk] * (raw - prev_raw))
        self._commit(swarm, new_vars, est)
        return 1


STRATEGIES: dict[str, type[Strategy]] = {
    cls.name: cls
    for cls in (
        StochasticExchange,
        AtcTracking,
        SemiAtcTracking,
        NonAtcTracking,
        Extra,
        ExactDiffusion,
    )
}


def make_strategy(name: str) -> Strategy:
    try:
        return STRATEGIES[name]()
    except KeyError:
        raise InvalidParameterError(
            f"unknown strategy {name!r}; expected one of {sorted(STRATEGIES)}"
        ) from None
