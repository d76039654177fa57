"""Simulation driver: schedules, estimator pipeline, recording, seeding.

A :class:`RunConfig` fully determines a run: two executions of the same
config produce identical metric series (wall-clock timings aside),
independent of any worker-pool size, because every random draw is keyed
by ``(base_seed, iteration, agent, stream)`` through
:func:`derive_draw_key`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .directions import (
    DirectionBatch,
    EstimatorState,
    Schedules,
    apply_estimator,
    swarm_stochastic_directions,
)
from .envelope import EnvelopeConfig, StationarityRecord, swarm_metrics
from .errors import ConfigError, InnerSolveError
from .problems import (
    BilevelProblem,
    LogisticHyperoptInstance,
    NoiseModel,
    QuadraticToyInstance,
    toy_reference_solution,
)
from .seeding import Stream, derive_draw_key, mix64
from .strategies import STRATEGIES, StepContext, SwarmState, make_strategy
from .topology import (
    WeightMatrix,
    build_dynamic_mh,
    build_exponential,
    build_line,
    build_ring,
    custom_matrix,
    validate,
)

__all__ = [
    "RunConfig",
    "RecordRow",
    "RunSummary",
    "MetricsSeries",
    "SweepPoint",
    "run",
    "sweep",
    "derive_draw_key",
    "mean_std_two_pass",
    "mean_std_streaming",
]

_ALLOWED_KEYS = {
    "": {"problem", "topology", "strategy", "estimator", "schedules", "envelope", "runner"},
    "problem": {
        "name",
        "n_agents",
        "block_dim",
        "a_slope",
        "b_slope",
        "feature_dim",
        "train_per_agent",
        "val_per_agent",
        "noise_rate",
        "dataset_seed",
        "noise",
    },
    "problem.noise": {"kind", "delta_f", "delta_g", "batch_size"},
    "topology": {"kind", "n", "a", "mode", "m_min", "m_max", "entries"},
    "estimator": {"kind", "rho"},
    "schedules": {"mu0", "p", "c_theta", "c_lambda", "lambda_theta", "lambda_x", "lambda_y"},
    "envelope": {"gamma", "inner_tol", "inner_max_iters", "record_every"},
    "runner": {"K", "base_seed", "record_every", "init"},
    "runner.init": {"x", "y", "theta"},
}


def _check_keys(section: dict, path: str) -> None:
    allowed = _ALLOWED_KEYS[path]
    for key in section:
        if key not in allowed:
            where = path or "top level"
            raise ConfigError(f"unknown key {key!r} in {where} (allowed: {sorted(allowed)})")


@dataclass(frozen=True)
class RunConfig:
    """Validated, normalized run configuration.

    ``raw`` is the canonical echo: feeding it back through
    :meth:`from_dict` reproduces the run exactly.
    """

    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration root must be a JSON object")
        _check_keys(d, "")
        for required in ("problem", "schedules", "envelope", "runner"):
            if required not in d:
                raise ConfigError(f"missing required section {required!r}")
        norm = copy.deepcopy(d)
        _check_keys(norm["problem"], "problem")
        _check_keys(norm["problem"].get("noise", {}), "problem.noise")
        _check_keys(norm.get("topology", {}), "topology")
        _check_keys(norm.get("estimator", {}), "estimator")
        _check_keys(norm["schedules"], "schedules")
        _check_keys(norm["envelope"], "envelope")
        _check_keys(norm["runner"], "runner")
        init = norm["runner"].get("init", {})
        if isinstance(init, dict):
            _check_keys(init, "runner.init")
        cfg = cls(raw=norm)
        # fail fast on anything structurally wrong
        cfg.build_problem()
        cfg.build_schedules()
        cfg.build_envelope()
        cfg.build_noise()
        if cfg.strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown key {cfg.strategy!r} in strategy (allowed: {sorted(STRATEGIES)})"
            )
        if cfg.topology_kind != "dynamic_mh":
            cfg.build_topology()
        est = norm.get("estimator", {})
        kind = est.get("kind", "minibatch")
        if kind not in ("minibatch", "momentum", "storm"):
            raise ConfigError(f"unknown key {kind!r} in estimator.kind")
        if cfg.K < 1 or cfg.record_every < 1:
            raise ConfigError("runner.K and record_every must be >= 1")
        return cfg

    # accessors -----------------------------------------------------------

    @property
    def strategy(self) -> str:
        return self.raw.get("strategy", "se")

    @property
    def K(self) -> int:
        return int(self.raw["runner"]["K"])

    @property
    def base_seed(self) -> int:
        return int(self.raw["runner"].get("base_seed", 0))

    @property
    def record_every(self) -> int:
        if "record_every" in self.raw["runner"]:
            return int(self.raw["runner"]["record_every"])
        return int(self.raw["envelope"].get("record_every", 10))

    @property
    def topology_kind(self) -> str:
        return self.raw.get("topology", {}).get("kind", "ring")

    def run_id(self) -> str:
        digest = hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()
        return digest[:12]

    # builders --------------------------------------------------------------

    def build_problem(self) -> BilevelProblem:
        p = self.raw["problem"]
        name = p.get("name", "quadratic_toy")
        if name == "quadratic_toy":
            return QuadraticToyInstance(
                n_agents=int(p.get("n_agents", 5)),
                block_dim=int(p.get("block_dim", 10)),
                a_slope=float(p.get("a_slope", 0.1)),
                b_slope=float(p.get("b_slope", 0.05)),
            )
        if name == "logistic_hyperopt":
            return LogisticHyperoptInstance(
                n_agents=int(p.get("n_agents", 8)),
                feature_dim=int(p.get("feature_dim", 10)),
                train_per_agent=int(p.get("train_per_agent", 64)),
                val_per_agent=int(p.get("val_per_agent", 64)),
                noise_rate=float(p.get("noise_rate", 0.1)),
                dataset_seed=int(p.get("dataset_seed", 0)),
            )
        raise ConfigError(f"unknown key {name!r} in problem.name")

    def build_noise(self) -> NoiseModel:
        spec = self.raw["problem"].get("noise", {})
        try:
            return NoiseModel(
                kind=spec.get("kind", "additive_gaussian"),
                delta_f=float(spec.get("delta_f", 0.0)),
                delta_g=float(spec.get("delta_g", 0.0)),
                batch_size=int(spec.get("batch_size", 32)),
            )
        except Exception as exc:
            raise ConfigError(f"problem.noise: {exc}") from exc

    def build_schedules(self) -> Schedules:
        s = self.raw["schedules"]
        override = None
        if any(key in s for key in ("lambda_theta", "lambda_x", "lambda_y")):
            try:
                override = (
                    float(s["lambda_theta"]),
                    float(s["lambda_x"]),
                    float(s["lambda_y"]),
                )
            except KeyError as exc:
                raise ConfigError(
                    "step override needs all of lambda_theta, lambda_x, lambda_y"
                ) from exc
        try:
            return Schedules(
                mu0=float(s.get("mu0", 1.0)),
                p=float(s.get("p", 0.0)),
                c_theta=float(s.get("c_theta", 1.0)),
                c_lambda=float(s.get("c_lambda", 1.0)),
                K=self.K,
                override_steps=override,
            )
        except Exception as exc:
            raise ConfigError(f"schedules: {exc}") from exc

    def build_envelope(self) -> EnvelopeConfig:
        e = self.raw["envelope"]
        try:
            return EnvelopeConfig(
                gamma=float(e["gamma"]),
                inner_tol=float(e.get("inner_tol", 1e-10)),
                inner_max_iters=int(e.get("inner_max_iters", 10_000)),
            )
        except KeyError as exc:
            raise ConfigError("envelope.gamma is required") from exc
        except Exception as exc:
            raise ConfigError(f"envelope: {exc}") from exc

    def topology_n(self) -> int:
        t = self.raw.get("topology", {})
        return int(t.get("n", self.raw["problem"].get("n_agents", 5)))

    def build_topology(self, round_index: int | None = None) -> WeightMatrix:
        t = self.raw.get("topology", {})
        kind = self.topology_kind
        n = self.topology_n()
        try:
            if kind == "ring":
                return build_ring(n, float(t.get("a", 0.5)))
            if kind == "line":
                return build_line(n, t.get("mode", "metropolis"))
            if kind == "exponential":
                return build_exponential(n, t.get("mode", "normalized"))
            if kind == "dynamic_mh":
                seed = mix64(self.base_seed, 0 if round_index is None else round_index)
                return build_dynamic_mh(
                    n, int(t.get("m_min", 2)), int(t.get("m_max", 2)), round_seed=seed
                )
            if kind == "custom":
                return custom_matrix(t["entries"])
        except ConfigError:
            raise
        except KeyError as exc:
            raise ConfigError(f"topology: missing key {exc}") from exc
        except Exception as exc:
            raise ConfigError(f"topology: {exc}") from exc
        raise ConfigError(f"unknown key {kind!r} in topology.kind")

    def estimator_kind(self) -> str:
        return self.raw.get("estimator", {}).get("kind", "minibatch")

    def estimator_rho_at(self, k: int) -> float:
        spec = self.raw.get("estimator", {}).get("rho")
        kind = self.estimator_kind()
        if spec is None:
            if kind == "momentum":
                return 0.2
            if kind == "storm":
                return min(1.0, 1.0 / (k + 1) ** (2.0 / 3.0))
            return 1.0
        if isinstance(spec, dict):
            c = float(spec.get("c", 1.0))
            power = float(spec.get("power", 2.0 / 3.0))
            return min(1.0, c / (k + 1) ** power)
        return float(spec)


@dataclass(frozen=True)
class RecordRow:
    """One recorded iteration; ``record`` is None for gap rows."""

    k: int
    mu: float
    record: StationarityRecord | None
    rel_err_x: float | None
    rel_err_y: float | None
    mix_ops_cumulative: int
    wall_ms: float


@dataclass(frozen=True)
class RunSummary:
    time_avg_grad_psi_sq: float
    time_avg_consensus_total: float
    final_grad_psi_sq: float
    final_consensus_total: float
    final_rel_err_x: float | None
    final_rel_err_y: float | None
    iterations: int
    recorded: int
    gap_rows: int
    total_mix_ops: int

    def as_dict(self) -> dict:
        return {
            "time_avg_grad_psi_sq": self.time_avg_grad_psi_sq,
            "time_avg_consensus_total": self.time_avg_consensus_total,
            "final_grad_psi_sq": self.final_grad_psi_sq,
            "final_consensus_total": self.final_consensus_total,
            "final_rel_err_x": self.final_rel_err_x,
            "final_rel_err_y": self.final_rel_err_y,
            "iterations": self.iterations,
            "recorded": self.recorded,
            "gap_rows": self.gap_rows,
            "total_mix_ops": self.total_mix_ops,
        }


@dataclass
class MetricsSeries:
    run_id: str
    records: list[RecordRow]
    summary: RunSummary
    warnings: list[str]
    reference: dict | None
    final_state: SwarmState = field(repr=False, default=None)


def _init_block(spec, n: int, dim: int, base_seed: int, block_index: int) -> np.ndarray:
    if spec in (None, "zeros"):
        return np.zeros((n, dim))
    if isinstance(spec, dict) and spec.get("kind") == "gaussian":
        scale = float(spec.get("scale", 0.01))
        rows = [
            derive_draw_key(base_seed, block_index, i, Stream.INIT).generator().standard_normal(dim) * scale
            for i in range(n)
        ]
        return np.stack(rows)
    if isinstance(spec, dict) and spec.get("kind") == "explicit":
        values = np.asarray(spec["values"], dtype=float)
        if values.ndim == 1:
            values = np.tile(values, (n, 1))
        if values.shape != (n, dim):
            raise ConfigError(
                f"explicit init must have shape ({n}, {dim}), got {values.shape}"
            )
        return values
    raise ConfigError(f"unknown key {spec!r} in runner.init block")


def _reference_for(problem: BilevelProblem) -> tuple[np.ndarray, np.ndarray] | None:
    if isinstance(problem, QuadraticToyInstance):
        x_star, y1_star, y2_star = toy_reference_solution(problem)
        return x_star, np.concatenate([y1_star, y2_star])
    return None


def _rel_errors(swarm: SwarmState, ref) -> tuple[float | None, float | None]:
    if ref is None:
        return None, None
    x_star, y_star = ref
    ex = float(np.linalg.norm(swarm.x.mean(axis=0) - x_star) / np.linalg.norm(x_star))
    ey = float(np.linalg.norm(swarm.y.mean(axis=0) - y_star) / np.linalg.norm(y_star))
    return ex, ey


def run(config: RunConfig) -> MetricsSeries:
    """Execute one simulation and collect its metric series.

    Metrics are recorded at the iterate entering round ``k`` for every
    ``k`` divisible by ``record_every`` and for ``k == K - 1``; the
    summary additionally evaluates the post-run state. A failed inner
    solve during measurement produces a gap row and the run continues.
    """
    problem = config.build_problem()
    n = problem.n_agents
    if config.topology_n() != n:
        raise ConfigError(
            f"topology.n={config.topology_n()} does not match problem.n_agents={n}"
        )
    schedules = config.build_schedules()
    env_cfg = config.build_envelope()
    noise = config.build_noise()
    strategy = make_strategy(config.strategy)
    estimator_kind = config.estimator_kind()
    base_seed = config.base_seed
    K = config.K
    record_every = config.record_every
    gamma = env_cfg.gamma

    warnings: list[str] = []
    gamma_warning = env_cfg.range_warning(problem)
    if gamma_warning:
        warnings.append("gamma_range_warning: " + gamma_warning)

    dynamic = config.topology_kind == "dynamic_mh"
    w_static = None
    if not dynamic:
        w_static = config.build_topology()
        warnings.extend(w_static.warnings)
        report = validate(w_static)
        if not report.ok:
            warnings.extend(f"topology: {v}" for v in report.violations)

    init = config.raw["runner"].get("init", {})
    if not isinstance(init, dict):
        raise ConfigError("runner.init must be an object with x/y/theta blocks")
    swarm = SwarmState(
        x=_init_block(init.get("x", "zeros"), n, problem.dx, base_seed, 0),
        y=_init_block(init.get("y", "zeros"), n, problem.dy, base_seed, 1),
        theta=_init_block(init.get("theta", "zeros"), n, problem.dy, base_seed, 2),
    )
    strategy.init_memory(swarm)

    est_states = (
        [EstimatorState(kind=estimator_kind) for _ in range(n)]
        if estimator_kind != "minibatch"
        else None
    )
    prev_iterates: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    ref = _reference_for(problem)
    records: list[RecordRow] = []
    mix_ops = 0
    gap_rows = 0
    t0 = time.perf_counter()

    def take_record(k: int, mu: float) -> None:
        nonlocal gap_rows
        wall = (time.perf_counter() - t0) * 1000.0
        ex, ey = _rel_errors(swarm, ref)
        try:
            rec = swarm_metrics(problem, swarm, mu, env_cfg)
        except InnerSolveError:
            gap_rows += 1
            rec = None
        records.append(
            RecordRow(
                k=k, mu=mu, record=rec, rel_err_x=ex, rel_err_y=ey,
                mix_ops_cumulative=mix_ops, wall_ms=wall,
            )
        )

    for k in range(K):
        mu = schedules.mu_at(k)
        steps = schedules.steps_at(k, n)
        if k % record_every == 0 or k == K - 1:
            take_record(k, mu)
        w = config.build_topology(round_index=k) if dynamic else w_static
        raw = swarm_stochastic_directions(
            problem, swarm.x, swarm.y, swarm.theta, mu, gamma, noise, base_seed, k
        )
        if est_states is None:
            estimates = raw
        else:
            rho = config.estimator_rho_at(k)
            reeval = None
            if estimator_kind == "storm" and prev_iterates is not None:
                reeval = swarm_stochastic_directions(
                    problem, *prev_iterates, mu, gamma, noise, base_seed, k
                )
            new_states = []
            triples = []
            for i in range(n):
                state = replace(est_states[i], rho=(rho, rho, rho))
                est, state = apply_estimator(
                    state, raw.agent(i), None if reeval is None else reeval.agent(i)
                )
                triples.append(est)
                new_states.append(state)
            est_states = new_states
            estimates = DirectionBatch.from_triples(triples)
        if estimator_kind == "storm":
            prev_iterates = (swarm.x.copy(), swarm.y.copy(), swarm.theta.copy())
        ctx = StepContext(W=w, steps=steps, mu=mu, gamma=gamma)
        mix_ops += strategy.step(swarm, ctx, estimates)

    # post-run evaluation for the summary
    final_mu = schedules.mu_at(K - 1)
    try:
        final_rec = swarm_metrics(problem, swarm, final_mu, env_cfg)
        final_grad = final_rec.grad_psi_sq
        final_cons = final_rec.consensus_total
    except InnerSolveError:
        final_grad = math.nan
        final_cons = math.nan
    fex, fey = _rel_errors(swarm, ref)

    good = [r.record for r in records if r.record is not None]
    summary = RunSummary(
        time_avg_grad_psi_sq=float(np.mean([r.grad_psi_sq for r in good])) if good else math.nan,
        time_avg_consensus_total=float(np.mean([r.consensus_total for r in good])) if good else math.nan,
        final_grad_psi_sq=final_grad,
        final_consensus_total=final_cons,
        final_rel_err_x=fex,
        final_rel_err_y=fey,
        iterations=K,
        recorded=len(records),
        gap_rows=gap_rows,
        total_mix_ops=mix_ops,
    )
    reference = None
    if ref is not None:
        reference = {"x_star": ref[0].tolist(), "y_star": ref[1].tolist()}
    return MetricsSeries(
        run_id=config.run_id(),
        records=records,
        summary=summary,
        warnings=warnings,
        reference=reference,
        final_state=swarm,
    )


# sweeps ---------------------------------------------------------------------

_GRID_AXES = ("n", "topology", "p", "gamma", "strategy")


@dataclass(frozen=True)
class SweepPoint:
    point: dict
    seeds: tuple[int, ...]
    per_seed: tuple[RunSummary, ...]
    aggregates: dict  # metric -> {"mean": ..., "std": ...}
    errors: tuple[str, ...] = ()
    series: tuple[MetricsSeries, ...] = ()


def mean_std_two_pass(values: list[float]) -> tuple[float, float]:
    """Sample mean and standard deviation, textbook two-pass form."""
    m = len(values)
    mean = sum(values) / m
    if m == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (m - 1)
    return mean, math.sqrt(var)


def mean_std_streaming(values: list[float]) -> tuple[float, float]:
    """Single-pass running mean/variance (Welford); cross-checks the two-pass form."""
    mean = 0.0
    m2 = 0.0
    for i, v in enumerate(values, start=1):
        delta = v - mean
        mean += delta / i
        m2 += delta * (v - mean)
    if len(values) <= 1:
        return mean, 0.0
    return mean, math.sqrt(m2 / (len(values) - 1))


def _apply_point(base: dict, point: dict) -> dict:
    d = copy.deepcopy(base)
    for axis, value in point.items():
        if axis == "n":
            d["problem"]["n_agents"] = value
            d.setdefault("topology", {})["n"] = value
        elif axis == "topology":
            if isinstance(value, dict):
                d["topology"] = copy.deepcopy(value)
            else:
                d.setdefault("topology", {})["kind"] = value
        elif axis == "p":
            d["schedules"]["p"] = value
        elif axis == "gamma":
            d["envelope"]["gamma"] = value
        elif axis == "strategy":
            d["strategy"] = value
        else:
            raise ConfigError(f"unknown key {axis!r} in sweep grid (allowed: {sorted(_GRID_AXES)}, seeds)")
    return d


def sweep(base: RunConfig, grid: dict, max_workers: int | None = None) -> list[SweepPoint]:
    """Cartesian sweep over grid axes with per-point seed replicates.

    ``grid`` maps axis names (subset of ``n``, ``topology``, ``p``,
    ``gamma``, ``strategy``) to value lists, plus an optional ``seeds``
    list of base-seed replicates (default: the base config's seed).
    Failed runs are recorded per point; the sweep continues.
    """
    if not grid:
        raise ConfigError("sweep grid must not be empty")
    axes = {k: v for k, v in grid.items() if k != "seeds"}
    for axis in axes:
        if axis not in _GRID_AXES:
            raise ConfigError(f"unknown key {axis!r} in sweep grid (allowed: {sorted(_GRID_AXES)}, seeds)")
    seeds = [int(s) for s in grid.get("seeds", [base.base_seed])]
    if not seeds:
        raise ConfigError("sweep seeds list must not be empty")

    names = sorted(axes)
    combos: list[dict] = [{}]
    for name in names:
        combos = [{**c, name: v} for c in combos for v in axes[name]]

    if max_workers is None:
        max_workers = int(os.environ.get("DSBOSIM_MAX_WORKERS", "1"))

    def run_point(point: dict) -> SweepPoint:
        summaries: list[RunSummary] = []
        all_series: list[MetricsSeries] = []
        errors: list[str] = []
        for seed in seeds:
            d = _apply_point(base.raw, point)
            d["runner"]["base_seed"] = seed
            try:
                series = run(RunConfig.from_dict(d))
                summaries.append(series.summary)
                all_series.append(series)
            except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                errors.append(f"seed {seed}: {exc}")
        aggregates = {}
        if summaries:
            for metric in ("time_avg_grad_psi_sq", "time_avg_consensus_total", "final_grad_psi_sq"):
                values = [getattr(s, metric) for s in summaries]
                mean, std = mean_std_two_pass(values)
                check_mean, check_std = mean_std_streaming(values)
                if abs(mean - check_mean) > 1e-12 * (1 + abs(mean)) or abs(std - check_std) > 1e-12 * (1 + std):
                    errors.append(f"statistics cross-check failed for {metric}")
                aggregates[metric] = {"mean": mean, "std": std}
        return SweepPoint(
            point=point,
            seeds=tuple(seeds),
            per_seed=tuple(summaries),
            aggregates=aggregates,
            errors=tuple(errors),
            series=tuple(all_series),
        )

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(run_point, combos))
    return [run_point(c) for c in combos]
