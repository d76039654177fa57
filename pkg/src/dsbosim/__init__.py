"""Decentralized stochastic bilevel optimization simulator.

Compose a benchmark problem, a communication topology, a decentralized
update strategy, and a gradient estimator into a deterministic
simulation, then record stationarity and consensus metrics.
"""

from .directions import (
    DirectionBatch,
    DirectionTriple,
    EstimatorState,
    Schedules,
    apply_estimator,
    deterministic_directions,
    stochastic_directions,
)
from .envelope import (
    EnvelopeConfig,
    StationarityRecord,
    grad_moreau,
    grad_psi,
    moreau_value,
    psi_value,
    solve_theta_star,
    swarm_metrics,
)
from .problems import (
    BilevelProblem,
    LogisticHyperoptInstance,
    NoiseModel,
    QuadraticToyInstance,
    generate_logistic_data,
    measure_dissimilarity,
    sample_grad_f,
    sample_grad_g,
    toy_reference_solution,
)
from .runner import MetricsSeries, RunConfig, derive_draw_key, run, sweep
from .seeding import DrawKey, Stream
from .strategies import STRATEGIES, StepContext, SwarmState, make_strategy
from .topology import (
    ConnectivityReport,
    WeightMatrix,
    build_dynamic_mh,
    build_exponential,
    build_line,
    build_ring,
    mix,
    spectral_report,
    validate,
)

__version__ = "0.1.0"
