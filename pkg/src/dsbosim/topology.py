"""Communication topologies and gossip mixing matrices.

All builders return a :class:`WeightMatrix` whose entries form the one-round
gossip operator of the swarm. A well-formed weight matrix is nonnegative,
symmetric, and doubly stochastic; its connectivity parameter
``rho = max(|lambda_2|, |lambda_n|)`` controls how fast repeated mixing
contracts disagreement between agents (``1 - rho`` is the spectral gap).

The ``as_written`` modes of the line and exponential builders reproduce
formulas that are stochastic only for particular agent counts; they attach
validation warnings instead of silently fixing the matrix. The
``metropolis``/``normalized`` modes assign Metropolis-Hastings weights
``w_ij = 1 / (1 + max(deg_i, deg_j))`` on the same connectivity and are
always doubly stochastic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidInputError,
    InvalidMatrixError,
    InvalidParameterError,
    InvalidTopologyError,
    TopologyGenerationError,
)
from .seeding import mix64

__all__ = [
    "WeightMatrix",
    "ConnectivityReport",
    "TopologyValidation",
    "build_ring",
    "build_line",
    "build_exponential",
    "build_dynamic_mh",
    "custom_matrix",
    "spectral_report",
    "mix",
    "validate",
]

STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True)
class WeightMatrix:
    """An n-by-n gossip weight matrix with its construction tag.

    ``warnings`` carries validation messages attached at build time
    (only the ``as_written`` modes produce any). ``entries`` is
    read-only; builders are the only writers.
    """

    n: int
    entries: np.ndarray
    kind: str
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.shape != (self.n, self.n):
            raise InvalidInputError(
                f"weight matrix shape {entries.shape} does not match n={self.n}"
            )
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)


@dataclass(frozen=True)
class ConnectivityReport:
    """Extreme non-unit eigenvalues of a symmetric weight matrix."""

    rho: float
    lambda2: float
    lambda_n: float
    spectral_gap: float
    connected: bool


@dataclass(frozen=True)
class TopologyValidation:
    """Outcome of structural checks on a weight matrix."""

    ok: bool
    violations: tuple[str, ...]
    nonnegative: bool
    symmetric: bool
    doubly_stochastic: bool
    connected: bool


def _metropolis(adjacency: np.ndarray) -> np.ndarray:
    """Metropolis-Hastings weights on a symmetric 0/1 adjacency.

    Edge weight 1/(1 + max(deg_i, deg_j)); self-weights fill each row to
    one, which makes the result symmetric and doubly stochastic.
    """
    n = adjacency.shape[0]
    deg = adjacency.sum(axis=1)
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if adjacency[i, j]:
                w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    return w


def _is_connected(mask: np.ndarray) -> bool:
    """Breadth-first reachability on the off-diagonal nonzero pattern."""
    n = mask.shape[0]
    if n <= 1:
        return True
    seen = np.zeros(n, dtype=bool)
    frontier = [0]
    seen[0] = True
    while frontier:
        i = frontier.pop()
        for j in np.nonzero(mask[i])[0]:
            if not seen[j]:
                seen[j] = True
                frontier.append(j)
    return bool(seen.all())


def build_ring(n: int, a: float) -> WeightMatrix:
    """Ring of ``n`` agents with self-weight ``a``.

    Each agent keeps weight ``a`` and sends ``(1 - a) / 2`` to each of its
    two ring neighbors. For ``n == 3`` the ring is the complete graph.

    Parameters
    ----------
    n : int
        Number of agents, at least 3.
    a : float
        Self-weight, strictly between 0 and 1.
    """
    if n < 3:
        raise InvalidTopologyError(f"ring requires n >= 3, got {n}")
    if not 0.0 < a < 1.0:
        raise InvalidParameterError(f"ring self-weight must be in (0, 1), got {a}")
    w = np.zeros((n, n))
    half = (1.0 - a) / 2.0
    for i in range(n):
        w[i, i] = a
        w[i, (i + 1) % n] += half
        w[i, (i - 1) % n] += half
    return WeightMatrix(n=n, entries=w, kind="ring")


def build_line(n: int, mode: str = "metropolis") -> WeightMatrix:
    """Path graph on ``n`` agents.

    ``metropolis`` assigns Metropolis-Hastings weights on the path edges
    and is doubly stochastic for every ``n``. ``as_written`` reproduces
    the literal endpoint/interior rule (endpoints send weight 1 to their
    single neighbor, interior agents 0.5 to each side); for ``n >= 3``
    that matrix is neither symmetric nor doubly stochastic, and the
    corresponding warnings are attached rather than fixed.
    """
    if n < 2:
        raise InvalidTopologyError(f"line requires n >= 2, got {n}")
    if mode == "metropolis":
        adj = np.zeros((n, n), dtype=bool)
        for i in range(n - 1):
            adj[i, i + 1] = adj[i + 1, i] = True
        return WeightMatrix(n=n, entries=_metropolis(adj), kind="line")
    if mode != "as_written":
        raise InvalidParameterError(f"unknown line mode {mode!r}")
    w = np.zeros((n, n))
    w[0, 1] = 1.0
    w[n - 1, n - 2] = 1.0
    for i in range(1, n - 1):
        w[i, i - 1] = w[i, i + 1] = 0.5
    warnings = _structural_warnings(w)
    return WeightMatrix(n=n, entries=w, kind="line", warnings=warnings)


_EXP_OFFSETS = tuple(2**j - 1 for j in range(1, 5))  # 1, 3, 7, 15


def build_exponential(n: int, mode: str = "normalized") -> WeightMatrix:
    """Exponential graph: neighbors at offsets ±(2^j - 1) mod n, j = 1..4.

    ``as_written`` gives every distinct neighbor weight 1/8 and the agent
    itself 1/4; the rows sum to one only when the offsets resolve to
    exactly six distinct neighbors, so a row-sum warning is attached for
    other agent counts. ``normalized`` puts Metropolis-Hastings weights
    on the same adjacency and always satisfies the invariants.
    """
    if n < 2:
        raise InvalidTopologyError(f"exponential requires n >= 2, got {n}")
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for off in _EXP_OFFSETS:
            for j in ((i + off) % n, (i - off) % n):
                if j != i:
                    adj[i, j] = True
    if mode == "normalized":
        return WeightMatrix(n=n, entries=_metropolis(adj), kind="exponential")
    if mode != "as_written":
        raise InvalidParameterError(f"unknown exponential mode {mode!r}")
    w = np.where(adj, 0.125, 0.0)
    np.fill_diagonal(w, 0.25)
    warnings = _structural_warnings(w)
    return WeightMatrix(n=n, entries=w, kind="exponential", warnings=warnings)


def build_dynamic_mh(n: int, m_min: int, m_max: int, round_seed: int) -> WeightMatrix:
    """Random connected graph with Metropolis-Hastings weights.

    Draws a neighbor count ``m`` uniformly from ``[m_min, m_max]``, lets
    every agent pick ``m`` random partners, symmetrizes, and retries
    (bounded) until the graph is connected. Deterministic in
    ``round_seed``.
    """
    if not 1 <= m_min <= m_max <= n - 1:
        raise InvalidParameterError(
            f"need 1 <= m_min <= m_max <= n-1, got m_min={m_min}, m_max={m_max}, n={n}"
        )
    rng = np.random.Generator(np.random.Philox(key=mix64(round_seed, 0xD15C)))
    for _ in range(256):
        m = int(rng.integers(m_min, m_max + 1))
        adj = np.zeros((n, n), dtype=bool)
        for i in range(n):
            others = np.delete(np.arange(n), i)
            picks = rng.choice(others, size=m, replace=False)
            adj[i, picks] = True
            adj[picks, i] = True
        if _is_connected(adj):
            return WeightMatrix(n=n, entries=_metropolis(adj), kind="dynamic_mh")
    raise TopologyGenerationError(
        f"no connected graph with m in [{m_min}, {m_max}] after 256 attempts"
    )


def custom_matrix(entries, warn: bool = True) -> WeightMatrix:
    """Wrap explicit entries as a weight matrix, attaching any warnings."""
    entries = np.asarray(entries, dtype=float)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise InvalidInputError(f"custom weight matrix must be square, got {entries.shape}")
    warnings = _structural_warnings(entries) if warn else ()
    return WeightMatrix(n=entries.shape[0], entries=entries, kind="custom", warnings=warnings)


def _structural_warnings(w: np.ndarray) -> tuple[str, ...]:
    out = []
    if (w < 0).any():
        out.append("negative entries present")
    if not np.array_equal(w, w.T):
        out.append("matrix is not symmetric")
    rows = w.sum(axis=1)
    cols = w.sum(axis=0)
    if np.abs(rows - 1.0).max() > STOCHASTIC_TOL or np.abs(cols - 1.0).max() > STOCHASTIC_TOL:
        out.append(
            "matrix is not doubly stochastic: row sums in "
            f"[{rows.min():.6g}, {rows.max():.6g}], column sums in "
            f"[{cols.min():.6g}, {cols.max():.6g}]"
        )
    return tuple(out)


def validate(w: WeightMatrix) -> TopologyValidation:
    """Check nonnegativity, symmetry, row/column sums, and connectivity."""
    m = w.entries
    violations: list[str] = []
    nonnegative = bool((m >= 0).all())
    if not nonnegative:
        violations.append("nonnegativity: negative entries present")
    symmetric = bool(np.allclose(m, m.T, rtol=0.0, atol=STOCHASTIC_TOL))
    if not symmetric:
        violations.append("symmetry: entries[i][j] != entries[j][i]")
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    doubly = bool(
        np.abs(rows - 1.0).max() <= STOCHASTIC_TOL
        and np.abs(cols - 1.0).max() <= STOCHASTIC_TOL
    )
    if not doubly:
        violations.append(
            "double stochasticity: row sums in "
            f"[{rows.min():.6g}, {rows.max():.6g}], column sums in "
            f"[{cols.min():.6g}, {cols.max():.6g}]"
        )
    off_diag = m.copy()
    np.fill_diagonal(off_diag, 0.0)
    connected = _is_connected(off_diag != 0.0)
    if not connected:
        violations.append("connectivity: communication graph is disconnected")
    return TopologyValidation(
        ok=not violations,
        violations=tuple(violations),
        nonnegative=nonnegative,
        symmetric=symmetric,
        doubly_stochastic=doubly,
        connected=connected,
    )


def spectral_report(w: WeightMatrix) -> ConnectivityReport:
    """Connectivity parameter ``rho = max(|lambda_2|, |lambda_n|)``.

    Requires a symmetric matrix so that the spectrum is real; eigenvalues
    come from a symmetric eigensolver. ``rho == 1`` signals a
    disconnected (or otherwise non-contracting) topology and is reported,
    not raised.
    """
    m = w.entries
    if not np.allclose(m, m.T, rtol=0.0, atol=STOCHASTIC_TOL):
        raise InvalidMatrixError("spectral report requires a symmetric matrix")
    if w.n == 1:
        return ConnectivityReport(rho=0.0, lambda2=0.0, lambda_n=0.0, spectral_gap=1.0, connected=True)
    evals = np.linalg.eigvalsh(m)  # ascending
    lambda2 = float(evals[-2])
    lambda_n = float(evals[0])
    rho = max(abs(lambda2), abs(lambda_n))
    off_diag = m.copy()
    np.fill_diagonal(off_diag, 0.0)
    return ConnectivityReport(
        rho=rho,
        lambda2=lambda2,
        lambda_n=lambda_n,
        spectral_gap=1.0 - rho,
        connected=_is_connected(off_diag != 0.0),
    )


def mix(w: WeightMatrix, per_agent_vectors) -> np.ndarray:
    """One gossip round: ``out[i] = sum_j w_ij * in[j]``.

    Accepts a list of n equal-length vectors or an (n, d) array and
    returns an (n, d) array. For doubly stochastic weights the swarm
    average is preserved exactly up to rounding.
    """
    v = np.asarray(per_agent_vectors, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2 or v.shape[0] != w.n:
        raise InvalidInputError(
            f"expected {w.n} equal-length vectors, got array of shape {v.shape}"
        )
    return w.entries @ v
