"""Hyperparameter tuning for per-coordinate l2-regularized logistic regression.

The upper variable ``x`` holds log regularization weights (one per
feature); the lower variable ``y`` holds the classifier. Agent ``i``
owns a private train/validation split with features drawn from a
zero-mean Gaussian whose standard deviation equals ``i + 1`` (agents are
0-indexed here; the feature scale follows the 1-indexed convention), so
agents are structurally heterogeneous. Labels come from a planted
parameter: ``label = sign(<feat, tau_star> + noise_rate * beta)`` with a
per-sample Gaussian ``beta``.

Per-agent objectives (losses are means over the split, for scale
stability across dataset sizes):

    g_i(x, y) = mean_train log(1 + exp(-label <feat, y>)) + 0.5 <y, exp(x) * y>
    f_i(x, y) = mean_val   log(1 + exp(-label <feat, y>))
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InvalidInputError, InvalidParameterError
from ..seeding import mix64
from .base import BilevelProblem

__all__ = ["AgentDataset", "generate_logistic_data", "LogisticHyperoptInstance", "export_datasets_csv"]


@dataclass(frozen=True)
class AgentDataset:
    train_features: np.ndarray
    train_labels: np.ndarray
    val_features: np.ndarray
    val_labels: np.ndarray


def _loss(z: np.ndarray) -> np.ndarray:
    # log(1 + exp(-z)) without overflow
    return np.logaddexp(0.0, -z)


def _dloss(z: np.ndarray) -> np.ndarray:
    # d/dz log(1 + exp(-z)) = -1 / (1 + exp(z))
    return -1.0 / (1.0 + np.exp(np.minimum(z, 500.0)))


def generate_logistic_data(
    n_agents: int,
    feature_dim: int,
    train_per_agent: int,
    val_per_agent: int,
    noise_rate: float,
    seed: int,
) -> tuple[list[AgentDataset], np.ndarray]:
    """Plant a ground-truth parameter and draw per-agent datasets.

    Returns the datasets and the planted parameter. Bit-identical for
    equal arguments.
    """
    if feature_dim < 1:
        raise InvalidParameterError("feature_dim must be >= 1")
    if train_per_agent < 2 or val_per_agent < 2:
        raise InvalidParameterError("need at least 2 samples per split")
    rng = np.random.Generator(np.random.Philox(key=mix64(seed, 0xDA7A)))
    tau_star = rng.standard_normal(feature_dim)
    datasets = []
    for i in range(n_agents):
        scale = float(i + 1)
        total = train_per_agent + val_per_agent
        feats = rng.standard_normal((total, feature_dim)) * scale
        beta = rng.standard_normal(total)
        margin = feats @ tau_star + noise_rate * beta
        labels = np.where(margin >= 0.0, 1.0, -1.0)
        datasets.append(
            AgentDataset(
                train_features=feats[:train_per_agent],
                train_labels=labels[:train_per_agent],
                val_features=feats[train_per_agent:],
                val_labels=labels[train_per_agent:],
            )
        )
    return datasets, tau_star


class LogisticHyperoptInstance(BilevelProblem):
    """Bilevel regularization-weight tuning on synthetic heterogeneous data."""

    def __init__(
        self,
        n_agents: int = 8,
        feature_dim: int = 10,
        train_per_agent: int = 64,
        val_per_agent: int = 64,
        noise_rate: float = 0.1,
        dataset_seed: int = 0,
    ):
        self.n_agents = n_agents
        self.dx = feature_dim
        self.dy = feature_dim
        self.feature_dim = feature_dim
        self.noise_rate = noise_rate
        self.dataset_seed = dataset_seed
        self.name = "logistic_hyperopt"
        self.F_lower_bound = 0.0
        self.datasets, self.tau_star = generate_logistic_data(
            n_agents, feature_dim, train_per_agent, val_per_agent, noise_rate, dataset_seed
        )
        self.L1, self.L2 = self._estimate_smoothness()

    # oracles --------------------------------------------------------------

    def f_value(self, agent, x, y):
        self.check_agent(agent)
        self.check_dims(x, y)
        d = self.datasets[agent]
        return float(np.mean(_loss(d.val_labels * (d.val_features @ y))))

    def g_value(self, agent, x, y):
        self.check_agent(agent)
        self.check_dims(x, y)
        d = self.datasets[agent]
        data = float(np.mean(_loss(d.train_labels * (d.train_features @ y))))
        return data + 0.5 * float(np.dot(np.exp(x), y * y))

    def grad_f(self, agent, x, y):
        self.check_agent(agent)
        self.check_dims(x, y)
        d = self.datasets[agent]
        z = d.val_labels * (d.val_features @ y)
        gy = (d.val_features * (_dloss(z) * d.val_labels)[:, None]).mean(axis=0)
        return np.zeros(self.dx), gy

    def grad_g(self, agent, x, y):
        self.check_agent(agent)
        self.check_dims(x, y)
        d = self.datasets[agent]
        z = d.train_labels * (d.train_features @ y)
        gy = (d.train_features * (_dloss(z) * d.train_labels)[:, None]).mean(axis=0)
        reg = np.exp(x)
        return 0.5 * reg * y * y, gy + reg * y

    # mini-batch paths -------------------------------------------------------

    def batch_indices(self, agent, which, batch_size, rng):
        self.check_agent(agent)
        d = self.datasets[agent]
        size = len(d.val_labels) if which == "val" else len(d.train_labels)
        return rng.integers(0, size, size=batch_size)

    def batch_grad_f(self, agent, x, y, indices):
        d = self.datasets[agent]
        feats = d.val_features[indices]
        labels = d.val_labels[indices]
        z = labels * (feats @ y)
        gy = (feats * (_dloss(z) * labels)[:, None]).mean(axis=0)
        return np.zeros(self.dx), gy

    def batch_grad_g(self, agent, x, y, indices):
        d = self.datasets[agent]
        feats = d.train_features[indices]
        labels = d.train_labels[indices]
        z = labels * (feats @ y)
        gy = (feats * (_dloss(z) * labels)[:, None]).mean(axis=0)
        reg = np.exp(x)
        return 0.5 * reg * y * y, gy + reg * y

    # smoothness -------------------------------------------------------------

    def _estimate_smoothness(self) -> tuple[float, float]:
        """Spectral norms of sampled joint Hessians, with a 1.1 margin.

        Power iteration on central-difference Hessian-vector secants at a
        few reference points. The exponential regularizer has unbounded
        curvature far from the origin, so these constants are local to
        the sampled region.
        """
        rng = np.random.Generator(np.random.Philox(key=mix64(self.dataset_seed, 0x5111)))
        dim = self.dx + self.dy

        def joint_grad(which, agent, p):
            x, y = p[: self.dx], p[self.dx :]
            grad = self.grad_f(agent, x, y) if which == "f" else self.grad_g(agent, x, y)
            return np.concatenate(grad)

        def spectral_norm(which, agent, p):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            est = 0.0
            fd = 1e-5
            for _ in range(30):
                hv = (joint_grad(which, agent, p + fd * v) - joint_grad(which, agent, p - fd * v)) / (2 * fd)
                est = np.linalg.norm(hv)
                if est == 0.0:
                    return 0.0
                v = hv / est
            return est

        l1 = l2 = 0.0
        for agent in range(self.n_agents):
            for _ in range(2):
                p = rng.standard_normal(dim) * 0.5
                l1 = max(l1, spectral_norm("f", agent, p))
                l2 = max(l2, spectral_norm("g", agent, p))
        return 1.1 * l1, 1.1 * l2


def export_datasets_csv(datasets: list[AgentDataset], out_dir: str | Path) -> list[Path]:
    """Write one CSV per agent per split: feature_0..feature_{s-1}, label."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, d in enumerate(datasets):
        for split, feats, labels in (
            ("train", d.train_features, d.train_labels),
            ("val", d.val_features, d.val_labels),
        ):
            path = out_dir / f"agent{i:03d}_{split}.csv"
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                s = feats.shape[1]
                writer.writerow([f"feature_{j}" for j in range(s)] + ["label"])
                for row, label in zip(feats, labels):
                    writer.writerow([format(v, ".17g") for v in row] + [str(int(label))])
            written.append(path)
    return written
