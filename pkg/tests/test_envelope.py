import numpy as np
import pytest

from dsbosim.envelope import (
    EnvelopeConfig,
    grad_moreau,
    grad_psi,
    moreau_value,
    psi_value,
    solve_theta_star,
    swarm_metrics,
)
from dsbosim.errors import InnerSolveError, InvalidParameterError
from dsbosim.problems import LogisticHyperoptInstance, QuadraticToyInstance
from dsbosim.problems.base import BilevelProblem
from dsbosim.strategies import SwarmState


class ScalarQuadratic(BilevelProblem):
    """Single agent, g(x, y) = 0.5 y^2, f(x, y) = 0.5 x^2; solved by hand."""

    def __init__(self, closed_form=True):
        self.n_agents = 1
        self.dx = 1
        self.dy = 1
        self.L1 = 1.0
        self.L2 = 1.0
        self.closed_form = closed_form

    def f_value(self, agent, x, y):
        return 0.5 * float(x[0] ** 2)

    def g_value(self, agent, x, y):
        return 0.5 * float(y[0] ** 2)

    def grad_f(self, agent, x, y):
        return x.copy(), np.zeros(1)

    def grad_g(self, agent, x, y):
        return np.zeros(1), y.copy()

    def prox_lower(self, x, y, gamma):
        if not self.closed_form:
            return None
        return y / (1.0 + gamma)


@pytest.fixture(scope="module")
def toy():
    return QuadraticToyInstance()


@pytest.fixture(scope="module")
def cfg10():
    return EnvelopeConfig(gamma=10.0)


class TestThetaStar:
    def test_scalar_hand_solution(self):
        prob = ScalarQuadratic()
        cfg = EnvelopeConfig(gamma=0.25)
        theta = solve_theta_star(prob, np.zeros(1), np.ones(1), cfg)
        np.testing.assert_allclose(theta, 0.8, atol=1e-12)

    def test_iterative_matches_closed_form(self):
        cfg = EnvelopeConfig(gamma=0.25, inner_tol=1e-12)
        closed = solve_theta_star(ScalarQuadratic(), np.zeros(1), np.ones(1), cfg)
        iterative = solve_theta_star(ScalarQuadratic(closed_form=False), np.zeros(1), np.ones(1), cfg)
        np.testing.assert_allclose(iterative, closed, atol=1e-10)

    def test_fixed_point_when_lower_gradient_vanishes(self, toy, cfg10):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(toy.dx)
        r = float(np.mean(toy.a) / np.mean(toy.b**2))
        y = np.concatenate([r * x, rng.standard_normal(toy.block_dim)])
        theta = solve_theta_star(toy, x, y, cfg10)
        np.testing.assert_allclose(theta, y, atol=1e-12)

    def test_closed_form_residual(self, toy, cfg10):
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.standard_normal(toy.dx)
            y = rng.standard_normal(toy.dy)
            theta = solve_theta_star(toy, x, y, cfg10)
            _, gy = toy.grad_G(x, theta)
            residual = np.linalg.norm(gy + (theta - y) / cfg10.gamma)
            assert residual <= 1e-10

    def test_iteration_cap_raises_with_residual(self):
        # anisotropic curvature so plain gradient descent cannot finish
        # in a couple of iterations
        class Aniso(BilevelProblem):
            n_agents, dx, dy, L1, L2 = 1, 1, 2, 1.0, 1.0

            def g_value(self, agent, x, y):
                return 0.5 * float(y[0] ** 2 + 0.1 * y[1] ** 2)

            def grad_g(self, agent, x, y):
                return np.zeros(1), np.array([y[0], 0.1 * y[1]])

            def f_value(self, agent, x, y):
                return 0.0

            def grad_f(self, agent, x, y):
                return np.zeros(1), np.zeros(2)

        cfg = EnvelopeConfig(gamma=0.25, inner_tol=1e-14, inner_max_iters=3)
        with pytest.raises(InnerSolveError) as err:
            solve_theta_star(Aniso(), np.zeros(1), np.ones(2), cfg)
        assert err.value.residual > 0

    def test_doubling_iterations_is_stable(self):
        # once converged, a larger cap cannot move theta* beyond tol/eta
        inst = LogisticHyperoptInstance(n_agents=2, feature_dim=3, train_per_agent=8, val_per_agent=8)
        gamma = 0.25 / (2 * inst.L2)
        eta = 1.0 / gamma - inst.L2
        rng = np.random.default_rng(2)
        x = rng.standard_normal(inst.dx) * 0.1
        y = rng.standard_normal(inst.dy) * 0.1
        a = solve_theta_star(inst, x, y, EnvelopeConfig(gamma=gamma, inner_max_iters=5000))
        b = solve_theta_star(inst, x, y, EnvelopeConfig(gamma=gamma, inner_max_iters=10000))
        assert np.linalg.norm(a - b) <= 1e-10 / eta

    def test_empirical_minimizer_lipschitz(self, toy, cfg10):
        # the prox map of the quadratic instance has sensitivity ~1; a
        # fitted ratio stays well below a loose cap
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(50):
            p1 = rng.standard_normal(toy.dx + toy.dy)
            p2 = p1 + rng.standard_normal(toy.dx + toy.dy) * 0.1
            t1 = solve_theta_star(toy, p1[: toy.dx], p1[toy.dx :], cfg10)
            t2 = solve_theta_star(toy, p2[: toy.dx], p2[toy.dx :], cfg10)
            worst = max(worst, np.linalg.norm(t1 - t2) / np.linalg.norm(p1 - p2))
        assert np.isfinite(worst) and worst < 2.0


class TestMoreauValue:
    def test_scalar_value(self):
        prob = ScalarQuadratic()
        cfg = EnvelopeConfig(gamma=0.25)
        v = moreau_value(prob, np.zeros(1), np.ones(1), cfg)
        np.testing.assert_allclose(v, 0.4, atol=1e-12)
        assert prob.g_value(0, np.zeros(1), np.ones(1)) - v >= 0.1 - 1e-12

    def test_equals_g_at_stationary_lower_point(self, toy, cfg10):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(toy.dx)
        r = float(np.mean(toy.a) / np.mean(toy.b**2))
        y = np.concatenate([r * x, rng.standard_normal(toy.block_dim)])
        np.testing.assert_allclose(moreau_value(toy, x, y, cfg10), toy.G_value(x, y), atol=1e-8)

    def test_domination_sweep(self, toy, cfg10):
        rng = np.random.default_rng(5)
        for _ in range(200):
            x = rng.standard_normal(toy.dx) * 2
            y = rng.standard_normal(toy.dy) * 2
            assert toy.G_value(x, y) - moreau_value(toy, x, y, cfg10) >= -1e-10


class TestGradients:
    def test_scalar_envelope_gradient(self):
        prob = ScalarQuadratic()
        cfg = EnvelopeConfig(gamma=0.25)
        gx, gy = grad_moreau(prob, np.zeros(1), np.ones(1), cfg)
        np.testing.assert_allclose(gy, 0.8, atol=1e-12)
        np.testing.assert_allclose(gx, 0.0, atol=1e-12)

    def test_zero_lower_gradient_gives_zero_gy(self, toy, cfg10):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(toy.dx)
        r = float(np.mean(toy.a) / np.mean(toy.b**2))
        y = np.concatenate([r * x, rng.standard_normal(toy.block_dim)])
        _, gy = grad_moreau(toy, x, y, cfg10)
        np.testing.assert_allclose(gy, 0.0, atol=1e-12)

    @pytest.mark.parametrize("gamma", [10.0, 0.1])
    def test_envelope_gradient_matches_finite_differences(self, toy, gamma):
        cfg = EnvelopeConfig(gamma=gamma)
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = rng.standard_normal(toy.dx)
            y = rng.standard_normal(toy.dy)
            gx, gy = grad_moreau(toy, x, y, cfg)
            exact = np.concatenate([gx, gy])
            point = np.concatenate([x, y])
            h = 1e-6 * (1 + np.linalg.norm(point))
            fd = np.zeros_like(point)
            for j in range(point.size):
                e = np.zeros_like(point)
                e[j] = h
                fd[j] = (
                    moreau_value(toy, (point + e)[: toy.dx], (point + e)[toy.dx :], cfg)
                    - moreau_value(toy, (point - e)[: toy.dx], (point - e)[toy.dx :], cfg)
                ) / (2 * h)
            assert np.linalg.norm(fd - exact) <= 1e-5 * (1 + np.linalg.norm(exact))

    def test_psi_zero_mu_at_stationary_point(self, toy, cfg10):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(toy.dx)
        r = float(np.mean(toy.a) / np.mean(toy.b**2))
        y = np.concatenate([r * x, rng.standard_normal(toy.block_dim)])
        gx, gy = grad_psi(toy, x, y, 0.0, cfg10)
        np.testing.assert_allclose(gx, 0.0, atol=1e-12)
        np.testing.assert_allclose(gy, 0.0, atol=1e-12)

    def test_psi_lower_bound(self, toy, cfg10):
        rng = np.random.default_rng(9)
        for _ in range(20):
            x = rng.standard_normal(toy.dx)
            y = rng.standard_normal(toy.dy)
            mu = float(rng.uniform(0, 2))
            assert psi_value(toy, x, y, mu, cfg10) >= mu * toy.F_value(x, y) - 1e-10

    def test_negative_mu_rejected(self, toy, cfg10):
        with pytest.raises(InvalidParameterError):
            psi_value(toy, np.zeros(toy.dx), np.zeros(toy.dy), -0.1, cfg10)


class TestConfig:
    def test_gamma_range_warning(self, toy):
        assert EnvelopeConfig(gamma=10.0).range_warning(toy) is not None
        good = 0.5 / (2 * toy.L2)
        assert EnvelopeConfig(gamma=good).range_warning(toy) is None

    def test_invalid_gamma(self):
        with pytest.raises(InvalidParameterError):
            EnvelopeConfig(gamma=0.0)


class TestSwarmMetrics:
    def test_all_zero_at_consensus_stationary_point(self, toy, cfg10):
        # mu = 0 with the lower level stationary makes psi stationary too
        rng = np.random.default_rng(10)
        x = rng.standard_normal(toy.dx)
        r = float(np.mean(toy.a) / np.mean(toy.b**2))
        y = np.concatenate([r * x, rng.standard_normal(toy.block_dim)])
        theta = y.copy()
        swarm = SwarmState(
            x=np.tile(x, (5, 1)), y=np.tile(y, (5, 1)), theta=np.tile(theta, (5, 1))
        )
        rec = swarm_metrics(toy, swarm, 0.0, cfg10)
        # squared norms of float dust from averaging identical rows
        assert rec.grad_psi_sq <= 1e-24
        assert rec.consensus_total <= 1e-24

    def test_two_agent_consensus(self, toy, cfg10):
        v = np.zeros(toy.dx)
        v[0] = 1.5
        swarm = SwarmState(
            x=np.stack([v, -v]),
            y=np.zeros((2, toy.dy)),
            theta=np.zeros((2, toy.dy)),
        )
        rec = swarm_metrics(toy, swarm, 0.1, cfg10)
        np.testing.assert_allclose(rec.consensus_x, np.sum(v**2), atol=1e-14)

    def test_consensus_matches_pairwise_double_loop(self, toy, cfg10):
        rng = np.random.default_rng(11)
        n = 6
        swarm = SwarmState(
            x=rng.standard_normal((n, toy.dx)),
            y=rng.standard_normal((n, toy.dy)),
            theta=rng.standard_normal((n, toy.dy)),
        )
        rec = swarm_metrics(toy, swarm, 0.05, cfg10)

        def pairwise(block):
            total = 0.0
            for i in range(n):
                for j in range(n):
                    total += np.sum((block[i] - block[j]) ** 2)
            return total / (2 * n * n)

        brute = pairwise(swarm.x) + pairwise(swarm.y) + pairwise(swarm.theta)
        np.testing.assert_allclose(rec.consensus_total, brute, atol=1e-12)
        assert rec.consensus_total == rec.consensus_x + rec.consensus_y + rec.consensus_theta
