import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.errors import ConfigError, DataError, IntegrationDivergedError, ShapeError
from flowcast.flow import (
    NoiseSchedule,
    aggregate,
    broadcast_target,
    cfm_loss,
    integrate,
    interp_times,
    sample_path,
    target_velocity,
)


def stacks(rng, T=3, shape=(4, 4, 4)):
    return rng.random((T, *shape)), rng.random((T, *shape))


class TestBroadcast:
    def test_copies(self, rng):
        v = rng.random((2, 2, 2))
        out = broadcast_target(v, 3)
        assert out.shape == (3, 2, 2, 2)
        for i in range(3):
            assert np.array_equal(out[i], v)

    def test_degenerate(self, rng):
        v = rng.random((2, 2, 2))
        assert np.array_equal(broadcast_target(v, 1)[0], v)

    def test_residuals_algebra(self, rng):
        ctx = rng.random((3, 2, 2, 2))
        v = rng.random((2, 2, 2))
        resid = broadcast_target(v, 3) - ctx
        for i in range(3):
            assert np.allclose(resid[i], v - ctx[i])

    def test_rejects_empty(self, rng):
        with pytest.raises(DataError):
            broadcast_target(rng.random((2, 2, 2)), 0)


class TestSamplePath:
    def test_endpoints(self, rng):
        x0, x1 = stacks(rng)
        assert np.array_equal(sample_path(x0, x1, 0.0).x_tau, x0)
        assert np.array_equal(sample_path(x0, x1, 1.0).x_tau, x1)

    def test_midpoint(self):
        x0 = np.zeros((2, 2, 2, 2))
        x1 = np.full((2, 2, 2, 2), 2.0)
        assert np.array_equal(sample_path(x0, x1, 0.5).x_tau, np.ones((2, 2, 2, 2)))

    def test_noise_is_seeded(self, rng):
        x0, x1 = stacks(rng)
        a = sample_path(x0, x1, 0.5, NoiseSchedule(sigma0=0.1, seed=9)).x_tau
        b = sample_path(x0, x1, 0.5, NoiseSchedule(sigma0=0.1, seed=9)).x_tau
        assert np.array_equal(a, b)
        assert not np.array_equal(a, sample_path(x0, x1, 0.5).x_tau)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            sample_path(rng.random((2, 2, 2, 2)), rng.random((3, 2, 2, 2)), 0.5)

    def test_path_derivative_matches_velocity(self, rng):
        # central difference of the noiseless path vs the constant velocity
        x0, x1 = stacks(rng)
        u = target_velocity(x0, x1)
        h = 1e-4
        fd = (sample_path(x0, x1, 0.5 + h).x_tau - sample_path(x0, x1, 0.5 - h).x_tau) / (2 * h)
        assert np.max(np.abs(fd - u)) < 1e-6


class TestTargetVelocity:
    def test_stationary(self, rng):
        x0, _ = stacks(rng)
        assert np.array_equal(target_velocity(x0, x0), np.zeros_like(x0))

    def test_definition(self, rng):
        _, x1 = stacks(rng)
        assert np.array_equal(target_velocity(np.zeros_like(x1), x1), x1)

    def test_constant_in_flow_step(self, rng):
        # the velocity does not depend on where along the path it is queried
        x0, x1 = stacks(rng)
        assert np.array_equal(target_velocity(x0, x1), target_velocity(x0, x1))


class TestCfmLoss:
    def test_perfect_prediction(self, rng):
        _, u = stacks(rng)
        assert cfm_loss(u, u) == 0.0

    def test_constant_offset(self, rng):
        _, u = stacks(rng)
        assert cfm_loss(u + 0.25, u) == pytest.approx(0.25**2, rel=1e-12)

    def test_literal_resummation_oracle(self, rng):
        pred, u = stacks(rng, T=2, shape=(3, 3, 3))
        total = 0.0
        count = 0
        for i in range(pred.shape[0]):
            for x in range(pred.shape[1]):
                for y in range(pred.shape[2]):
                    for z in range(pred.shape[3]):
                        d = float(pred[i, x, y, z]) - float(u[i, x, y, z])
                        total += d * d
                        count += 1
        assert cfm_loss(pred, u) == pytest.approx(total / count, abs=1e-12)


class TestInterpTimes:
    def test_linear(self):
        out = interp_times(np.array([0.0, 1.0]), 3.0, 0.5)
        assert out.tolist() == [1.5, 2.0]

    def test_endpoint_collapse(self):
        assert interp_times(np.array([0.0, 1.0]), 3.0, 1.0).tolist() == [3.0, 3.0]

    def test_identity_at_zero(self):
        assert interp_times(np.array([0.2, 0.9]), 3.0, 0.0).tolist() == [0.2, 0.9]

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(0.1, 5),
        st.floats(-3, 3),
        st.floats(0, 1),
        st.integers(0, 2**31 - 1),
    )
    def test_commutes_with_affine_reparam(self, a, b, tau, seed):
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, 10, size=4)
        t_star = float(t.max() + 1)
        lhs = interp_times(a * t + b, a * t_star + b, tau)
        rhs = a * interp_times(t, t_star, tau) + b
        assert np.allclose(lhs, rhs, atol=1e-9)


class TestIntegrate:
    def test_constant_field_is_exact(self, rng):
        x0, x1 = stacks(rng)
        u = x1 - x0
        for n in (1, 5, 10, 100):
            out = integrate(lambda x, c: u, x0, lambda tau: tau, n)
            assert np.max(np.abs(out - x1)) < 1e-6

    def test_zero_field_is_stationary(self, rng):
        x0, _ = stacks(rng)
        out = integrate(lambda x, c: np.zeros_like(x), x0, lambda tau: tau, 7)
        assert np.array_equal(out, x0)

    def test_single_step_definition(self, rng):
        x0, x1 = stacks(rng)
        field = lambda x, c: 0.5 * x + c
        out = integrate(field, x0, lambda tau: tau + 1.0, 1)
        assert np.allclose(out, x0 + field(x0, 1.0))

    def test_divergence_detected(self, rng):
        x0, _ = stacks(rng)
        bad = lambda x, c: np.full_like(x, np.inf)
        with pytest.raises(IntegrationDivergedError):
            integrate(bad, x0, lambda tau: tau, 3)

    def test_step_count_validated(self, rng):
        x0, _ = stacks(rng)
        with pytest.raises(ConfigError):
            integrate(lambda x, c: x, x0, lambda tau: tau, 0)

    def test_conditioning_receives_grid_points(self, rng):
        x0, _ = stacks(rng)
        seen = []
        integrate(lambda x, c: np.zeros_like(x), x0, lambda tau: seen.append(tau), 4)
        assert seen == [0.0, 0.25, 0.5, 0.75]


class TestAggregate:
    def test_consensus(self, rng):
        v = rng.random((2, 2, 2))
        # power-of-two counts make the mean exact; odd counts round by 1 ulp
        stack4 = np.stack([v, v, v, v])
        assert np.array_equal(aggregate(stack4, "mean"), v)
        assert np.array_equal(aggregate(stack4, "last"), v)
        stack3 = np.stack([v, v, v])
        assert np.allclose(aggregate(stack3, "mean"), v, rtol=1e-15)
        assert np.array_equal(aggregate(stack3, "last"), v)

    def test_mean_arithmetic(self):
        stack = np.stack([np.zeros((2, 2, 2)), np.full((2, 2, 2), 2.0)])
        assert np.array_equal(aggregate(stack, "mean"), np.ones((2, 2, 2)))

    def test_last(self, rng):
        a, b = rng.random((2, 2, 2)), rng.random((2, 2, 2))
        assert np.array_equal(aggregate(np.stack([a, b]), "last"), b)

    def test_bad_mode(self, rng):
        with pytest.raises(ConfigError):
            aggregate(rng.random((2, 2, 2, 2)), "median")
