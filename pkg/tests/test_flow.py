import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import flowdistill as fd
from flowdistill.errors import ConfigError
from flowdistill.flow import fm_loss_node

from helpers import rand_model
from oracles import max_grad_rel_error

finite = st.floats(-1e6, 1e6, allow_nan=False)
unit = st.floats(0.0, 1.0, allow_nan=False)


class TestInterpolate:
    def test_left_endpoint(self):
        assert fd.interpolate(np.array([-3.0]), np.array([0.5]), 0.0) == -3.0

    def test_right_endpoint(self):
        assert fd.interpolate(np.array([-3.0]), np.array([0.5]), 1.0) == 0.5

    def test_midpoint(self):
        assert fd.interpolate(np.array([3.0]), np.array([-1.0]), 0.5) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(finite, finite, unit)
    def test_endpoint_identities_exact(self, x0, x1, t):
        a, b = np.array([x0]), np.array([x1])
        assert fd.interpolate(a, b, 0.0)[0] == x0
        assert fd.interpolate(a, b, 1.0)[0] == x1
        mid = fd.interpolate(a, b, t)[0]
        assert min(x0, x1) - 1e-6 <= mid <= max(x0, x1) + 1e-6 or np.isclose(
            mid, (1 - t) * x0 + t * x1
        )

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fd.interpolate(np.array([1.0, 2.0]), np.array([1.0]), 0.5)

    def test_time_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            fd.interpolate(np.array([1.0]), np.array([1.0]), 1.2)


class TestTimeGrid:
    def test_uniform_grid_endpoints_exact(self):
        grid = fd.TimeGrid.uniform(50)
        assert grid.times[0] == 0.0 and grid.times[-1] == 1.0 and grid.n == 50

    def test_index_of_exact_time(self):
        grid = fd.TimeGrid.uniform(50)
        assert grid.index_of(0.2) == 10

    def test_off_grid_time_rejected(self):
        grid = fd.TimeGrid.uniform(50)
        with pytest.raises(ConfigError):
            grid.index_of(0.123)

    def test_bad_endpoints_rejected(self):
        with pytest.raises(ConfigError):
            fd.TimeGrid(np.array([0.1, 1.0]))


class TestFmLoss:
    def test_perfect_prediction_gives_zero(self):
        # output layer forced so the model returns exactly x1 - x0 == 0
        model = fd.build_velocity_model(1, 8, 1, seed=0)
        batch = (np.array([[2.0]]), np.array([[2.0]]), np.array([0.3]))
        assert fd.fm_loss(model, batch) == 0.0

    def test_zero_model_single_element(self):
        model = fd.build_velocity_model(1, 8, 1, seed=0)
        for t in (0.0, 0.4, 1.0):
            batch = [(np.array([3.0]), np.array([1.0]), t)]
            assert fd.fm_loss(model, batch) == pytest.approx(4.0)

    def test_empty_batch_rejected(self):
        model = fd.build_velocity_model(1, 8, 1, seed=0)
        with pytest.raises(ValueError):
            fd.fm_loss(model, [])

    def test_non_negative_and_zero_iff_match(self):
        model = rand_model(seed=21)
        rng = np.random.default_rng(0)
        batch = (rng.standard_normal((16, 1)), rng.standard_normal((16, 1)), rng.random(16))
        assert fd.fm_loss(model, batch) > 0.0

    def test_gradient_vs_finite_differences(self):
        model = rand_model(seed=22)
        rng = np.random.default_rng(1)
        batch = (3 * rng.standard_normal((8, 1)), rng.standard_normal((8, 1)), rng.random(8))
        _, grads = fd.value_and_grad(
            lambda ps: fm_loss_node(ps, batch, model.R), model.params
        )
        coords = rng.integers(0, model.params.size, 32)
        assert max_grad_rel_error(
            lambda ps: fd.fm_loss(model.with_params(ps), batch),
            model.params, grads, coords,
        ) < 1e-4


class TestEulerStep:
    def test_constant_field(self):
        model = _constant_field_model(2.0)
        out = fd.euler_step(model, np.array([0.0]), 1.0, 0.5)
        assert out[0] == pytest.approx(-1.0, abs=1e-12)

    def test_no_move_when_times_equal(self):
        model = rand_model(seed=23)
        x = np.array([0.7])
        assert np.array_equal(fd.euler_step(model, x, 0.5, 0.5), x)

    def test_single_datum_field_lands_exactly(self):
        # v(x, t) = (x - a) / t carries any x to a in one step t -> 0
        a = 1.25
        for x, t in [(4.0, 0.8), (-2.0, 0.31), (a, 0.999)]:
            v = (x - a) / t
            assert x + (0.0 - t) * v == pytest.approx(a, abs=1e-12)

    def test_step_matches_eval_velocity(self):
        model = rand_model(seed=24)
        x, t = np.array([4.0]), 0.8
        v = fd.eval_velocity(model, x, t)
        assert np.array_equal(fd.euler_step(model, x, t, 0.4), x + (0.4 - t) * v)


class TestDenoise:
    def test_single_step_grid_equals_euler_step(self, quick_teacher):
        z = np.array([0.45])
        traj = fd.denoise(quick_teacher, z, fd.TimeGrid.uniform(1))
        direct = fd.euler_step(quick_teacher, z, 1.0, 0.0)
        assert np.array_equal(traj.endpoint, direct)

    def test_constant_field_telescopes(self):
        model = _constant_field_model(1.5)
        z = np.array([2.0])
        for n in (1, 4, 10):
            traj = fd.denoise(model, z, fd.TimeGrid.uniform(n))
            assert traj.endpoint[0] == pytest.approx(2.0 - 1.5, abs=1e-12)

    def test_stores_every_state_and_counts_evals(self, quick_teacher):
        grid = fd.TimeGrid.uniform(10)
        before = quick_teacher.eval_count
        traj = fd.denoise(quick_teacher, np.array([-0.3]), grid)
        assert quick_teacher.eval_count - before == 10
        assert traj.states.shape == (11, 1)

    def test_euler_recurrence_exact_on_trajectory(self, quick_teacher):
        grid = fd.TimeGrid.uniform(10)
        traj = fd.denoise(quick_teacher, np.array([1.2]), grid)
        for j in range(10, 0, -1):
            v = fd.eval_velocity(quick_teacher, traj.states[j], grid.times[j])
            dt = grid.times[j - 1] - grid.times[j]
            assert np.allclose(
                traj.states[j - 1] - traj.states[j], dt * v, rtol=0, atol=1e-12
            )

    def test_batch_matches_recurrence_tolerance(self, quick_teacher):
        grid = fd.TimeGrid.uniform(10)
        Z = np.random.default_rng(3).standard_normal((5, 1))
        states = fd.denoise_batch(quick_teacher, Z, grid)
        for i in range(5):
            traj = fd.Trajectory(grid=grid, states=states[:, i, :], noise_seed=None,
                                 fingerprint=quick_teacher.fingerprint())
            assert traj.max_recurrence_error(quick_teacher) <= 1e-9


class TestTrainTeacher:
    def test_zero_iterations_rejected(self, two_point_data):
        with pytest.raises(ConfigError):
            fd.train_teacher(two_point_data, iterations=0, batch_size=8, lr=1e-3, seed=0)

    def test_equal_seeds_identical_params(self, two_point_data):
        a, la = fd.train_teacher(two_point_data, 20, 16, 1e-3, seed=9, H=8, R=1)
        b, lb = fd.train_teacher(two_point_data, 20, 16, 1e-3, seed=9, H=8, R=1)
        assert a.params.equal(b.params)
        assert np.array_equal(la, lb)

    def test_different_seeds_differ(self, two_point_data):
        a, _ = fd.train_teacher(two_point_data, 20, 16, 1e-3, seed=9, H=8, R=1)
        b, _ = fd.train_teacher(two_point_data, 20, 16, 1e-3, seed=10, H=8, R=1)
        assert not a.params.equal(b.params)

    def test_loss_history_length_matches_iterations(self, two_point_data):
        _, losses = fd.train_teacher(two_point_data, 25, 16, 1e-3, seed=0, H=8, R=1)
        assert losses.shape == (25,)
        assert np.all(np.isfinite(losses))

    def test_training_reduces_loss(self, two_point_data):
        _, losses = fd.train_teacher(two_point_data, 300, 128, 1e-3, seed=1, H=16, R=2)
        assert losses[-50:].mean() < losses[:50].mean()

    def test_single_point_dataset_one_step_landing(self):
        # with a one-point dataset the conditional velocity at t=1 is
        # x - a, so a single Euler step from any noise draw lands on a
        data = fd.ToyDataset(np.array([2.0]))
        teacher, _ = fd.train_teacher(data, 1200, 256, 1e-3, seed=4, H=16, R=2)
        rng = np.random.default_rng(0)
        Z = rng.standard_normal((256, 1))
        landed = Z + (0.0 - 1.0) * fd.eval_velocity(teacher, Z, 1.0)
        assert np.mean(np.abs(landed - 2.0)) < 0.25


def _constant_field_model(c: float):
    """Model rigged to output the constant c: zero hidden influence via
    the output layer, constant via the output bias."""
    model = fd.build_velocity_model(1, 8, 1, seed=0)
    tensors = list(model.params.tensors)
    tensors[-1] = np.array([c])
    return model.with_params(fd.ParamSet(model.params.names, tuple(tensors)))
