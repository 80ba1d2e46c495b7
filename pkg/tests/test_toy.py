import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigrain.toy import ToyConfig, accuracy, batch_order, hinge_step, mirror, toy_compare, toy_data, toy_run


class TestPieces:
    def test_mirror_axes(self):
        p = np.array([[1.0, 2.0], [-3.0, 4.0]])
        np.testing.assert_array_equal(mirror(p, "x"), [[-1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(mirror(p, "y"), [[1.0, -2.0], [-3.0, -4.0]])

    def test_data_layout(self):
        cfg = ToyConfig(n_per_class=5)
        d = toy_data(cfg, 0)
        assert d.points.shape == (20, 2)
        np.testing.assert_array_equal(d.points[10:], mirror(d.points[:10], "x"))
        np.testing.assert_array_equal(d.labels[10:], d.labels[:10])
        assert len(d.test_points) == cfg.n_test

    def test_hinge_step_hand_computed(self):
        w = np.array([0.5, 0.0])
        x = np.array([[1.0, 1.0], [4.0, 0.0]])
        y = np.array([1.0, 1.0])
        # first point has margin 0.5 (active), second 2.0 (inactive)
        np.testing.assert_allclose(hinge_step(w, x, y, 0.1), [0.5 + 0.1 * 0.5, 0.05])

    def test_hinge_kink_is_inactive(self):
        w = np.array([1.0, 0.0])
        np.testing.assert_array_equal(hinge_step(w, np.array([[1.0, 0.0]]), np.array([1.0]), 1.0), w)

    def test_accuracy(self):
        assert accuracy(np.array([0.0, 1.0]), np.array([[0, 1.0], [0, -1.0], [0, 2.0]]), np.array([1, 1, 1])) == 2 / 3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 2**31))
    def test_both_orders_consume_every_point_once(self, n, seed):
        for mode in ("uniform", "paired"):
            rows = batch_order(mode, 2 * n, np.random.default_rng(seed))
            assert rows.shape == (2 * n, 2)
            np.testing.assert_array_equal(np.sort(rows.ravel()), np.arange(4 * n))

    def test_paired_rows_are_point_and_copy(self):
        rows = batch_order("paired", 6, np.random.default_rng(0))
        np.testing.assert_array_equal(rows[:, 1], rows[:, 0] + 6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ToyConfig(batch_size=4)
        with pytest.raises(ValueError):
            ToyConfig(flip_axis="z")
        with pytest.raises(ValueError):
            batch_order("shuffled", 4, np.random.default_rng(0))


class TestRuns:
    def test_zero_lr_is_flat(self):
        cfg = ToyConfig(lr=0.0)
        d = toy_data(cfg, 3)
        curve = toy_run(cfg, "uniform", 3)
        np.testing.assert_array_equal(curve, accuracy(d.w0, d.test_points, d.test_labels))

    def test_separated_classes(self):
        cfg = ToyConfig(mean=100.0, runs=5)
        for mode in ("uniform", "paired"):
            for r in range(5):
                assert toy_run(cfg, mode, r)[5] == 1.0

    def test_forced_identical_order_gives_zero_difference(self):
        cmp = toy_compare(ToyConfig(runs=1), force_order="uniform")
        np.testing.assert_array_equal(cmp.differences, 0.0)

    def test_swapping_modes_negates_difference(self):
        cfg = ToyConfig(runs=10)
        a = toy_compare(cfg, ("paired", "uniform")).summary()
        b = toy_compare(cfg, ("uniform", "paired")).summary()
        assert a["mean_difference"] == -b["mean_difference"]
        assert a["t_statistic"] == -b["t_statistic"]

    def test_same_data_for_both_modes(self):
        cfg = ToyConfig(lr=0.0, runs=4)
        cmp = toy_compare(cfg)
        np.testing.assert_array_equal(cmp.curves["paired"], cmp.curves["uniform"])

    def test_deterministic(self):
        cfg = ToyConfig(runs=3)
        assert toy_compare(cfg).to_csv() == toy_compare(cfg).to_csv()

    def test_csv_layout(self):
        text = toy_compare(ToyConfig(runs=2, n_per_class=4)).to_csv().splitlines()
        assert text[0] == "iteration,paired_mean,paired_std,uniform_mean,uniform_std"
        assert len(text) == 1 + 8

    def test_default_regression_values(self):
        # frozen from the reference run of the default configuration
        s = toy_compare(ToyConfig()).summary()
        np.testing.assert_allclose(s["final_mean_paired"], 0.84083, atol=1e-12)
        np.testing.assert_allclose(s["final_mean_uniform"], 0.840255, atol=1e-12)
        assert s["mean_difference"] > 0

    def test_below_bayes_rate_on_average(self):
        s = toy_compare(ToyConfig(runs=20)).summary()
        # the Bayes rate of the default model is Phi(1) = 0.8413
        assert s["final_mean_paired"] < 0.8413 + 0.01
        assert s["final_mean_uniform"] < 0.8413 + 0.01
