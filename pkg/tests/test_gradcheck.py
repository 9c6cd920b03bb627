import numpy as np

from safn.gradcheck import check_gradient, numeric_gradient, relative_error


def _scaled_square(scale):
    return lambda x: float(scale * 0.5 * np.sum(x**2))


def test_small_gradients_are_held_to_relative_accuracy():
    x = np.array([0.5, 0.8])
    fn = _scaled_square(1e-7)
    assert check_gradient(fn, x, 1e-7 * x).passed()

    # off by 2x, yet every difference is below 1e-7
    report = check_gradient(fn, x, 2e-7 * x)
    assert not report.passed()
    assert report.max_relative_error > 0.4
    assert report.worst_index == 1


def test_finite_difference_noise_around_zero_passes():
    x = np.full(3, np.pi / 2)
    report = check_gradient(lambda v: float(np.sum(np.sin(v))), x, np.cos(x))
    assert report.passed()
    assert report.max_abs_error < 1e-8


def test_report_tolerances_are_adjustable():
    x = np.array([1.0, 2.0])
    report = check_gradient(_scaled_square(1.0), x, x * (1 + 1e-3))
    assert not report.passed()
    assert report.passed(tolerance=1e-2)
    assert report.checked == 2


def test_numeric_gradient_restores_input_and_respects_indices():
    x = np.array([[1.0, -2.0], [3.0, 0.5]])
    before = x.copy()
    grads = numeric_gradient(_scaled_square(1.0), x, indices=[1, 2])
    assert sorted(grads) == [1, 2]
    np.testing.assert_allclose([grads[1], grads[2]], [-2.0, 3.0], rtol=1e-8)
    np.testing.assert_array_equal(x, before)


def test_relative_error_floor_is_tiny():
    assert relative_error(2e-6, 1e-6) == 0.5
    assert relative_error(0.0, 0.0) == 0.0
