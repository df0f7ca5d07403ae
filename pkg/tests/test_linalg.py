import numpy as np
import pytest

from avtlab.errors import DegenerateInputError, ShapeError
from avtlab.linalg import power_iteration


def test_identity_tiebreak():
    lam, v = power_iteration(np.eye(2))
    assert lam == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(v, [1.0, 0.0])


def test_closed_form_2x2():
    g = np.array([[2.0, 1.0], [1.0, 1.0]])
    lam, v = power_iteration(g)
    assert lam == pytest.approx((3 + np.sqrt(5)) / 2, abs=1e-10)
    assert np.allclose(v, [0.8507, 0.5257], atol=1e-4)


@pytest.mark.parametrize("seed", range(8))
def test_matches_dense_eigensolver(seed):
    rng = np.random.default_rng(seed)
    c = rng.integers(2, 7)
    rows = rng.uniform(0, 1, (rng.integers(3, 12), c))
    g = rows.T @ rows
    lam, v = power_iteration(g)
    w, vecs = np.linalg.eigh(g)
    assert lam == pytest.approx(w[-1], rel=1e-9)
    assert abs(v @ vecs[:, -1]) > 1 - 1e-8


def test_perron_orientation_and_norm():
    rng = np.random.default_rng(99)
    for _ in range(20):
        rows = rng.uniform(0, 1, (6, 4))
        _, v = power_iteration(rows.T @ rows)
        assert np.all(v >= 0)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12


def test_residual_bound():
    rng = np.random.default_rng(5)
    rows = rng.uniform(0, 1, (10, 5))
    g = rows.T @ rows
    lam, v = power_iteration(g)
    assert np.linalg.norm(g @ v - lam * v) <= 1e-8 * max(1.0, lam)


def test_block_tie_prefers_first_axis_vector():
    g = np.diag([3.0, 3.0, 1.0])
    lam, v = power_iteration(g)
    assert lam == pytest.approx(3.0)
    assert np.array_equal(v, [1.0, 0.0, 0.0])


def test_all_zero_rejected():
    with pytest.raises(DegenerateInputError):
        power_iteration(np.zeros((3, 3)))


def test_asymmetric_rejected():
    with pytest.raises(DegenerateInputError):
        power_iteration(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_nonsquare_rejected():
    with pytest.raises(ShapeError):
        power_iteration(np.ones((2, 3)))
