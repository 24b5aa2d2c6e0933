import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stacklqg.augment import augment, build_check_system, spd_inverse
from stacklqg.errors import GridError, InversionError
from stacklqg.integrators import MatrixPath, TimeGrid
from stacklqg.problem import build_example_debt


def test_scalar_blocks(scalar_spec):
    aug = augment(scalar_spec)
    np.testing.assert_array_equal(aug.Stilde, [[-1, 0], [0, 0]])
    np.testing.assert_array_equal(aug.Shat, [[0, -1], [-1, 1]])
    np.testing.assert_array_equal(aug.Qbold, [[1, 1], [1, 0]])
    np.testing.assert_array_equal(aug.Abold, np.zeros((2, 2)))
    np.testing.assert_array_equal(aug.gamma_mean, [0, 0])
    expected = np.zeros((4, 4))
    expected[np.ix_([0, 2], [0, 2])] = 1.0
    np.testing.assert_array_equal(aug.Xi0, expected)


def test_blocks_from_first_principles(debt_spec):
    spec = debt_spec.replace(R_FF=[[2.0]], R_LL=[[3.0]], R_LF=[[0.7]])
    aug = augment(spec)
    n = 2
    BF, BL = spec.B_F, spec.B_L
    S_L = BL @ BL.T / 3.0
    S_F = BF @ BF.T / 2.0
    S_FLF = BF @ BF.T * 0.7 / 4.0
    np.testing.assert_allclose(aug.Stilde[:n, :n], -S_L)
    np.testing.assert_allclose(aug.Shat[:n, n:], -S_F)
    np.testing.assert_allclose(aug.Shat[n:, n:], S_FLF)
    np.testing.assert_allclose(aug.S, aug.Stilde + aug.Shat)
    assert aug.H.shape == (2, 4)
    np.testing.assert_array_equal(aug.H_F[:, n:], 0)


def test_no_leader_input(scalar_spec):
    aug = augment(scalar_spec.replace(B_L=[[0.0]]))
    np.testing.assert_array_equal(aug.Stilde, 0)


@pytest.mark.parametrize("field", ["R_FF", "R_LL"])
def test_singular_weight(scalar_spec, field):
    with pytest.raises(InversionError):
        augment(scalar_spec.replace(**{field: [[0.0]]}))


def test_ill_conditioned_weight(rng):
    spec = build_example_debt()
    spec = spec.replace(B_F=np.ones((2, 2)), R_FF=np.diag([1.0, 1e-14]), R_LF=np.eye(2))
    with pytest.raises(InversionError):
        augment(spec)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
def test_spd_inverse(vals):
    A = np.array(vals).reshape(3, 3)
    M = A @ A.T + np.eye(3)
    np.testing.assert_allclose(spd_inverse(M) @ M, np.eye(3), atol=1e-9)


def _check(aug, grid, Pdag, Sigma):
    return build_check_system(aug, MatrixPath(grid, Pdag), MatrixPath(grid, Sigma))


def test_check_system_zero_sigma(rng):
    aug = augment(build_example_debt())
    g = TimeGrid(1.0, 4)
    Pdag = rng.standard_normal((5, 4, 4))
    cs = _check(aug, g, Pdag, np.zeros((5, 4, 4)))
    np.testing.assert_array_equal(cs.Gdag.values, 0)
    np.testing.assert_array_equal(cs.Gddag.values, 0)
    np.testing.assert_array_equal(cs.F.values[:, 4:, 4:], np.broadcast_to(aug.Abold, (5, 4, 4)))


def test_check_system_zero_pdag(rng):
    aug = augment(build_example_debt())
    g = TimeGrid(1.0, 4)
    S = rng.standard_normal((5, 4, 4))
    cs = _check(aug, g, np.zeros((5, 4, 4)), S)
    np.testing.assert_array_equal(cs.F.values[:, :4, :4], np.broadcast_to(aug.Abold, (5, 4, 4)))
    np.testing.assert_array_equal(cs.F.values[:, :4, 4:], 0)
    assert cs.Dcheck.shape == (8, 1) and cs.Hcheck_F.shape == (1, 8)


def test_check_system_at_terminal(scalar_spec):
    aug = augment(scalar_spec)
    g = TimeGrid(1.0, 2)
    cs = _check(aug, g, np.broadcast_to(aug.Gbold, (3, 2, 2)), np.ones((3, 2, 2)))
    np.testing.assert_array_equal(cs.F[-1][:2, :2], aug.Abold)


def test_check_system_grid_mismatch(scalar_spec):
    aug = augment(scalar_spec)
    a = MatrixPath(TimeGrid(1.0, 2), np.zeros((3, 2, 2)))
    b = MatrixPath(TimeGrid(1.0, 3), np.zeros((4, 2, 2)))
    with pytest.raises(GridError):
        build_check_system(aug, a, b)
