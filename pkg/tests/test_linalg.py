"""Tests for the 'tunekit.linalg' module."""

import numpy as np
import pytest

from tunekit.exceptions import NonFiniteError, ShapeError
from tunekit.linalg import truncated_svd


def low_rank_matrix(rows, cols, spectrum, seed=0):
    """A matrix with the given singular values and random singular vectors."""
    rng = np.random.default_rng(seed)
    left, _ = np.linalg.qr(rng.normal(size=(rows, len(spectrum))))
    right, _ = np.linalg.qr(rng.normal(size=(cols, len(spectrum))))
    return left @ np.diag(spectrum) @ right.T


def test_truncated_svd_matches_full_svd():
    """Test the leading singular values against numpy's full decomposition."""
    mat = low_rank_matrix(12, 8, [9.0, 5.0, 2.0, 1.0, 0.5])
    result = truncated_svd(mat, 3, seed=1)
    assert result.converged
    assert result.U.shape == (12, 3)
    assert result.V.shape == (8, 3)
    np.testing.assert_allclose(result.S, [9.0, 5.0, 2.0], rtol=1e-8)
    assert np.all(np.diff(result.S) <= 0)
    # orthonormal columns:
    np.testing.assert_allclose(result.U.T @ result.U, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(result.V.T @ result.V, np.eye(3), atol=1e-10)


def test_truncated_svd_exact_rank():
    """Test that a full-rank decomposition of a low-rank matrix rebuilds it."""
    mat = low_rank_matrix(6, 10, [4.0, 3.0])
    result = truncated_svd(mat, 2)
    rebuilt = result.U @ np.diag(result.S) @ result.V.T
    np.testing.assert_allclose(rebuilt, mat, atol=1e-8)


def test_truncated_svd_is_deterministic():
    """Test that the same seed yields identical results."""
    mat = np.random.default_rng(3).normal(size=(7, 5))
    first = truncated_svd(mat, 2, seed=5)
    second = truncated_svd(mat, 2, seed=5)
    np.testing.assert_array_equal(first.U, second.U)
    np.testing.assert_array_equal(first.S, second.S)


def test_truncated_svd_not_converged(caplog):
    """Test that hitting the iteration cap is logged and the iterate returned."""
    mat = np.random.default_rng(4).normal(size=(20, 20))
    result = truncated_svd(mat, 4, max_iter=2)
    assert not result.converged
    assert result.S.shape == (4,)
    assert "no convergence" in caplog.text


def test_truncated_svd_errors():
    """Test the refused inputs."""
    with pytest.raises(ShapeError):
        truncated_svd(np.ones((3, 4)), 0)
    with pytest.raises(ShapeError):
        truncated_svd(np.ones((3, 4)), 4)
    with pytest.raises(ShapeError):
        truncated_svd(np.ones(4), 1)
    with pytest.raises(NonFiniteError):
        truncated_svd(np.array([[1.0, np.nan], [0.0, 1.0]]), 1)
