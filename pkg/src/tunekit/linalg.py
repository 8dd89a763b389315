"""Truncated singular value decomposition by seeded subspace iteration."""

from typing import NamedTuple

import numpy as np
from loguru import logger as log

from .exceptions import NonFiniteError, ShapeError


class SvdResult(NamedTuple):
    """Leading singular triplets of a matrix plus a convergence flag."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    converged: bool


def truncated_svd(matrix, rank, tol=1e-10, seed=0, max_iter=500):
    """Compute the `rank` leading singular triplets of a matrix.

    Runs a block power (subspace) iteration alternating between the column
    and row spaces, followed by a Rayleigh-Ritz step on the small `r x r`
    core. Everything is done in 64-bit floats, the start block comes from a
    generator seeded with `seed`, so results are deterministic.

    Parameters
    ----------
    matrix : array-like
        The `m x n` input, must be finite.
    rank : int
        Number of singular triplets, `1 <= rank <= min(m, n)`.
    tol : float, optional
        Iteration stops once no singular value estimate changes by more than
        `tol` (relative to the largest one), by default 1e-10.
    seed : int, optional
        Seed for the random start block, by default 0.
    max_iter : int, optional
        Iteration cap, by default 500.

    Returns
    -------
    SvdResult
        `U` (`m x r`), `S` (`r`, non-increasing), `V` (`n x r`) and a flag
        telling if the tolerance was reached. If not, the best iterate is
        returned and a warning is logged.

    Raises
    ------
    ShapeError
        Raised if `rank` is out of range or the input isn't a matrix.
    NonFiniteError
        Raised if the input contains NaN or Inf.
    """
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"truncated_svd: expected a matrix, got shape {mat.shape}")
    rows, cols = mat.shape
    if rank < 1 or rank > min(rows, cols):
        msg = f"truncated_svd: rank {rank} out of range for shape {mat.shape}"
        log.error(msg)
        raise ShapeError(msg)
    if not np.all(np.isfinite(mat)):
        raise NonFiniteError("truncated_svd: input contains non-finite values")

    rng = np.random.default_rng(seed)
    right, _ = np.linalg.qr(rng.standard_normal((cols, rank)))
    previous = None
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        left, _ = np.linalg.qr(mat @ right)
        right, _ = np.linalg.qr(mat.T @ left)
        estimate = np.linalg.svd(left.T @ mat @ right, compute_uv=False)
        if previous is not None:
            change = np.max(np.abs(estimate - previous))
            if change <= tol * max(estimate[0], 1e-300):
                converged = True
                break
        previous = estimate

    core_u, sigma, core_vt = np.linalg.svd(left.T @ mat @ right)
    if not converged:
        log.warning(
            "truncated_svd: no convergence after {} iterations (shape {}, rank {})",
            max_iter,
            mat.shape,
            rank,
        )
    else:
        log.trace("truncated_svd converged after {} iterations", iteration)
    return SvdResult(left @ core_u, sigma, right @ core_vt.T, converged)
