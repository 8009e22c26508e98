"""Block-tridiagonal-plus-dense-tail solver for the estimator normal equations.

The Gauss-Newton system over a window couples consecutive state nodes
(block tridiagonal) and every node to the shared parameter vector (a dense
arrowhead tail):

    [ T  U ] [dx]   [bx]
    [ U' S ] [dp] = [bp]

T is symmetric positive definite block tridiagonal with K blocks of size
n, U stacks the per-node parameter couplings (K, n, p), S is (p, p).
The solve runs a block Thomas elimination for T and a Schur complement
for the parameter tail: O(K n^3 + K n^2 p + p^3).
"""

from __future__ import annotations

import numpy as np


def solve_tridiag(diag: np.ndarray, off: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve T X = B for symmetric block-tridiagonal T.

    diag: (K, n, n) diagonal blocks; off: (K-1, n, n) sub-diagonal blocks,
    off[k] being block (k+1, k); rhs: (K, n, m). Returns (K, n, m).

    Pivot blocks are explicitly inverted once and reused by the forward
    elimination and the back substitution; blocks are small and damped, so
    the inverse costs nothing in accuracy here.
    """
    k_blocks = diag.shape[0]
    inv = np.linalg.inv
    pivots = [None] * k_blocks
    b_hat = np.empty_like(rhs)
    pivots[0] = inv(diag[0])
    b_hat[0] = rhs[0]
    for k in range(1, k_blocks):
        prev_inv = pivots[k - 1]
        o = off[k - 1]
        c_hat = diag[k] - o @ (prev_inv @ o.T)
        pivots[k] = inv(c_hat)
        b_hat[k] = rhs[k] - o @ (prev_inv @ b_hat[k - 1])
    x = np.empty_like(rhs)
    x[-1] = pivots[-1] @ b_hat[-1]
    for k in range(k_blocks - 2, -1, -1):
        x[k] = pivots[k] @ (b_hat[k] - off[k].T @ x[k + 1])
    return x


def solve_arrowhead(diag: np.ndarray, off: np.ndarray, cross: np.ndarray,
                    pmat: np.ndarray, rhs_x: np.ndarray,
                    rhs_p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve the full arrowhead system; returns (dx (K, n), dp (p,)).

    cross: (K, n, p) per-node parameter coupling U; pmat: (p, p) tail S.
    Raises numpy.linalg.LinAlgError when a pivot is singular.
    """
    k_blocks, n = rhs_x.shape
    p = rhs_p.shape[0]
    if p == 0:
        dx = solve_tridiag(diag, off, rhs_x[:, :, None])[:, :, 0]
        return dx, np.zeros(0)

    combined = np.concatenate([rhs_x[:, :, None], cross], axis=2)
    w = solve_tridiag(diag, off, combined)           # T^-1 [bx | U]
    w_b = w[:, :, 0]
    w_u = w[:, :, 1:]

    schur = pmat - np.einsum("knp,knq->pq", cross, w_u)
    rhs_schur = rhs_p - np.einsum("knp,kn->p", cross, w_b)
    dp = np.linalg.solve(schur, rhs_schur)
    dx = w_b - np.einsum("knp,p->kn", w_u, dp)
    return dx, dp
