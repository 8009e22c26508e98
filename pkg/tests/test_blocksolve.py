import numpy as np
import pytest

from vmhe.blocksolve import solve_arrowhead, solve_tridiag


def random_spd_arrowhead(rng, k, n, p):
    """Build a dense SPD arrowhead matrix plus its block decomposition."""
    dim = k * n + p
    j = rng.normal(size=(dim + 20, dim))
    # zero the couplings that the block structure does not represent
    full = j.T @ j + 0.5 * np.eye(dim)
    for a in range(k):
        for b in range(k):
            if abs(a - b) > 1:
                full[a * n:(a + 1) * n, b * n:(b + 1) * n] = 0.0
    diag = np.array([full[i * n:(i + 1) * n, i * n:(i + 1) * n] for i in range(k)])
    off = np.array([full[(i + 1) * n:(i + 2) * n, i * n:(i + 1) * n] for i in range(k - 1)])
    cross = np.array([full[i * n:(i + 1) * n, k * n:] for i in range(k)])
    pmat = full[k * n:, k * n:]
    # make the structured matrix SPD by adding diagonal dominance
    for i in range(k):
        diag[i] += n * np.eye(n) * np.abs(full).max() * 0.1
    pmat = pmat + p * np.eye(p) * np.abs(full).max() * 0.1
    return diag, off, cross, pmat


def assemble_dense(diag, off, cross, pmat):
    k, n, _ = diag.shape
    p = pmat.shape[0]
    dim = k * n + p
    full = np.zeros((dim, dim))
    for i in range(k):
        full[i * n:(i + 1) * n, i * n:(i + 1) * n] = diag[i]
        full[i * n:(i + 1) * n, k * n:] = cross[i]
        full[k * n:, i * n:(i + 1) * n] = cross[i].T
    for i in range(k - 1):
        full[(i + 1) * n:(i + 2) * n, i * n:(i + 1) * n] = off[i]
        full[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = off[i].T
    full[k * n:, k * n:] = pmat
    return full


@pytest.mark.parametrize("k,n,p", [(4, 3, 2), (10, 13, 12), (2, 5, 0), (1, 4, 3)])
def test_matches_dense_solve(k, n, p):
    rng = np.random.default_rng(42 + k)
    diag, off, cross, pmat = random_spd_arrowhead(rng, k, n, p)
    rhs_x = rng.normal(size=(k, n))
    rhs_p = rng.normal(size=p)
    dx, dp = solve_arrowhead(diag, off, cross, pmat, rhs_x, rhs_p)

    full = assemble_dense(diag, off, cross, pmat)
    sol = np.linalg.solve(full, np.concatenate([rhs_x.ravel(), rhs_p]))
    np.testing.assert_allclose(dx.ravel(), sol[: k * n], rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(dp, sol[k * n:], rtol=1e-9, atol=1e-10)


def test_tridiag_multi_rhs():
    rng = np.random.default_rng(1)
    diag, off, _, _ = random_spd_arrowhead(rng, 6, 4, 1)
    rhs = rng.normal(size=(6, 4, 3))
    x = solve_tridiag(diag, off, rhs)
    full = assemble_dense(diag, off, np.zeros((6, 4, 0)), np.zeros((0, 0)))
    for col in range(3):
        sol = np.linalg.solve(full, rhs[:, :, col].ravel())
        np.testing.assert_allclose(x[:, :, col].ravel(), sol, rtol=1e-9, atol=1e-10)


def test_singular_raises():
    diag = np.zeros((2, 2, 2))
    off = np.zeros((1, 2, 2))
    with pytest.raises(np.linalg.LinAlgError):
        solve_tridiag(diag, off, np.ones((2, 2, 1)))
