import numpy as np
import pytest

from rdaocp.mesh import build_uniform
from rdaocp.quadrature import exponents
from rdaocp.reconstruction import (ReconstructionError, assemble_reconstruction, build_patch,
                                   patch_threshold, solve_local_ls)


def exact_coefficients(mesh, m, a, b):
    """Coefficients of x^a y^b in the scaled monomial basis of every element."""
    from math import comb
    xk = mesh.barycenters
    hk = mesh.diameters
    out = np.zeros((mesh.n_elements, len(exponents(m))))
    for j, (p, q) in enumerate(exponents(m)):
        if p > a or q > b:
            continue
        out[:, j] = (comb(a, p) * comb(b, q) * xk[:, 0] ** (a - p) * xk[:, 1] ** (b - q)
                     * hk ** (p + q))
    return out


@pytest.mark.parametrize("m, expected", [(1, 5), (2, 9), (3, 15)])
def test_threshold(m, expected):
    assert patch_threshold(m) == expected


def test_threshold_rejects_zero():
    with pytest.raises(ValueError):
        patch_threshold(0)


def test_trivial_patch():
    mesh = build_uniform(4)
    p = build_patch(mesh, 10, 1)
    assert p.elements == [10] and p.depth == 0


def _closure(mesh, k, depth):
    s = {k}
    for _ in range(depth):
        s |= {int(j) for e in s for j in mesh.neighbors[e] if j >= 0}
    return s


def test_patch_matches_hand_closure():
    mesh = build_uniform(4)
    k = 2 * (1 * 4 + 1)  # lower element of an interior square
    s1 = _closure(mesh, k, 1)
    s2 = _closure(mesh, k, 2)
    p = build_patch(mesh, k, 5)
    expect = s1 if len(s1) >= 5 else s2
    assert set(p.elements) == expect
    assert p.elements[0] == k


def test_patch_is_monotone_in_threshold():
    mesh = build_uniform(4)
    for k in range(mesh.n_elements):
        small = set(build_patch(mesh, k, 5).elements)
        big = set(build_patch(mesh, k, 15).elements)
        assert small <= big


def test_patch_saturation_error():
    with pytest.raises(ReconstructionError, match="at least"):
        build_patch(build_uniform(1), 0, 5)


def test_constant_samples():
    mesh = build_uniform(4)
    for m in (1, 2, 3):
        p = build_patch(mesh, 7, patch_threshold(m))
        c = solve_local_ls(mesh, p, np.full(mesh.n_elements, 2.5), m)
        np.testing.assert_allclose(c, np.r_[2.5, np.zeros(len(c) - 1)], atol=1e-13)


def test_linear_samples_reproduced():
    mesh = build_uniform(4)
    q = mesh.barycenters[:, 0]
    p = build_patch(mesh, 9, 5)
    c = solve_local_ls(mesh, p, q, 1)
    np.testing.assert_allclose(c, exact_coefficients(mesh, 1, 1, 0)[9], atol=1e-13)


def test_matches_kkt_oracle():
    mesh = build_uniform(4)
    rng = np.random.default_rng(3)
    w = rng.standard_normal(mesh.n_elements)
    k = 11
    p = build_patch(mesh, k, 5)
    got = solve_local_ls(mesh, p, w, 1)
    # dense KKT system of the equality-constrained least-squares problem
    xk = mesh.barycenters[k]
    hk = mesh.diameters[k]
    d = (mesh.barycenters[p.elements] - xk) / hk
    A = np.column_stack([np.ones(len(d)), d])
    c = np.array([1.0, 0.0, 0.0])
    K = np.zeros((4, 4))
    K[:3, :3] = 2 * A.T @ A
    K[:3, 3] = c
    K[3, :3] = c
    rhs = np.r_[2 * A.T @ w[p.elements], w[k]]
    oracle = np.linalg.solve(K, rhs)[:3]
    np.testing.assert_allclose(got, oracle, atol=1e-10)


def test_ones_give_constant_field():
    mesh = build_uniform(5)
    R = assemble_reconstruction(mesh, 2)
    coef = R.apply(np.ones(mesh.n_elements))
    np.testing.assert_allclose(coef[:, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(coef[:, 1:], 0.0, atol=1e-12)


def test_affine_reproduction():
    mesh = build_uniform(6)
    R = assemble_reconstruction(mesh, 1)
    x, y = mesh.barycenters.T
    coef = R.apply(x + 2 * y)
    exact = exact_coefficients(mesh, 1, 1, 0) + 2 * exact_coefficients(mesh, 1, 0, 1)
    assert np.max(np.abs(coef - exact)) <= 1e-11


def test_shape_matches_dof_count():
    mesh = build_uniform(4)
    R = assemble_reconstruction(mesh, 3)
    assert R.matrix.shape == (mesh.n_elements * 10, mesh.n_elements)
    assert R.n_elements == mesh.n_elements


@pytest.mark.parametrize("m", [1, 2, 3])
def test_constraint_exactness(m):
    mesh = build_uniform(6)
    R = assemble_reconstruction(mesh, m)
    rng = np.random.default_rng(m)
    W = rng.standard_normal((mesh.n_elements, 100))
    # basis value at x_K is 1 for the constant and 0 otherwise
    at_center = (R.matrix @ W).reshape(mesh.n_elements, R.dim, 100)[:, 0, :]
    assert np.max(np.abs(at_center - W)) <= 1e-12


@pytest.mark.parametrize("n", [4, 8])
@pytest.mark.parametrize("m", [1, 2, 3])
def test_monomial_reproduction(n, m):
    mesh = build_uniform(n)
    R = assemble_reconstruction(mesh, m)
    x, y = mesh.barycenters.T
    for a, b in exponents(m):
        coef = R.apply(x ** a * y ** b)
        assert np.max(np.abs(coef - exact_coefficients(mesh, m, a, b))) <= 1e-10


def test_locality():
    mesh = build_uniform(5)
    R = assemble_reconstruction(mesh, 2)
    M = R.matrix.tocsr()
    for k, patch in enumerate(R.patches):
        block = M[k * R.dim:(k + 1) * R.dim]
        assert set(block.indices) <= set(patch.elements)
