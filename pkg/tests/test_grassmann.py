import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles
from scipy.stats import ortho_group

from dgmseg.grassmann import (KernelParams, RankDeficiencyError, SubspacePoint, cc_kernel,
                              combined_kernel, gram_matrix, kernel_matrix, kernel_vector,
                              orthonormalize, projection_kernel, subspace_stack)

from conftest import random_bases


def point(rng, D=25, m=5):
    return SubspacePoint(random_bases(rng, 1, D, m)[0])


def test_orthonormalize_matches_svd_span(rng):
    data = rng.standard_normal((25, 25))
    p = orthonormalize(data, 5)
    assert np.linalg.norm(p.basis.T @ p.basis - np.eye(5)) < 1e-8
    u = np.linalg.svd(data)[0][:, :5]
    for k in range(5):
        assert np.linalg.norm(u[:, k] - p.basis @ (p.basis.T @ u[:, k])) < 1e-8
    idx = np.argmax(np.abs(p.basis), axis=0)
    assert np.all(p.basis[idx, np.arange(5)] > 0)


def test_orthonormalize_special_cases(rng):
    q = random_bases(rng, 1, 10, 3)[0]
    assert abs(projection_kernel(orthonormalize(q, 3), SubspacePoint(q)) - 3) < 1e-12
    v = rng.standard_normal(7)
    b = orthonormalize(v, 1).basis[:, 0]
    assert np.allclose(np.abs(b), np.abs(v) / np.linalg.norm(v))
    with pytest.raises(RankDeficiencyError):
        orthonormalize(np.outer(v, np.ones(4)), 2)
    with pytest.raises(ValueError):
        orthonormalize(np.ones((4, 3)), 4)


def test_subspace_stack_rank_fallback(rng):
    mats = rng.standard_normal((3, 25, 25))
    mats[1] = 0.0
    mats[2] = np.outer(rng.standard_normal(25), rng.standard_normal(25))
    bases, ranks = subspace_stack(mats, 5)
    assert ranks.tolist() == [5, 0, 1]
    assert np.all(bases[1] == 0)
    assert np.all(bases[2][:, 1:] == 0)
    single = orthonormalize(mats[0], 5).basis
    assert np.allclose(bases[0], single, atol=1e-12)


def test_subspace_point_validation():
    with pytest.raises(ValueError):
        SubspacePoint(np.ones((3, 2)))
    with pytest.raises(ValueError):
        SubspacePoint(np.eye(3)[:, :2].T)


def test_projection_kernel_examples(rng):
    x = point(rng)
    assert abs(projection_kernel(x, x) - 5) < 1e-12
    e = np.eye(10)
    a, b = SubspacePoint(e[:, :3]), SubspacePoint(e[:, 3:6])
    assert projection_kernel(a, b) == 0.0
    assert cc_kernel(a, b) == 0.0
    assert abs(cc_kernel(x, x) - 1) < 1e-12


@given(st.floats(0.0, np.pi))
@settings(max_examples=40, deadline=None)
def test_planes_sharing_a_line(theta):
    e = np.eye(3)
    a = SubspacePoint(e[:, :2])
    b = SubspacePoint(np.column_stack([e[:, 0], np.cos(theta) * e[:, 1] + np.sin(theta) * e[:, 2]]))
    assert abs(projection_kernel(a, b) - (1 + np.cos(theta) ** 2)) < 1e-12
    angles = subspace_angles(a.basis, b.basis)
    assert abs(projection_kernel(a, b) - np.sum(np.cos(angles) ** 2)) < 1e-12
    assert abs(cc_kernel(a, b) - 1) < 1e-12


def test_combined_kernel_examples(rng):
    x = point(rng, 12, 6)
    assert abs(combined_kernel(x, x, KernelParams(1, 5)) - 11) < 1e-12
    y = point(rng, 12, 6)
    assert combined_kernel(x, y, KernelParams(1, 0)) == projection_kernel(x, y)
    e = np.eye(12)
    assert combined_kernel(SubspacePoint(e[:, :3]), SubspacePoint(e[:, 3:6]),
                           KernelParams(0, 1)) == 0.0
    with pytest.raises(ValueError):
        KernelParams(0, 0)
    with pytest.raises(ValueError):
        projection_kernel(point(rng, 10, 2), point(rng, 11, 2))


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_kernel_properties(seed):
    rng = np.random.default_rng(seed)
    x, y = point(rng), point(rng)
    p = projection_kernel(x, y)
    c = cc_kernel(x, y)
    assert p == projection_kernel(y, x)
    assert c == cc_kernel(y, x)
    assert 0 <= p <= 5 + 1e-12 and 0 <= c <= 1 + 1e-12
    R = ortho_group.rvs(5, random_state=seed)
    xr = SubspacePoint(x.basis @ R)
    assert abs(projection_kernel(xr, y) - p) < 1e-8
    assert abs(cc_kernel(xr, y) - c) < 1e-8


def test_kernel_matrix_matches_scalar_kernels(rng):
    a, b = random_bases(rng, 6), random_bases(rng, 4)
    p = KernelParams(1, 5)
    K = kernel_matrix(a, b, p)
    for i in range(6):
        for j in range(4):
            assert abs(K[i, j] - combined_kernel(SubspacePoint(a[i]), SubspacePoint(b[j]), p)) < 1e-12


def test_gram_matrix(rng):
    p = KernelParams(1, 5)
    x = random_bases(rng, 1)
    G = gram_matrix(np.repeat(x, 4, axis=0), p)
    assert np.allclose(G, 10.0, atol=1e-12)
    e = np.eye(25)
    G = gram_matrix(np.stack([e[:, :5], e[:, 5:10]]), p)
    assert np.allclose(G, np.diag([10.0, 10.0]))
    pts = random_bases(rng, 30)
    G = gram_matrix(pts, p)
    assert np.array_equal(G, G.T)
    assert np.allclose(np.diag(G), 10.0, atol=1e-12)


def test_projection_gram_is_psd(rng):
    for _ in range(5):
        G = gram_matrix(random_bases(rng, 50), KernelParams(1, 0))
        assert np.linalg.eigvalsh(G).min() >= -1e-8


def test_kernel_vector(rng):
    pts = random_bases(rng, 8)
    p = KernelParams(1, 5)
    G = gram_matrix(pts, p)
    for i in range(8):
        assert np.allclose(kernel_vector(SubspacePoint(pts[i]), pts, p), G[:, i], atol=1e-12)
    e = np.eye(25)
    assert np.all(kernel_vector(SubspacePoint(e[:, :5]), np.stack([e[:, 5:10], e[:, 10:15]]), p) == 0)


def test_combined_gram_50_random_is_psd(rng):
    # stays red: the canonical-correlation term makes the Gram indefinite
    G = gram_matrix(random_bases(rng, 50), KernelParams(1, 5))
    assert np.linalg.eigvalsh(G).min() >= -1e-8


def test_cc_gram_indefinite_on_planar_lines():
    # four lines at 45 degree steps: |cos| Gram is circulant [1, r, 0, r], r = 1/sqrt(2)
    angles = np.deg2rad([0, 45, 90, 135])
    pts = [SubspacePoint(np.array([np.cos(a), np.sin(a)])) for a in angles]
    G = gram_matrix(pts, KernelParams(0, 1))
    assert np.isclose(np.linalg.eigvalsh(G).min(), 1 - np.sqrt(2), atol=1e-12)
