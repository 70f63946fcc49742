import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mwdha.errors import SingularityError, ValidationError
from mwdha.linalg import (mvee, mvee_batch, op_norm, op_norm_batch, random_spd, spd_power,
                          spd_power_batch, sym_eig)

seeds = st.integers(0, 2**31 - 1)
dims = st.integers(1, 6)


def test_sym_eig_identity():
    w, Q = sym_eig(np.eye(2))
    assert np.allclose(w, [1, 1])
    assert np.allclose(Q @ Q.T, np.eye(2))


def test_sym_eig_diagonal_axes():
    w, Q = sym_eig(np.diag([1.0, 4.0]))
    assert np.allclose(w, [4, 1])
    assert np.allclose(np.abs(Q), [[0, 1], [1, 0]])


def test_sym_eig_hand_example():
    w, _ = sym_eig([[2.0, 1.0], [1.0, 2.0]])
    assert np.allclose(w, [3, 1], atol=1e-14)


def test_sym_eig_rejects_nonsymmetric():
    with pytest.raises(ValidationError):
        sym_eig([[1.0, 2.0], [0.0, 1.0]])


@given(seeds, dims)
def test_sym_eig_matches_lapack(seed, n):
    M = random_spd(np.random.default_rng(seed), n)
    w, Q = sym_eig(M)
    ref = np.linalg.eigvalsh(M)[::-1]
    assert np.allclose(w, ref, rtol=1e-10, atol=1e-10 * ref[0])
    assert np.allclose(Q @ np.diag(w) @ Q.T, M, atol=1e-10 * np.linalg.norm(M))
    assert np.allclose(Q.T @ Q, np.eye(n), atol=1e-10)
    assert np.all(np.diff(w) <= 0)


def test_spd_power_examples():
    assert np.allclose(spd_power(np.eye(2), 0.5), np.eye(2))
    assert np.allclose(spd_power(np.diag([4.0, 9.0]), 0.5), np.diag([2.0, 3.0]))
    inv = spd_power([[2.0, 1.0], [1.0, 2.0]], -1)
    assert np.allclose(inv, [[2 / 3, -1 / 3], [-1 / 3, 2 / 3]], atol=1e-14)


def test_spd_power_singular_names_eigenvalue():
    with pytest.raises(SingularityError) as err:
        spd_power(np.diag([1.0, 0.0]), 0.5)
    assert err.value.eigenvalue == 0.0
    assert "eigenvalue" in str(err.value)


def test_spd_power_floor_is_relative():
    with pytest.raises(SingularityError):
        spd_power(np.diag([1.0, 1e-13]), -1)
    spd_power(np.diag([1.0, 1e-11]), -1)


@given(seeds, dims, st.floats(-2, 2), st.floats(-2, 2))
def test_spd_power_semigroup(seed, n, a, b):
    M = random_spd(np.random.default_rng(seed), n)
    lhs = spd_power(M, a) @ spd_power(M, b)
    rhs = spd_power(M, a + b)
    assert np.linalg.norm(lhs - rhs) <= 1e-7 * np.linalg.norm(rhs)


@given(seeds, dims, st.floats(0.2, 3))
def test_spd_power_inverse_round_trip(seed, n, t):
    M = random_spd(np.random.default_rng(seed), n, 0.1, 10)
    assert np.allclose(spd_power(spd_power(M, t), 1 / t), M, atol=1e-8 * np.linalg.norm(M))
    assert np.allclose(spd_power(M, 1), M, atol=1e-10 * np.linalg.norm(M))


@given(seeds, dims)
def test_spd_power_batch_matches_single(seed, n):
    rng = np.random.default_rng(seed)
    Ms = np.stack([random_spd(rng, n, 0.01, 100) for _ in range(4)])
    B = spd_power_batch(Ms, 0.3)
    for M, b in zip(Ms, B):
        assert np.allclose(spd_power(M, 0.3), b, atol=1e-9 * np.linalg.norm(b))


def test_spd_power_batch_reports_index():
    Ms = np.stack([np.eye(2), np.diag([1.0, -1.0])])
    with pytest.raises(SingularityError) as err:
        spd_power_batch(Ms, 0.5, where="level 3")
    assert err.value.where == ("level 3", (1,))


def test_op_norm_examples():
    assert op_norm(np.eye(3)) == pytest.approx(1.0)
    assert op_norm(np.diag([2.0, -5.0])) == pytest.approx(5.0)
    assert op_norm([[0.0, 1.0], [0.0, 0.0]]) == pytest.approx(1.0)


@given(seeds, dims)
def test_op_norm_submultiplicative(seed, n):
    rng = np.random.default_rng(seed)
    M, N = rng.standard_normal((2, n, n))
    assert op_norm(M @ N) <= op_norm(M) * op_norm(N) * (1 + 1e-12)
    assert op_norm(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-10)


@given(seeds, st.integers(1, 4), st.integers(1, 4))
def test_op_norm_batch_matches_svd(seed, m, n):
    M = np.random.default_rng(seed).standard_normal((5, m, n))
    assert np.allclose(op_norm_batch(M), np.linalg.norm(M, 2, axis=(-2, -1)), rtol=1e-10)


def _circle(m=256, a=1.0, b=1.0):
    t = np.linspace(0, 2 * np.pi, m, endpoint=False)
    return np.stack([a * np.cos(t), b * np.sin(t)], 1)


def test_mvee_circle():
    fit = mvee(_circle())
    assert np.allclose(fit.shape, np.eye(2), atol=1e-3)
    assert fit.gap <= 1e-6 * 10


def test_mvee_known_ellipse():
    pts = np.vstack([[[2, 0], [-2, 0], [0, 1], [0, -1]], _circle(256, 2.0, 1.0)])
    fit = mvee(pts)
    assert np.allclose(fit.shape, np.diag([0.5, 1.0]), atol=1e-3)


def test_mvee_rank_deficient():
    with pytest.raises(ValidationError):
        mvee(np.array([[1.0, 1.0], [-1.0, -1.0], [2.0, 2.0]]))


@given(seeds, st.integers(2, 3))
def test_mvee_john_containment(seed, n):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n, 0.2, 5)
    dirs = rng.standard_normal((60, n))
    pts = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) @ A
    pts = np.vstack([pts, -pts])
    fit = mvee(pts)
    r = np.linalg.norm(pts @ fit.shape.T, axis=1)
    assert r.max() <= 1 + 1e-6
    assert r.max() >= 1 / np.sqrt(n)


def test_mvee_batch_matches_single(rng):
    clouds = np.stack([_circle(64, a, 1.0) for a in (1.0, 2.0, 0.5)])
    E, _, gap = mvee_batch(clouds)
    for c, e in zip(clouds, E):
        assert np.allclose(mvee(c).shape, e, atol=1e-6)
    assert np.all(gap < 1e-4)
