"""Small dense symmetric linear algebra.

Single-matrix routines use a hand-written cyclic Jacobi eigensolver. The
``*_batch`` variants operate on stacks of matrices with shape ``(..., n, n)``
and lean on LAPACK through numpy, which matters once thousands of cubes need
a fractional power.
"""
from dataclasses import dataclass

import numpy as np

from .errors import SingularityError, ValidationError

EIG_FLOOR_REL = 1e-12
JACOBI_TOL = 1e-13
SYM_TOL = 1e-12
MVEE_TOL = 1e-6
MVEE_MAX_ITER = 100_000


def _as_square(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {M.shape}")
    return M


def check_symmetric(M):
    """Raise ``ValidationError`` unless ``M`` is symmetric to ``1e-12*max|M|``."""
    M = _as_square(M)
    scale = np.max(np.abs(M)) if M.size else 0.0
    asym = np.max(np.abs(M - M.T)) if M.size else 0.0
    if asym > SYM_TOL * max(scale, np.finfo(float).tiny):
        raise ValidationError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return M


def sym_eig(M):
    """Eigen-decomposition of a real symmetric matrix by cyclic Jacobi sweeps.

    Parameters
    ----------
    M : array_like, shape (n, n)
        Symmetric matrix.

    Returns
    -------
    w : ndarray, shape (n,)
        Eigenvalues in descending order.
    Q : ndarray, shape (n, n)
        Orthogonal matrix whose columns are the matching eigenvectors, so
        that ``M = Q @ diag(w) @ Q.T``.
    """
    A = check_symmetric(M).copy()
    n = A.shape[0]
    Q = np.eye(n)
    norm = np.linalg.norm(A)
    if n == 1 or norm == 0.0:
        w = np.diag(A).copy()
        order = np.argsort(-w, kind="stable")
        return w[order], Q[:, order]
    target = JACOBI_TOL * norm
    for _ in range(100):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off < target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(diff) > 1e150 * abs(apq):
                    # theta would overflow; use t ~ 1/(2 theta)
                    t = apq / diff
                elif diff == 0.0:
                    t = 1.0
                else:
                    theta = diff / (2.0 * apq)
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/cols p and q
                Ap = A[:, p].copy()
                Aq = A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap = A[p, :].copy()
                Aq = A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                A[p, q] = A[q, p] = 0.0
                Qp = Q[:, p].copy()
                Qq = Q[:, q].copy()
                Q[:, p] = c * Qp - s * Qq
                Q[:, q] = s * Qp + c * Qq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], Q[:, order]


def _check_floor(w, where=None):
    top = np.max(w)
    floor = EIG_FLOOR_REL * max(top, 0.0)
    low = np.min(w)
    if top <= 0.0 or low <= floor:
        msg = f"matrix is not positive definite: eigenvalue {low:.6e} <= floor {floor:.3e}"
        if where is not None:
            msg += f" at {where}"
        raise SingularityError(msg, eigenvalue=float(low), where=where)


def spd_power(M, t, where=None):
    """Return ``M**t`` for a symmetric positive definite ``M``.

    Raises
    ------
    SingularityError
        If the smallest eigenvalue is at or below ``1e-12`` times the largest.
    """
    w, Q = sym_eig(M)
    _check_floor(w, where)
    return (Q * w**t) @ Q.T


def op_norm(M):
    """Spectral norm (largest singular value) of a square matrix."""
    M = _as_square(M)
    if M.size == 0:
        return 0.0
    w, _ = sym_eig(M.T @ M)
    return float(np.sqrt(max(w[0], 0.0)))


def spd_power_batch(M, t, where=None):
    """Fractional power of a stack of SPD matrices, shape ``(..., n, n)``."""
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, Q = np.linalg.eigh(M)
    top = w[..., -1]
    low = w[..., 0]
    bad = (top <= 0.0) | (low <= EIG_FLOOR_REL * np.maximum(top, 0.0))
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        loc = idx if where is None else (where, idx)
        raise SingularityError(
            f"matrix is not positive definite: eigenvalue {float(low[idx]):.6e} at {loc}",
            eigenvalue=float(low[idx]),
            where=loc,
        )
    return np.einsum("...ij,...j,...kj->...ik", Q, w**t, Q)


def op_norm_batch(M):
    """Spectral norms of a stack of matrices, shape ``(..., m, n)``."""
    M = np.asarray(M, dtype=float)
    m, n = M.shape[-2:]
    if m == 1 or n == 1:
        return np.sqrt(np.sum(M * M, axis=(-1, -2)))
    if m == 2 and n == 2:
        a, b = M[..., 0, 0], M[..., 0, 1]
        c, d = M[..., 1, 0], M[..., 1, 1]
        fro = a * a + b * b + c * c + d * d
        det = a * d - b * c
        disc = np.sqrt(np.maximum(fro * fro - 4.0 * det * det, 0.0))
        return np.sqrt(0.5 * (fro + disc))
    return np.linalg.norm(M, ord=2, axis=(-2, -1))


def random_spd(rng, n, low=1e-3, high=1e3):
    """Random SPD matrix with log-uniform eigenvalues in ``[low, high]``."""
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    w = np.exp(rng.uniform(np.log(low), np.log(high), size=n))
    return (Q * w) @ Q.T


@dataclass(frozen=True)
class EllipsoidFit:
    """Ellipsoid ``{x : |E x| <= 1}`` returned by :func:`mvee`.

    Attributes
    ----------
    shape : ndarray
        The SPD matrix ``E``.
    iterations : int
        Number of Newton steps taken.
    gap : float
        Duality gap ``max_i kappa_i / n - 1`` at termination.
    """

    shape: np.ndarray
    iterations: int
    gap: float


def _sym_basis(n):
    basis, pairs = [], []
    for j in range(n):
        for k in range(j, n):
            S = np.zeros((n, n))
            S[j, k] = S[k, j] = 1.0
            basis.append(S)
            pairs.append((j, k))
    return np.array(basis), pairs


def _certificate(P, u):
    """Khachiyan quantities for design weights ``u``: (M^{-1}, kappa_max, gap)."""
    n = P.shape[-1]
    M = np.einsum("bi,bij,bik->bjk", u, P, P)
    Minv = np.linalg.inv(M)
    kappa = np.einsum("bij,bjk,bik->bi", P, Minv, P)
    kmax = kappa.max(axis=1)
    return Minv, kmax, kmax / n - 1.0


def mvee_batch(points, tol=MVEE_TOL, max_iter=MVEE_MAX_ITER):
    """Centered minimum-volume enclosing ellipsoids for a stack of point sets.

    The primal problem ``min -log det X  s.t.  p_i^T X p_i <= 1`` has only
    ``n(n+1)/2`` unknowns, so it is solved by a path-following log-barrier
    Newton method. Barrier weights give design weights ``u`` on the points,
    and the returned shape is built from ``u`` so that Khachiyan's duality
    gap certifies near-optimal volume.

    Parameters
    ----------
    points : ndarray, shape (B, m, n)
        ``B`` point clouds of ``m`` points each. The ellipsoid is centered at
        the origin, which is the optimal center for a set symmetric under
        negation.
    tol : float
        Target for the gap ``max_i kappa_i / n - 1``.
    max_iter : int
        Cap on the total number of Newton steps.

    Returns
    -------
    E : ndarray, shape (B, n, n)
        Shapes with ``max_i |E p_i| = 1`` exactly.
    iterations : int
    gaps : ndarray, shape (B,)
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 3:
        raise ValidationError("points must have shape (batch, m, n)")
    B, m, n = P.shape
    ranks = np.linalg.matrix_rank(P)
    if np.any(ranks < n):
        b = int(np.argmin(ranks))
        raise ValidationError(f"point set {b} does not span R^{n}")
    # design weights are invariant under linear maps, so whiten each cloud
    M0 = np.einsum("bij,bik->bjk", P, P) / m
    Q = np.einsum("bij,bkj->bik", P, spd_power_batch(M0, -0.5))
    S, pairs = _sym_basis(n)
    feats = np.stack(
        [Q[..., j] * Q[..., k] * (1.0 if j == k else 2.0) for j, k in pairs], axis=-1
    )
    rmax = np.max(np.sum(Q * Q, axis=-1), axis=1)
    x = np.zeros((B, len(pairs)))
    for s_idx, (j, k) in enumerate(pairs):
        if j == k:
            x[:, s_idx] = 0.5 / rmax

    t = np.ones(B)
    steps = 0
    gap = np.full(B, np.inf)
    u = np.full((B, m), 1.0 / m)
    eye = np.eye(len(pairs))
    while steps < max_iter:
        # recenter the self-concordant barrier t*(-log det X) - sum log(1 - r_i)
        # by Newton steps with backtracking on the barrier value
        active = gap > tol
        for _ in range(100):
            X = np.einsum("bs,sij->bij", x, S)
            Xinv = np.linalg.inv(X)
            r = np.matmul(feats, x[..., None])[..., 0]
            inv1 = 1.0 / (1.0 - r)
            XS = np.einsum("bij,sjk->bsik", Xinv, S)
            g = -t[:, None] * np.einsum("bsii->bs", XS) + np.matmul(inv1[:, None, :], feats)[:, 0]
            H = t[:, None, None] * np.einsum("bsij,btji->bst", XS, XS)
            F = feats * inv1[..., None]
            H += np.matmul(F.transpose(0, 2, 1), F)
            H[~active] = eye
            g[~active] = 0.0
            dx = -np.linalg.solve(H, g[..., None])[..., 0]
            dec = np.maximum(-np.sum(g * dx, axis=1), 0.0)
            todo = active & (dec > 1e-10) & np.all(np.isfinite(dx), axis=1)
            if not np.any(todo):
                break
            steps += 1
            # barrier change along dx, written with log1p so it stays accurate
            # when t*log det X is large
            w_, U = np.linalg.eigh(X)
            Xih = np.einsum("bij,bj,bkj->bik", U, 1.0 / np.sqrt(w_), U)
            dX = np.einsum("bs,sij->bij", dx, S)
            mu = np.linalg.eigvalsh(Xih @ dX @ Xih)
            a = np.matmul(feats, dx[..., None])[..., 0] * inv1
            step = todo.astype(float)
            for _ in range(60):
                sm, sa = step[:, None] * mu, step[:, None] * a
                inside = (sm.min(axis=1) > -1.0) & (sa.max(axis=1) < 1.0)
                with np.errstate(invalid="ignore", divide="ignore"):
                    delta = -t * np.sum(np.log1p(sm), axis=1) - np.sum(np.log1p(-sa), axis=1)
                ok = (inside & (delta <= -0.25 * step * dec)) | ~todo
                if np.all(ok):
                    break
                step = np.where(ok, step, 0.5 * step)
            x = x + step[:, None] * np.where(todo[:, None], dx, 0.0)
        r = np.matmul(feats, x[..., None])[..., 0]
        w = 1.0 / (1.0 - r)
        u_new = w / w.sum(axis=1, keepdims=True)
        _, _, gap_new = _certificate(Q, u_new)
        better = active & (gap_new < gap)
        u = np.where(better[:, None], u_new, u)
        stalled = active & ~better
        gap = np.where(better, gap_new, gap)
        # a cloud whose certificate stops improving has hit rounding limits
        gap_done = (gap <= tol) | stalled
        if np.all(gap_done):
            break
        t = np.where(gap_done, t, 8.0 * t)
        gap = np.where(stalled, 0.0, gap)
    Minv, kmax, gap = _certificate(P, u)
    E = spd_power_batch(Minv / kmax[:, None, None], 0.5)
    return E, steps, gap


def mvee(points, tol=MVEE_TOL, max_iter=MVEE_MAX_ITER):
    """Minimum-volume centered ellipsoid enclosing a symmetric point set.

    See :func:`mvee_batch` for the method. The returned shape is scaled so
    the farthest input point lies exactly on the boundary.

    Parameters
    ----------
    points : array_like, shape (m, n)
    tol : float, default 1e-6

    Returns
    -------
    EllipsoidFit

    Raises
    ------
    ValidationError
        If the points do not span ``R^n``.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2:
        raise ValidationError("points must be a 2-d array")
    E, it, gap = mvee_batch(P[None], tol=tol, max_iter=max_iter)
    return EllipsoidFit(shape=E[0], iterations=it, gap=float(gap[0]))
