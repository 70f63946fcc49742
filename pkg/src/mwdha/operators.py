"""Matrix-kernelled singular integrals on a dyadic mesh.

Operators have the form ``T f = A (S f)`` with ``S`` a scalar odd kernel and
``A`` a constant matrix. ``S`` is discretized in Galerkin form: a
piecewise-constant input is mapped to the cell averages of its exact image,

    (S f)_x = sum_y g(x - y) f_y,
    g(k) = int_{[0,1]^d} int_{[0,1]^d} K(k + s - t) ds dt,

which is scale free because the kernels are homogeneous of degree ``-d``.
The singular cell contributes zero by odd symmetry. For the Hilbert kernel
``g`` is known in closed form, and for Riesz kernels it is computed by graded
tensor Gauss quadrature near the diagonal and by corrected point values far away.
"""
import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dyadic import (HaarCoefficients, SampledFunction, _sign_table, bad_mask, haar_function,
                     haar_inverse, haar_signatures, haar_transform, level_means)
from .errors import SingularityError, UnsupportedError, ValidationError
from .linalg import op_norm_batch
from .weights import lp_norm, reducing_table, resolve_method

KERNELS = ("hilbert", "riesz", "modified_hilbert")


def riesz_constant(d):
    """``Gamma((d+1)/2) / pi**((d+1)/2)``."""
    return math.gamma((d + 1) / 2.0) / math.pi ** ((d + 1) / 2.0)


@dataclass(frozen=True)
class KernelDescriptor:
    """Scalar kernel times a constant matrix.

    Parameters
    ----------
    scalar_part : str
        ``"hilbert"`` (d = 1, kernel ``1/(x-y)``), ``"riesz"`` (kernel
        ``c_d (x-y)_j / |x-y|**(d+1)``) or ``"modified_hilbert"`` (d = 1,
        ``1/(x-y) + 1_{|y|>1} / y``).
    A : ndarray
        Constant ``n x n`` matrix.
    riesz_index : int
        Component ``j`` for Riesz kernels (zero based).
    alpha : float
        Hoelder exponent of the kernel (1 for all built-ins).
    adjoint : bool
        Whether this describes ``T*`` of the named kernel.
    """

    scalar_part: str
    A: tuple
    riesz_index: int = 0
    alpha: float = 1.0
    adjoint: bool = False

    def __post_init__(self):
        if self.scalar_part not in KERNELS:
            raise ValidationError(f"unknown kernel {self.scalar_part!r}")
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValidationError("A must be square")
        object.__setattr__(self, "A", tuple(map(tuple, A)))

    @property
    def matrix(self):
        return np.array(self.A)

    @property
    def n(self):
        return len(self.A)

    def riesz_constant(self, d):
        return riesz_constant(d) if self.scalar_part == "riesz" else 1.0

    def transpose(self):
        """Descriptor of the adjoint ``T*`` (kernel ``K(y, x)^T``)."""
        return KernelDescriptor(self.scalar_part, tuple(map(tuple, self.matrix.T)),
                                self.riesz_index, self.alpha, not self.adjoint)

    def with_matrix(self, A):
        return KernelDescriptor(self.scalar_part, A, self.riesz_index, self.alpha, self.adjoint)

    def to_json(self):
        return {"scalar_part": self.scalar_part, "A": [list(r) for r in self.A],
                "riesz_index": self.riesz_index, "alpha": self.alpha, "adjoint": self.adjoint}


def _check_dim(K, d):
    if K.scalar_part in ("hilbert", "modified_hilbert") and d != 1:
        raise UnsupportedError(f"{K.scalar_part} kernel needs d = 1")
    if K.scalar_part == "riesz" and not 0 <= K.riesz_index < d:
        raise ValidationError("riesz index out of range")


def scalar_kernel(K, x, y):
    """Scalar part ``k(x, y)`` (vectorized over leading axes, last axis is space)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if y.ndim == 0:
        y = y[None]
    if K.adjoint:
        x, y = y, x
    z = x - y
    r = np.linalg.norm(z, axis=-1)
    if np.any(r == 0):
        raise SingularityError("kernel evaluated on the diagonal x = y")
    d = z.shape[-1]
    if K.scalar_part == "riesz":
        return riesz_constant(d) * z[..., K.riesz_index] / r ** (d + 1)
    val = 1.0 / z[..., 0]
    if K.scalar_part == "modified_hilbert":
        yy = y[..., 0]
        val = val + np.where(np.abs(yy) > 1.0, 1.0 / np.where(yy == 0, 1.0, yy), 0.0)
    return val


def kernel_eval(K, x, y):
    """Matrix kernel ``K(x, y)``; raises :class:`SingularityError` at ``x = y``."""
    s = scalar_kernel(K, x, y)
    return np.multiply.outer(s, K.matrix)


# stencils -------------------------------------------------------------------

def _G(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x == 0, 0.0, x * np.log(np.abs(x)) - x)


def hilbert_stencil(N):
    """Cell-average Galerkin weights ``g(k)`` of ``1/(x-y)`` for ``|k| < N``.

    ``g(k) = G(k+1) - 2 G(k) + G(k-1)`` with ``G(x) = x log|x| - x``.
    """
    k = np.arange(-(N - 1), N, dtype=float)
    return _G(k + 1) - 2 * _G(k) + _G(k - 1)


_GL = {}


def _gauss(m):
    if m not in _GL:
        _GL[m] = np.polynomial.legendre.leggauss(m)
    return _GL[m]


def _box_quad(f, lo, hi, m):
    """Tensor Gauss-Legendre integral of ``f`` over the box ``[lo, hi]``."""
    d = len(lo)
    x, w = _gauss(m)
    pts = [0.5 * (h - l) * x + 0.5 * (h + l) for l, h in zip(lo, hi)]
    wts = [0.5 * (h - l) * w for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*pts, indexing="ij"), -1).reshape(-1, d)
    W = functools.reduce(np.multiply.outer, wts).ravel()
    return float(np.sum(W * f(grid)))


def _graded_quad(f, lo, hi, sing, m=8, depth=30):
    """Integral over a box with an integrable singularity at a corner ``sing``.

    The box is bisected repeatedly toward ``sing``; every piece away from it
    gets tensor Gauss quadrature and the final tiny corner piece is dropped.
    """
    lo = np.array(lo, float)
    hi = np.array(hi, float)
    sing = np.array(sing, float)
    total = 0.0
    for _ in range(depth):
        mid = 0.5 * (lo + hi)
        keep = None
        for corner in itertools.product((0, 1), repeat=len(lo)):
            c = np.array(corner)
            a = np.where(c == 0, lo, mid)
            b = np.where(c == 0, mid, hi)
            if np.all((sing >= a - 1e-15) & (sing <= b + 1e-15)) and keep is None:
                keep = (a, b)
                continue
            total += _box_quad(f, a, b, m)
        if keep is None:
            break
        lo, hi = keep
    return total


@functools.lru_cache(maxsize=None)
def _riesz_near(d, j, reach):
    """``g(k)`` for ``|k|_inf <= reach`` by graded quadrature over ``u = s - t``."""
    c = riesz_constant(d)
    out = {}
    for k in itertools.product(range(-reach, reach + 1), repeat=d):
        if not any(k):
            out[k] = 0.0
            continue
        kk = np.array(k, float)

        def f(u, kk=kk):
            z = kk + u
            r = np.linalg.norm(z, axis=-1)
            r = np.where(r == 0, np.inf, r)
            return np.prod(1 - np.abs(u), axis=-1) * c * z[:, j] / r ** (d + 1)

        total = 0.0
        for orth in itertools.product((0, 1), repeat=d):
            lo = np.where(np.array(orth) == 0, -1.0, 0.0)
            hi = lo + 1.0
            if np.all((-kk >= lo) & (-kk <= hi)):
                total += _graded_quad(f, lo, hi, -kk, m=8 if d < 3 else 6)
            else:
                # at least unit distance from the singularity
                total += _graded_quad(f, lo, hi, lo - 1.0)
        out[k] = total
    return out


@functools.lru_cache(maxsize=None)
def _riesz_mid(d, j, reach, far):
    """``g(k)`` for ``reach < |k|_inf <= far`` by tensor Gauss over the tent-weighted orthants."""
    c = riesz_constant(d)
    x, w = _gauss(8 if d < 3 else 6)
    nodes, wts = [], []
    for orth in itertools.product((0, 1), repeat=d):
        pts = [0.5 * x + (0.5 if o else -0.5) for o in orth]
        grid = np.stack(np.meshgrid(*pts, indexing="ij"), -1).reshape(-1, d)
        nodes.append(grid)
        wts.append(functools.reduce(np.multiply.outer, [0.5 * w] * d).ravel() * np.prod(1 - np.abs(grid), axis=1))
    U = np.concatenate(nodes)
    Wq = np.concatenate(wts)
    ks = [k for k in itertools.product(range(-far, far + 1), repeat=d) if max(map(abs, k)) > reach]
    K = np.array(ks, float)
    vals = np.empty(len(ks))
    for s in range(0, len(ks), 256):
        z = K[s:s + 256, None, :] + U[None]
        r = np.linalg.norm(z, axis=-1)
        vals[s:s + 256] = c * np.sum(Wq * z[..., j] / r ** (d + 1), axis=1)
    return dict(zip(ks, vals.tolist()))


def riesz_stencil(d, j, N, reach=2, far=8):
    """Galerkin weights of the Riesz kernel on offsets ``(-N, N)**d``.

    Offsets with ``|k|_inf <= far`` are integrated; beyond that the point
    value gets the tent-moment correction ``(1/12) Laplacian K``, which for
    this kernel is ``(d + 1) K / (12 |k|^2)``, leaving an ``O(|k|^-4)``
    relative error.
    """
    if d == 1:
        return riesz_constant(1) * hilbert_stencil(N)
    axes = [np.arange(-(N - 1), N)] * d
    K = np.stack(np.meshgrid(*axes, indexing="ij"), -1).astype(float)
    r = np.linalg.norm(K, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = riesz_constant(d) * K[..., j] / r ** (d + 1) * (1.0 + (d + 1) / (12.0 * r**2))
    for table in (_riesz_near(d, j, reach), _riesz_mid(d, j, reach, far)):
        for k, v in table.items():
            if all(abs(c) <= N - 1 for c in k):
                g[tuple(c + N - 1 for c in k)] = v
    return g


def stencil(K, lattice):
    """Galerkin stencil of the scalar part on this lattice (adjoint aware)."""
    d = lattice.d
    _check_dim(K, d)
    N = lattice.n_side
    if K.scalar_part in ("hilbert", "modified_hilbert"):
        g = hilbert_stencil(N)
    else:
        g = riesz_stencil(d, K.riesz_index, N)
    if K.adjoint:
        g = g[(slice(None, None, -1),) * d]
    return g


def _convolve(g, f, d):
    """Linear convolution restricted to the grid: ``out_x = sum_y g(x-y) f_y``."""
    N = f.shape[0]
    size = [2 * N] * d
    axes = tuple(range(d))
    G = np.fft.rfftn(g, s=size, axes=axes)
    extra = f.ndim - d
    F = np.fft.rfftn(f, s=size, axes=axes)
    G = G.reshape(G.shape + (1,) * extra)
    out = np.fft.irfftn(G * F, s=size, axes=axes)
    sl = tuple(slice(N - 1, 2 * N - 1) for _ in range(d))
    return out[sl]


def modified_correction(lattice):
    """Per-cell ``int_cell 1_{|y|>1}/y dy`` (d = 1)."""
    e = lattice.origin[0] + lattice.h * np.arange(lattice.n_side + 1)
    a, b = e[:-1], e[1:]

    def F(y):
        ay = np.abs(y)
        return np.where(ay > 1, np.log(np.maximum(ay, 1.0)), 0.0)

    # d/dy log|y| = 1/y on both sides of [-1, 1]
    return F(b) - F(a)


def apply_scalar(K, values, lattice):
    """Apply the scalar part to grid data ``grid_shape + vshape``."""
    d = lattice.d
    g = stencil(K, lattice)
    out = _convolve(g, np.asarray(values, dtype=float), d)
    if K.scalar_part == "modified_hilbert":
        corr = modified_correction(lattice)
        if not K.adjoint:
            c = np.tensordot(corr, values, axes=(0, 0))
            out = out + c
        else:
            tot = np.sum(values, axis=0) * lattice.h
            avg = corr / lattice.h
            out = out + np.multiply.outer(avg, tot)
    return out


def apply_czo(K, f, lattice=None):
    """Cell averages of ``T f = A (S f)`` for piecewise-constant ``f``.

    Parameters
    ----------
    f : SampledFunction
        Vector (``grid + (n,)``) or matrix (``grid + (n, m)``) valued; matrix
        input is treated column by column.
    """
    if not isinstance(f, SampledFunction):
        raise ValidationError("f must be a SampledFunction")
    if lattice is not None and f.lattice != lattice:
        raise ValidationError("function and lattice handles differ")
    lat = f.lattice
    A = K.matrix
    vals = f.values
    if vals.shape[lat.d] != A.shape[1]:
        raise ValidationError("matrix part does not match function dimension")
    if not np.any(A):
        return SampledFunction(lat, np.zeros(vals.shape[: lat.d] + (A.shape[0],) + vals.shape[lat.d + 1:]))
    Af = np.einsum("ij,...j->...i", A, vals) if vals.ndim == lat.d + 1 else np.einsum("ij,...jk->...ik", A, vals)
    return SampledFunction(lat, apply_scalar(K, Af, lat))


def dense_matrix(K, lattice):
    """Dense scalar Galerkin matrix ``G[x, y] = g(x - y)`` on flat cells."""
    d = lattice.d
    N = lattice.n_side
    g = stencil(K, lattice)
    idx = np.stack(np.meshgrid(*[np.arange(N)] * d, indexing="ij"), -1).reshape(-1, d)
    diff = idx[:, None, :] - idx[None, :, :] + (N - 1)
    G = g[tuple(np.moveaxis(diff, -1, 0))]
    if K.scalar_part == "modified_hilbert":
        corr = modified_correction(lattice)
        if not K.adjoint:
            G = G + corr[None, :]
        else:
            G = G + (corr / lattice.h)[:, None] * lattice.h
    return G


def scalar_haar_matrix(K, lattice):
    """``M[(J, e'), (I, e)] = <S h_I^e, h_J^e'>`` over all Haar functions.

    Returns ``(M, index)`` where ``index`` lists ``(level, flat, sig)`` in
    the row/column order.
    """
    lat = lattice
    G = dense_matrix(K, lat).reshape(lat.grid_shape + lat.grid_shape)
    d = lat.d
    S = len(haar_signatures(d))

    def flat_coeffs(vals):
        c = haar_transform(vals, lat)
        return np.concatenate([a.reshape((-1,) + a.shape[2:]) for a in c.details], axis=0)

    # transform the source axis (columns) then the target axis (rows)
    Gt = np.moveaxis(G, tuple(range(d)), tuple(range(d, 2 * d)))
    cols = flat_coeffs(Gt)  # (H, grid)
    rows = flat_coeffs(np.moveaxis(cols, 0, -1))  # (H, H)
    M = rows / lat.cell_volume
    index = []
    for k in range(lat.L):
        for i in range(lat.n_cubes(k)):
            for s in range(S):
                index.append((k, i, s))
    return M, index


def haar_matrix_coefficient(K, I, eps, J, eps2, lattice=None):
    """``<T(h_I^eps e_j), h_J^eps2 e_i>`` as an ``n x n`` matrix."""
    lat = I.lattice if lattice is None else lattice
    hI = haar_function(lat, I.level, I.coords, eps)
    hJ = haar_function(lat, J.level, J.coords, eps2)
    Sh = apply_scalar(K, hI, lat)
    s = float(np.sum(Sh * hJ) * lat.cell_volume)
    return s * K.matrix


# T1 ---------------------------------------------------------------------------

def _phi(u):
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(u == 0, 0.0, u * np.log(np.abs(u)) - u)


def _pair_hilbert_1d(x0, x1, a, b):
    """``int_{x0}^{x1} int_a^b dy/(x-y) dx`` for disjoint or nested intervals."""
    # inner integral is log|x-a| - log|x-b|
    return (_phi(x1 - a) - _phi(x0 - a)) - (_phi(x1 - b) - _phi(x0 - b))


def _halves_1d(lower, side):
    return [(lower, lower + side / 2, +1.0), (lower + side / 2, lower + side, -1.0)]


def _t1_1d(lattice, box_lo, box_hi, dil):
    """Near and far scalar T1 coefficients for d = 1 (exact)."""
    lat = lattice
    near, far = [], []
    for k in range(lat.L):
        lo = lat.cube_lower(k)[:, 0]
        side = lat.side(k)
        c = lo + side / 2
        amp = side ** -0.5
        qlo, qhi = c - dil * side / 2, c + dil * side / 2
        nk = np.zeros(len(lo))
        tk = np.zeros(len(lo))
        for x0, x1, sgn in _halves_1d(lo, side):
            nk += sgn * amp * _pair_hilbert_1d(x0, x1, qlo, qhi)
            tk += sgn * amp * _pair_hilbert_1d(x0, x1, box_lo, box_hi)
        near.append(nk[:, None])
        far.append((tk - nk)[:, None])
    return near, far


def _face_potential(x, lo, hi, d, m=24):
    """``R_j 1_Q(x)`` for a box ``Q = [lo, hi]`` and all ``j`` (d >= 2).

    Uses ``(x-y)_j |x-y|^{-d-1} = d/dy_j |x-y|^{1-d} / (d-1)`` so the volume
    integral becomes a difference of face integrals, evaluated by Gauss
    quadrature on each face. ``x`` must stay away from the faces.
    """
    c = riesz_constant(d)
    gx, gw = _gauss(m)
    out = np.zeros(x.shape)
    for j in range(d):
        others = [i for i in range(d) if i != j]
        pts = [0.5 * (hi[i] - lo[i]) * gx + 0.5 * (hi[i] + lo[i]) for i in others]
        wts = [0.5 * (hi[i] - lo[i]) * gw for i in others]
        grid = np.stack(np.meshgrid(*pts, indexing="ij"), -1).reshape(-1, d - 1)
        w = functools.reduce(np.multiply.outer, wts).ravel()
        for face, sgn in ((hi[j], 1.0), (lo[j], -1.0)):
            y = np.zeros((len(grid), d))
            y[:, others] = grid
            y[:, j] = face
            r = np.linalg.norm(x[..., None, :] - y, axis=-1)
            out[..., j] += sgn * np.sum(w * r ** (1 - d), axis=-1) / (d - 1)
    return c * out


def _t1_nd(K, lattice, box_lo, box_hi, dil, m=6):
    """Near and far scalar T1 coefficients for Riesz kernels in d >= 2."""
    lat = lattice
    d = lat.d
    j = K.riesz_index
    sigs = haar_signatures(d)
    T = _sign_table(d)
    chis = list(itertools.product((0, 1), repeat=d))
    gx, gw = _gauss(m)
    near, far = [], []
    for k in range(lat.L):
        lo = lat.cube_lower(k)
        side = lat.side(k)
        ctr = lo + side / 2
        amp = lat.volume(k) ** -0.5
        nk = np.zeros((len(lo), len(sigs)))
        tk = np.zeros((len(lo), len(sigs)))
        for chi in itertools.product((0, 1), repeat=d):
            clo = lo + np.array(chi) * side / 2
            ax = [(gx + 1) / 2 * side / 2] * d
            aw = [gw / 2 * side / 2] * d
            local = np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, d)
            wts = functools.reduce(np.multiply.outer, aw).ravel()
            xs = clo[:, None, :] + local[None]
            qlo = ctr - dil * side / 2
            qhi = ctr + dil * side / 2
            vn = np.empty(xs.shape[:2])
            for b in range(len(lo)):
                vn[b] = _face_potential(xs[b], qlo[b], qhi[b], d)[:, j]
            vt = _face_potential(xs, np.asarray(box_lo), np.asarray(box_hi), d)[..., j]
            col = chis.index(chi)
            for s in range(len(sigs)):
                nk[:, s] += T[s, col] * amp * (vn @ wts)
                tk[:, s] += T[s, col] * amp * (vt @ wts)
        near.append(nk)
        far.append(tk - nk)
    return near, far


@dataclass
class T1Result:
    """Matrix Haar coefficients of ``T1`` with their error budget."""

    coefficients: HaarCoefficients
    near: list
    far: list
    tail_bound: list
    R_levels: int
    dilation: float

    def max_norm(self):
        return self.coefficients.max_norm()


def compute_T1(K, lattice, R_levels=None, dilation=None):
    """Haar coefficients ``(T1)_I^eps = <T1, h_I^eps>`` for every lattice cube.

    Each coefficient is the sum of a near-field term ``<T 1_{Q*}, h_I>`` with
    ``Q*`` the cube concentric with ``I`` dilated by ``dilation`` (default
    ``2 sqrt(d)``) and a far-field term over ``y`` outside ``Q*``. The far
    field is truncated to the cube of side ``2**R_levels`` times the base
    side, concentric with the base cube (default ``R_levels = L + 2``). The
    omitted tail is bounded with the Hoelder estimate
    ``C_K sigma_d |I|^{1/2} (l(I)/2)^alpha / (alpha dist^alpha)``.
    The correction in the modified Hilbert kernel is constant in ``x`` and
    so drops out against every Haar function.
    """
    lat = lattice
    d = lat.d
    _check_dim(K, d)
    if R_levels is None:
        R_levels = lat.L + 2
    if R_levels < 1:
        raise ValidationError("R_levels must be at least 1")
    dil = 2.0 * math.sqrt(d) if dilation is None else float(dilation)
    base_c = np.asarray(lat.origin) + lat.base_side / 2
    half = 2.0**R_levels * lat.base_side / 2
    box_lo, box_hi = base_c - half, base_c + half
    if K.scalar_part == "modified_hilbert" and K.adjoint:
        e = lat.origin[0], lat.origin[0] + lat.base_side
        if e[0] < -1 or e[1] > 1:
            # the term 1_{|x|>1}/x times |box| does not converge as the box grows
            raise UnsupportedError("T*1 of the modified Hilbert kernel diverges outside [-1, 1]")
    if K.scalar_part == "riesz" and d >= 2:
        near, far = _t1_nd(K, lat, box_lo, box_hi, dil)
    else:
        near, far = _t1_1d(lat, box_lo[0], box_hi[0], dil)
        if K.scalar_part == "riesz":
            near = [a * riesz_constant(1) for a in near]
            far = [a * riesz_constant(1) for a in far]
    if K.adjoint:
        # odd scalar kernels: k(y, x) = -k(x, y)
        near = [-a for a in near]
        far = [-a for a in far]
    A = K.matrix
    details = [np.multiply.outer(nk + fk, A) for nk, fk in zip(near, far)]
    ck = riesz_constant(d) if K.scalar_part == "riesz" else 1.0
    sigma = 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)
    tails = []
    for k in range(lat.L):
        ctr = lat.cube_center(k)
        dist = np.min(np.minimum(ctr - box_lo, box_hi - ctr), axis=1)
        side = lat.side(k)
        b = ck * sigma * lat.volume(k) ** 0.5 * (side / 2) ** K.alpha / (K.alpha * dist**K.alpha)
        tails.append(b * np.linalg.norm(A, 2))
    coeffs = HaarCoefficients(lat, details, np.zeros(A.shape))
    return T1Result(coeffs, near, far, tails, R_levels, dil)


def t1_bmo_norm(t1, W=None, p=2.0, method="auto"):
    """Square-function BMO value of T1 coefficients (see ``square_bmo``)."""
    from .analysis import square_bmo

    coeffs = t1.coefficients if isinstance(t1, T1Result) else t1
    return square_bmo(coeffs, W, p, method).value


# paraproducts -----------------------------------------------------------------

def paraproduct_apply(B, f, lattice=None):
    """``pi_B f = sum_{I, eps} B_I^eps m_I(f) h_I^eps``.

    ``B`` may be a matrix :class:`SampledFunction` or precomputed
    :class:`HaarCoefficients`.
    """
    cB = B if isinstance(B, HaarCoefficients) else haar_transform(B, lattice)
    lat = cB.lattice
    fv = f.values if isinstance(f, SampledFunction) else np.asarray(f)
    means = level_means(fv, lat)
    det = [np.einsum("bsij,bj->bsi", cB.details[k], means[k]) for k in range(lat.L)]
    out = haar_inverse(HaarCoefficients(lat, det, np.zeros(fv.shape[lat.d:])))
    return SampledFunction(lat, out)


def paraproduct_adjoint_apply(B, g, lattice=None):
    """``pi_B^* g = sum_{I, eps} (B_I^eps)^T g_I^eps 1_I / |I|``."""
    cB = B if isinstance(B, HaarCoefficients) else haar_transform(B, lattice)
    lat = cB.lattice
    gv = g.values if isinstance(g, SampledFunction) else np.asarray(g)
    cg = haar_transform(gv, lat)
    out = np.zeros(lat.grid_shape + gv.shape[lat.d:])
    for k in range(lat.L):
        v = np.einsum("bsji,bsj->bi", cB.details[k], cg.details[k]) / lat.volume(k)
        out += v[lat.cube_of_cells(k)]
    return SampledFunction(lat, out)


def commutator_apply(K, B, f, adjoint_symbol=False):
    """``[T, B] f = T(B f) - B (T f)``; with ``adjoint_symbol`` uses ``B*``."""
    Bm = B.transpose() if adjoint_symbol else B
    lat = f.lattice
    Bf = SampledFunction(lat, np.einsum("...ij,...j->...i", Bm.values, f.values))
    TBf = apply_czo(K, Bf)
    Tf = apply_czo(K, f)
    BTf = np.einsum("...ij,...j->...i", Bm.values, Tf.values)
    return SampledFunction(lat, TBf.values - BTf)


# weighted condition checks ----------------------------------------------------

def compatibility_constant(W, A, p=None, method="auto", levels=None, interior_only=True):
    """``sup_I ||V_I A V_I^{-1}||`` and ``sup_I ||V_I' A^T V_I'^{-1}||`` per level."""
    p = W.p if p is None else float(p)
    table = reducing_table(W, p, resolve_method(W, p, method))
    A = np.asarray(A, dtype=float)
    lat = W.lattice
    levels = range(lat.L + 1) if levels is None else levels
    prim, dual = [], []
    for k in levels:
        lv = table[k]
        a = op_norm_batch(lv.V @ A @ np.linalg.inv(lv.V))
        b = op_norm_batch(lv.Vd @ A.T @ np.linalg.inv(lv.Vd))
        if interior_only:
            mask = lat.interior_mask(k)
            a, b = a[mask], b[mask]
        prim.append(float(a.max()))
        dual.append(float(b.max()))
    return {"primal": max(prim), "dual": max(dual), "primal_per_level": prim, "dual_per_level": dual}


def kernel_condition_check(K, W, p=None, sample_count=1000, seed=0, method="auto", cube_levels=None):
    """Sampled size and Hoelder ratios of the conjugated kernel.

    Random cubes ``I`` (levels from ``cube_levels``, default all) and random
    triples ``(x, x', y)`` in the base cube with ``|x - y| > 2 |x - x'|``
    give ``||V_I K(x,y) V_I^{-1}|| |x-y|^d``, the primal Hoelder ratio
    ``||V_I (K(x,y) - K(x',y)) V_I^{-1}|| |x-y|^{d+a} / |x-x'|^a`` and the
    dual one with ``V_I'`` and ``K*``.
    """
    if sample_count < 100:
        raise ValidationError("sample_count must be at least 100")
    p = W.p if p is None else float(p)
    lat = W.lattice
    d = lat.d
    _check_dim(K, d)
    rng = np.random.default_rng([seed, 31337])
    table = reducing_table(W, p, resolve_method(W, p, method))
    levels = list(range(lat.L + 1)) if cube_levels is None else list(cube_levels)
    lv = rng.choice(levels, size=sample_count)
    idx = np.array([rng.integers(0, lat.n_cubes(k)) for k in lv])
    V = np.stack([table[k].V[i] for k, i in zip(lv, idx)])
    Vd = np.stack([table[k].Vd[i] for k, i in zip(lv, idx)])
    Vi, Vdi = np.linalg.inv(V), np.linalg.inv(Vd)
    o = np.asarray(lat.origin)
    x = o + rng.random((sample_count, d)) * lat.base_side
    y = o + rng.random((sample_count, d)) * lat.base_side
    r = np.linalg.norm(x - y, axis=1)
    dirn = rng.standard_normal((sample_count, d))
    dirn /= np.linalg.norm(dirn, axis=1, keepdims=True)
    x2 = x + dirn * (r * rng.uniform(0.01, 0.49, size=sample_count))[:, None]
    A = K.matrix
    a = K.alpha
    k_xy = scalar_kernel(K, x, y)
    k_x2y = scalar_kernel(K, x2, y)
    Kt = K.transpose()
    kt_xy = scalar_kernel(Kt, x, y)
    kt_x2y = scalar_kernel(Kt, x2, y)
    conj = op_norm_batch(V @ A @ Vi)
    conj_d = op_norm_batch(Vd @ A.T @ Vdi)
    dx = np.linalg.norm(x - x2, axis=1)
    size = conj * np.abs(k_xy) * r**d
    hold = conj * np.abs(k_xy - k_x2y) * r ** (d + a) / dx**a
    hold_d = conj_d * np.abs(kt_xy - kt_x2y) * r ** (d + a) / dx**a
    q = [0.5, 0.9, 0.99, 1.0]
    return {
        "size_max": float(size.max()),
        "holder_max": float(hold.max()),
        "holder_dual_max": float(hold_d.max()),
        "size_quantiles": dict(zip(map(str, q), np.quantile(size, q).tolist())),
        "holder_quantiles": dict(zip(map(str, q), np.quantile(hold, q).tolist())),
        "compatibility_on_samples": float(conj.max()),
        "sampled_cubes": [[int(k), int(i)] for k, i in zip(lv, idx)],
        "size_by_level": {int(k): float(size[lv == k].max()) for k in np.unique(lv)},
    }


def testing_scalars(K, lattice):
    """``<S 1_J, 1_J>`` for every cube ``J`` of every level.

    The convolution part is the same for every cube of a level. The modified
    Hilbert correction adds ``|J| int_J 1_{|y|>1}/y dy``, which is symmetric
    in the two slots, so the adjoint gives the same scalars.
    """
    lat = lattice
    conv = KernelDescriptor("riesz" if K.scalar_part == "riesz" else "hilbert", [[1.0]], K.riesz_index)
    out = []
    for k in range(lat.L + 1):
        ind = (lat.cube_of_cells(k) == 0).astype(float)
        base = float(np.sum(apply_scalar(conv, ind, lat) * ind) * lat.cell_volume)
        vals = np.full(lat.n_cubes(k), base)
        if K.scalar_part == "modified_hilbert":
            vals = vals + lat.blocks(modified_correction(lat), k).sum(axis=1) * lat.volume(k)
        out.append(vals)
    return out


def weak_boundedness_check(K, W, p=None, method="auto", interior_only=True):
    """``sup_{J in D(I)} |J|^{-1} (||V_I T_J V_I^{-1}|| + ||V_I' (T*)_J V_I'^{-1}||)``.

    ``(T_J)_{ij} = <T(1_J e_j), 1_J e_i> = A_ij <S 1_J, 1_J>``; the sup over
    ancestors ``I`` of each ``J`` is taken in one top-down pass.
    """
    p = W.p if p is None else float(p)
    lat = W.lattice
    table = reducing_table(W, p, resolve_method(W, p, method))
    A = K.matrix
    s = testing_scalars(K, lat)
    st = testing_scalars(K.transpose(), lat)
    best, arg, per_level = 0.0, None, []
    prim_anc = dual_anc = None
    for k in range(lat.L + 1):
        lv = table[k]
        cp = op_norm_batch(lv.V @ A @ np.linalg.inv(lv.V))
        cd = op_norm_batch(lv.Vd @ A.T @ np.linalg.inv(lv.Vd))
        if interior_only:
            mask = lat.interior_mask(k)
            cp = np.where(mask, cp, 0.0)
            cd = np.where(mask, cd, 0.0)
        if prim_anc is None:
            prim_anc, dual_anc = cp, cd
        else:
            parent = np.zeros(lat.n_cubes(k), dtype=int)
            parent[lat.children_flat(k - 1).ravel()] = np.repeat(np.arange(lat.n_cubes(k - 1)), 2**lat.d)
            prim_anc = np.maximum(prim_anc[parent], cp)
            dual_anc = np.maximum(dual_anc[parent], cd)
        val = (np.abs(s[k]) * prim_anc + np.abs(st[k]) * dual_anc) / lat.volume(k)
        j = int(np.argmax(val))
        per_level.append(float(val[j]))
        if val[j] > best or arg is None:
            best, arg = float(val[j]), {"level": k, "coords": list(lat.coords_of(k, j))}
    return {"value": best, "attaining_cube": arg, "per_level": per_level}


def _gap_distance(lat, kI, kJ):
    """Euclidean gaps between all level-``kI`` and level-``kJ`` cubes, ``(N_J, N_I)``."""
    loI, loJ = lat.cube_lower(kI), lat.cube_lower(kJ)
    hiI, hiJ = loI + lat.side(kI), loJ + lat.side(kJ)
    gap = np.maximum(0.0, np.maximum(loI[None] - hiJ[:, None], loJ[:, None] - hiI[None]))
    return np.linalg.norm(gap, axis=-1)


def _child_position(lat, kI, kJ):
    """For level-``kI`` cubes, the child slot of their level-``kJ`` ancestor containing them."""
    from .analysis import ancestor_index

    slot = np.empty(lat.n_cubes(kJ + 1), dtype=int)
    ch = lat.children_flat(kJ)
    slot[ch] = np.arange(ch.shape[1])[None, :]
    return slot[ancestor_index(lat, kI, kJ + 1)]


def haar_decay_check(K, W, p=None, I0=None, r=5, alpha=None, method="auto", T1adj=None):
    """Bucketed decay ratios of conjugated Haar coefficients of ``T~``.

    ``T~ = T - pi_{T1} - pi_{T*1}^*``. For pairs ``I, J`` inside ``I0`` with
    ``l(I) <= l(J)`` and ``I`` good the ratio is
    ``||V_{I0} T~_{I,J} V_{I0}^{-1}|| D(I,J)^{d+a} / (l(I) l(J))^{(d+a)/2}``
    with ``D = l(I) + l(J) + dist(I, J)``, maximized over signatures.
    ``pi_{T1}`` never meets such pairs; ``pi_{T*1}^*`` contributes
    ``(T*1)_I m_I(h_J)`` when ``I`` lies strictly inside ``J``. Buckets are
    keyed by scale gap and distance class ``floor(log2(1 + dist / l(J)))``.
    """
    from .analysis import ancestor_index

    p = W.p if p is None else float(p)
    lat = W.lattice
    d = lat.d
    a = K.alpha if alpha is None else alpha
    if I0 is None:
        I0 = lat.cube(0, (0,) * d)
    table = reducing_table(W, p, resolve_method(W, p, method))
    V0 = table[I0.level].V[I0.flat]
    conj = float(np.linalg.norm(V0 @ K.matrix @ np.linalg.inv(V0), 2))
    M, _ = scalar_haar_matrix(K, lat)
    S = len(haar_signatures(d))
    Tsign = _sign_table(d)[:-1]
    if T1adj is None:
        T1adj = compute_T1(K.transpose(), lat)
    t1a = [nk + fk for nk, fk in zip(T1adj.near, T1adj.far)]
    starts = np.cumsum([0] + [lat.n_cubes(k) * S for k in range(lat.L)])
    buckets = {}
    for kI in range(I0.level, lat.L):
        good = ~bad_mask(lat, kI, r, a)
        good &= ancestor_index(lat, kI, I0.level) == I0.flat
        for kJ in range(I0.level, kI + 1):
            inJ = ancestor_index(lat, kJ, I0.level) == I0.flat
            blk = M[starts[kJ]:starts[kJ + 1], starts[kI]:starts[kI + 1]]
            blk = blk.reshape(lat.n_cubes(kJ), S, lat.n_cubes(kI), S).copy()
            if kI > kJ:
                nested = ancestor_index(lat, kI, kJ)  # J containing each I
                slot = _child_position(lat, kI, kJ)
                mJ = Tsign[:, slot].T / lat.volume(kJ) ** 0.5  # (N_I, S) m_I(h_J^e')
                iI = np.arange(lat.n_cubes(kI))
                blk[nested, :, iI, :] -= mJ[:, :, None] * t1a[kI][:, None, :]
            mag = np.abs(blk).max(axis=(1, 3))  # (N_J, N_I)
            dist = _gap_distance(lat, kI, kJ)
            lI, lJ = lat.side(kI), lat.side(kJ)
            bound = (lI * lJ) ** ((d + a) / 2) / (lI + lJ + dist) ** (d + a)
            ratio = conj * mag / bound
            dcls = np.floor(np.log2(1.0 + dist / lJ)).astype(int)
            sel = inJ[:, None] & good[None, :]
            for c in np.unique(dcls[sel]):
                key = (kI - kJ, int(c))
                v = float(ratio[sel & (dcls == c)].max())
                buckets[key] = max(buckets.get(key, 0.0), v)
    by_gap = {}
    for (g, _), v in buckets.items():
        by_gap[g] = max(by_gap.get(g, 0.0), v)
    return {
        "buckets": {f"{g},{c}": v for (g, c), v in sorted(buckets.items())},
        "by_gap": dict(sorted(by_gap.items())),
        "conjugation": conj,
        "r": r,
        "I0": {"level": I0.level, "coords": list(I0.coords)},
    }


# norm probing -------------------------------------------------------------------

def singular_cells(W, count=1):
    """Cells where the weight is most anisotropic (largest condition number)."""
    w = np.linalg.eigvalsh(W.flat)
    cond = w[:, -1] / w[:, 0]
    return np.argsort(-cond, kind="stable")[:count]


def probe_ensemble(W, p, ensemble_size=16, seed=0, depth=6, adversarial_depth=4,
                   singular_points=None):
    """Test functions for :func:`empirical_operator_norm`.

    Random Haar polynomials use levels ``< depth`` with Gaussian vector
    coefficients scaled by ``|I|^{1/2}``, seeded per member by
    ``(seed, i)``. Adversarial members are ``e_k 1_Q`` and ``W^{-1/p} e_k 1_Q``
    for cubes ``Q`` at levels ``0..adversarial_depth`` containing a singular
    point of the weight.
    """
    lat = W.lattice
    n = W.n
    S = len(haar_signatures(lat.d))
    depth = min(depth, lat.L)
    members = []
    for i in range(ensemble_size):
        rng = np.random.default_rng([seed, i])
        det = []
        for k in range(lat.L):
            shape = (lat.n_cubes(k), S, n)
            if k < depth:
                det.append(rng.standard_normal(shape) * lat.volume(k) ** 0.5)
            else:
                det.append(np.zeros(shape))
        vals = haar_inverse(HaarCoefficients(lat, det, rng.standard_normal(n)))
        members.append((f"haar:{i}", vals))
    if singular_points is None:
        cells = singular_cells(W)
    else:
        cells = []
        for pt in np.atleast_2d(singular_points):
            idx = np.clip(((np.asarray(pt) - lat.origin) / lat.h).astype(int), 0, lat.n_side - 1)
            cells.append(int(np.ravel_multi_index(tuple(idx), lat.grid_shape)))
    Wm = W.power(-1.0 / p).reshape(lat.grid_shape + (n, n))
    for c in cells:
        for k in range(0, min(adversarial_depth, lat.L) + 1):
            cid = lat.cube_of_cells(k).ravel()[c]
            ind = (lat.cube_of_cells(k) == cid).astype(float)
            for e in range(n):
                v = np.zeros(lat.grid_shape + (n,))
                v[..., e] = ind
                members.append((f"indicator:{k}:{e}", v))
                members.append((f"twisted:{k}:{e}", np.einsum("...ij,...j->...i", Wm, v)))
    return members


def empirical_operator_norm(apply, W, p=None, ensemble_size=16, seed=0, depth=6,
                            adversarial_depth=4, singular_points=None, target="weighted"):
    """Lower bound for ``||T||_{L^p(W) -> L^p(W)}`` from a test ensemble.

    Returns a dict whose ``lower_bound`` is the largest observed ratio
    ``||T f||_{L^p(W)} / ||f||_{L^p(W)}``; it is never an upper bound. With
    ``target="unweighted"`` the numerator is the plain ``L^p`` norm.
    """
    if target not in ("weighted", "unweighted"):
        raise ValidationError(f"unknown target {target!r}")
    Wt = W if target == "weighted" else None
    if ensemble_size < 16:
        raise ValidationError("ensemble_size must be at least 16")
    p = W.p if p is None else float(p)
    lat = W.lattice
    ratios = {}
    for name, vals in probe_ensemble(W, p, ensemble_size, seed, depth, adversarial_depth, singular_points):
        f = SampledFunction(lat, vals)
        den = lp_norm(f, W, p)
        if den == 0:
            continue
        Tf = apply(f)
        ratios[name] = lp_norm(Tf, Wt, p) / den
    best = max(ratios, key=ratios.get) if ratios else None
    return {
        "lower_bound": ratios[best] if best else 0.0,
        "kind": "lower_bound",
        "target": target,
        "argmax": best,
        "ratios": ratios,
    }
