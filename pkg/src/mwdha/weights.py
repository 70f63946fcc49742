"""Matrix weights on a dyadic mesh.

A :class:`MatrixWeight` stores one SPD matrix per finest cell. Everything in
this module treats that piecewise-constant field as the weight itself, so
cube averages and double integrals are finite sums and therefore exact.

Reducing operators are computed for every cube of every level at once and
cached on the weight; see :func:`reducing_table`.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .dyadic import SampledFunction, build_lattice, haar_transform, level_means
from .errors import SingularityError, UnsupportedError, ValidationError
from .linalg import mvee_batch, op_norm_batch, spd_power_batch

PAIR_CAP = 2**20


def conjugate_exponent(p):
    return p / (p - 1.0)


class MatrixWeight:
    """SPD-matrix valued piecewise-constant weight.

    Parameters
    ----------
    lattice : DyadicLattice
    values : ndarray, shape ``grid_shape + (n, n)``
    descriptor : str, optional
        Analytic recipe the values came from, echoed in reports.
    p : float
        Default exponent.
    """

    def __init__(self, lattice, values, descriptor="custom", p=2.0):
        vals = np.asarray(values, dtype=float)
        if vals.ndim != lattice.d + 2 or vals.shape[-1] != vals.shape[-2]:
            raise ValidationError("weight values must be grid_shape + (n, n)")
        if vals.shape[: lattice.d] != lattice.grid_shape:
            raise ValidationError("weight grid does not match lattice")
        scale = np.max(np.abs(vals))
        if np.max(np.abs(vals - np.swapaxes(vals, -1, -2))) > 1e-12 * scale:
            raise ValidationError("weight values must be symmetric")
        self.lattice = lattice
        self.values = 0.5 * (vals + np.swapaxes(vals, -1, -2))
        self.descriptor = descriptor
        self.p = float(p)
        self._cache = {}
        # fail early on non-positive cells
        self.power(1.0)

    @property
    def n(self):
        return self.values.shape[-1]

    @property
    def flat(self):
        return self.values.reshape((self.lattice.n_cells, self.n, self.n))

    def power(self, t):
        """Cellwise ``W**t`` as ``(n_cells, n, n)``."""
        key = ("pow", float(t))
        if key not in self._cache:
            if self.n == 1:
                w = self.flat[:, 0, 0]
                if np.any(w <= 0):
                    i = int(np.argmin(w))
                    raise SingularityError(
                        f"weight is not positive at cell {i}: {w[i]:.3e}", eigenvalue=float(w[i]), where=i
                    )
                self._cache[key] = (w**t)[:, None, None]
            else:
                self._cache[key] = spd_power_batch(self.flat, t, where="weight cell")
        return self._cache[key]

    def as_function(self):
        return SampledFunction(self.lattice, self.values)

    def to_json(self):
        lat = self.lattice
        return json.dumps({
            "d": lat.d,
            "n": self.n,
            "L": lat.L,
            "descriptor": self.descriptor,
            "p": self.p,
            "cells": self.flat.tolist(),
        })

    @classmethod
    def from_json(cls, text, lattice=None):
        obj = json.loads(text)
        if lattice is None:
            lattice = build_lattice(obj["d"], obj["L"])
        n = obj["n"]
        cells = np.asarray(obj["cells"], dtype=float).reshape(lattice.grid_shape + (n, n))
        return cls(lattice, cells, descriptor=obj.get("descriptor", "custom"), p=obj.get("p", 2.0))

    def __repr__(self):
        return f"MatrixWeight(n={self.n}, d={self.lattice.d}, L={self.lattice.L}, descriptor={self.descriptor!r})"


# constructors ---------------------------------------------------------------

def identity_weight(lattice, n=2):
    vals = np.broadcast_to(np.eye(n), lattice.grid_shape + (n, n)).copy()
    return MatrixWeight(lattice, vals, descriptor=f"identity:{n}")


def constant_weight(lattice, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    vals = np.broadcast_to(M, lattice.grid_shape + M.shape).copy()
    return MatrixWeight(lattice, vals, descriptor="constant")


def power_cell_averages(lattice, beta, center=0.0, axis=0):
    """Exact cell averages of ``|x_axis - center|**beta`` on the finest mesh.

    Uses the antiderivative ``sign(u)|u|**(beta+1)/(beta+1)``; requires
    ``beta > -1`` so the power is locally integrable.
    """
    if beta <= -1:
        raise ValidationError("beta must exceed -1 for a locally integrable power")
    h = lattice.h
    edges = lattice.origin[axis] + h * np.arange(lattice.n_side + 1) - center

    def F(u):
        return np.sign(u) * np.abs(u) ** (beta + 1.0) / (beta + 1.0)

    avg = (F(edges[1:]) - F(edges[:-1])) / h
    shape = [1] * lattice.d
    shape[axis] = lattice.n_side
    return np.broadcast_to(avg.reshape(shape), lattice.grid_shape).copy()


def power1d(lattice, betas, center=0.0):
    """``diag(|x_1 - center|**beta_i)`` with exact cell averages."""
    betas = [float(b) for b in betas]
    n = len(betas)
    vals = np.zeros(lattice.grid_shape + (n, n))
    for i, b in enumerate(betas):
        vals[..., i, i] = power_cell_averages(lattice, b, center)
    desc = "power1d:" + ",".join(f"{b:g}" for b in betas)
    if center != 0.0:
        desc += f"@{center:g}"
    return MatrixWeight(lattice, vals, descriptor=desc)


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def power_mixture(lattice, terms, rotations=None, descriptor="power-mixture"):
    """Weight ``U(x) diag(lam_1(x), ..., lam_n(x)) U(x)^T``.

    Parameters
    ----------
    terms : list of list of (coef, beta, center)
        ``lam_i = sum coef |x_1 - center|**beta`` with exact cell averages.
    rotations : ndarray, optional
        Either one orthogonal matrix or one per finest cell
        (``grid_shape + (n, n)``).
    """
    n = len(terms)
    lam = np.zeros(lattice.grid_shape + (n,))
    for i, parts in enumerate(terms):
        for c, b, a in parts:
            lam[..., i] += c * power_cell_averages(lattice, b, a)
    vals = np.zeros(lattice.grid_shape + (n, n))
    idx = np.arange(n)
    vals[..., idx, idx] = lam
    if rotations is not None:
        U = np.asarray(rotations, dtype=float)
        vals = np.einsum("...ij,...j,...kj->...ik", np.broadcast_to(U, vals.shape), lam,
                         np.broadcast_to(U, vals.shape))
    return MatrixWeight(lattice, vals, descriptor=descriptor)


def from_descriptor(desc, lattice, n=None):
    """Build a weight from a descriptor string.

    Recognized forms: ``identity[:n]``, ``constant:a,b,...`` (diagonal),
    ``power1d:b1,b2,...[@center]``, ``a2-family:seed``.
    """
    name, _, arg = desc.partition(":")
    name = name.strip()
    if name == "identity":
        return identity_weight(lattice, int(arg) if arg else (n or 2))
    if name == "constant":
        diag = [float(v) for v in arg.split(",")]
        w = constant_weight(lattice, np.diag(diag))
        w.descriptor = desc
        return w
    if name == "power1d":
        body, _, ctr = arg.partition("@")
        return power1d(lattice, [float(v) for v in body.split(",")], float(ctr) if ctr else 0.0)
    if name == "a2-family":
        from .families import random_ap_weight

        return random_ap_weight(lattice, seed=int(arg), n=n or 2)
    raise ValidationError(f"unknown weight descriptor {desc!r}")


# averages and reducing operators ---------------------------------------------

def cell_average(W, cube):
    """Average of the weight over ``cube`` (arithmetic mean of cell values)."""
    lat = W.lattice
    blk = lat.blocks(W.values, cube.level)[cube.flat]
    return blk.mean(axis=0)


def _all_level_means(lattice, cellvals):
    return level_means(cellvals.reshape(lattice.grid_shape + cellvals.shape[1:]), lattice)


def direction_samples(n, seed=0):
    """Unit directions used to sample reducing norms.

    ``n = 2``: 64 angles on the half circle. ``n >= 3``: ``2**(5n-4)``
    seeded Gaussian directions. Antipodes are redundant for centered
    ellipsoids and are not included.
    """
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        th = np.pi * np.arange(64) / 64
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    m = 2 ** (5 * n - 4)
    E = np.random.default_rng([seed, n]).standard_normal((m, n))
    return E / np.linalg.norm(E, axis=1, keepdims=True)


def rho_table(W, p, dual=False, directions=None):
    """Sampled reducing norms for every cube of every level.

    ``rho[k][i, m] = (avg_{I} |W^{s}(x) e_m|**q)**(1/q)`` with ``s = 1/p``,
    ``q = p`` or, for ``dual``, ``s = -1/p`` and ``q = p'``.
    """
    if directions is None:
        directions = direction_samples(W.n)
    q = conjugate_exponent(p) if dual else p
    s = -1.0 / p if dual else 1.0 / p
    Ws = W.power(s)
    vals = np.linalg.norm(np.einsum("cij,mj->cmi", Ws, directions), axis=-1) ** q
    means = _all_level_means(W.lattice, vals)
    return [m ** (1.0 / q) for m in means], directions


def _fit_reducing(rho, directions, tol):
    """John-ellipsoid reducing operators from sampled norms ``rho (N, m)``."""
    n = directions.shape[1]
    pts = directions[None, :, :] / rho[:, :, None]
    E, _, gap = mvee_batch(pts, tol=tol)
    V = np.sqrt(n) * E
    # enforce rho <= |V e| on the samples; John guarantees this up to the gap
    ve = np.linalg.norm(np.einsum("bij,mj->bmi", V, directions), axis=-1)
    lift = np.maximum(np.max(rho / ve, axis=1), 1.0)
    return V * lift[:, None, None], gap, lift


@dataclass
class ReducingLevel:
    """Reducing operators for all cubes of one level."""

    V: np.ndarray
    Vd: np.ndarray
    method: str
    distortion: float


@dataclass
class ReducingPair:
    """Reducing operators of one cube."""

    cube: object
    V: np.ndarray
    V_dual: np.ndarray
    method: str


def resolve_method(W, p, method="auto"):
    if method == "auto":
        if W.n == 1:
            return "scalar"
        if abs(p - 2.0) < 1e-15:
            return "exact_p2"
        return "mvee"
    if method == "exact_p2" and abs(p - 2.0) > 1e-15:
        raise ValidationError("exact_p2 requires p = 2")
    if method == "scalar" and W.n != 1:
        raise ValidationError("scalar method requires n = 1")
    if method not in ("exact_p2", "scalar", "mvee"):
        raise ValidationError(f"unknown reducing method {method!r}")
    return method


def reducing_table(W, p=None, method="auto", tol=1e-6):
    """Reducing operators ``V_I`` and ``V_I'`` for every cube of every level.

    Returns a list indexed by level of :class:`ReducingLevel`. Results are
    memoized on the weight under ``(p, method, tol)``.

    Notes
    -----
    ``exact_p2`` uses ``V = (m_I W)**(1/2)`` and ``V' = (m_I W^{-1})**(1/2)``.
    ``scalar`` uses ``V = (m_I w)**(1/p)`` and ``V' = (m_I w**(-p'/p))**(1/p')``.
    ``mvee`` fits a John ellipsoid to sampled reducing norms, scaled so that
    ``rho(e) <= |V e| <= sqrt(n) rho(e)`` on the samples. Whenever
    ``||V V'|| < 1`` the dual is rescaled by ``1 / ||V V'||``.
    """
    p = W.p if p is None else float(p)
    method = resolve_method(W, p, method)
    key = ("reducing", p, method, tol)
    if key in W._cache:
        return W._cache[key]
    lat = W.lattice
    n = W.n
    pd = conjugate_exponent(p)
    levels = []
    if method == "exact_p2":
        mW = _all_level_means(lat, W.flat)
        mWi = _all_level_means(lat, W.power(-1.0))
        for k in range(lat.L + 1):
            V = spd_power_batch(mW[k], 0.5, where=f"level {k}")
            Vd = spd_power_batch(mWi[k], 0.5, where=f"level {k}")
            levels.append(ReducingLevel(V, Vd, method, 1.0))
    elif method == "scalar":
        w = W.flat[:, 0, 0]
        m1 = _all_level_means(lat, w)
        m2 = _all_level_means(lat, w ** (-pd / p))
        for k in range(lat.L + 1):
            levels.append(ReducingLevel(
                (m1[k] ** (1.0 / p))[:, None, None], (m2[k] ** (1.0 / pd))[:, None, None], method, 1.0
            ))
    else:
        rho, dirs = rho_table(W, p)
        rhod, _ = rho_table(W, p, dual=True, directions=dirs)
        allr = np.concatenate(rho)
        allrd = np.concatenate(rhod)
        V, gap, _ = _fit_reducing(allr, dirs, tol)
        Vd, gapd, _ = _fit_reducing(allrd, dirs, tol)
        dist = float(np.sqrt(n) * (1.0 + max(gap.max(), gapd.max())))
        start = 0
        for k in range(lat.L + 1):
            N = lat.n_cubes(k)
            levels.append(ReducingLevel(V[start:start + N], Vd[start:start + N], method, dist))
            start += N
    for lv in levels:
        nrm = op_norm_batch(lv.V @ lv.Vd)
        low = nrm < 1.0
        if np.any(low):
            lv.Vd = lv.Vd.copy()
            lv.Vd[low] /= nrm[low][:, None, None]
    W._cache[key] = levels
    return levels


def reducing_operator(W, cube, p=None, method="auto", tol=1e-6):
    """:class:`ReducingPair` for a single cube."""
    p = W.p if p is None else float(p)
    method = resolve_method(W, p, method)
    if method == "mvee" and ("reducing", p, method, tol) not in W._cache:
        # fit only this cube instead of the whole table
        cells = W.lattice.cube_of_cells(cube.level).ravel() == cube.flat
        dirs = direction_samples(W.n)
        fits = []
        for dual in (False, True):
            q = conjugate_exponent(p) if dual else p
            Ws = W.power(-1.0 / p if dual else 1.0 / p)[cells]
            vals = np.linalg.norm(np.einsum("cij,mj->cmi", Ws, dirs), axis=-1) ** q
            fits.append(_fit_reducing(vals.mean(axis=0, keepdims=True) ** (1.0 / q), dirs, tol)[0][0])
        V, Vd = fits
        nrm = op_norm_batch(V @ Vd)
        if nrm < 1.0:
            Vd = Vd / nrm
        return ReducingPair(cube, V, Vd, method)
    lv = reducing_table(W, p, method, tol)[cube.level]
    i = cube.flat
    return ReducingPair(cube, lv.V[i], lv.Vd[i], method)


# characteristics ------------------------------------------------------------

@dataclass
class CharacteristicResult:
    """Value of a supremum over cubes together with its provenance."""

    value: float
    attaining_cube: dict
    method: str
    distortion_bound: float = 1.0
    truncation_deficit: float = 0.0
    sampling_error: float = 0.0
    per_level: list = field(default_factory=list)

    def to_json(self):
        return {
            "value": self.value,
            "attaining_cube": self.attaining_cube,
            "method": self.method,
            "distortion_bound": self.distortion_bound,
            "truncation_deficit": self.truncation_deficit,
            "sampling_error": self.sampling_error,
            "per_level": self.per_level,
        }


def _cube_record(lattice, k, i):
    return {"level": int(k), "coords": [int(c) for c in lattice.coords_of(k, int(i))]}


def _ap_inner(Wp, Wm, pd, p):
    """Per-x outer integrand for one cube: ``(avg_t ||Wp(x) Wm(t)||^p')^(p/p')``."""
    prod = np.einsum("xij,tjk->xtik", Wp, Wm)
    nrm = op_norm_batch(prod)
    return np.mean(nrm**pd, axis=1) ** (p / pd)


def ap_characteristic(W, p=None, pair_cap=PAIR_CAP, seed=0, interior_only=True):
    """Matrix A_p characteristic as a supremum over lattice cubes.

    For each cube ``I`` computes
    ``avg_{x in I} (avg_{t in I} ||W^{1/p}(x) W^{-1/p}(t)||^{p'})^{p/p'}``
    as an exact double sum over finest cells. Cubes with more than
    ``pair_cap`` cell pairs use a stratified sample of ``x`` cells, one per
    stratum, with the inner average still exact; the standard error of the
    sampled cubes is returned as ``sampling_error``.
    """
    p = W.p if p is None else float(p)
    pd = conjugate_exponent(p)
    lat = W.lattice
    Wp = W.power(1.0 / p)
    Wm = W.power(-1.0 / p)
    n = W.n
    best, arg, serr = -np.inf, None, 0.0
    per_level = []
    rng = np.random.default_rng(seed)
    for k in range(lat.L + 1):
        m = 2 ** (lat.d * (lat.L - k))
        bp = lat.blocks(Wp.reshape(lat.grid_shape + (n, n)), k)
        bm = lat.blocks(Wm.reshape(lat.grid_shape + (n, n)), k)
        interior = lat.interior_mask(k) if interior_only else np.ones(lat.n_cubes(k), bool)
        vals = np.full(lat.n_cubes(k), -np.inf)
        errs = np.zeros(lat.n_cubes(k))
        if m * m <= pair_cap:
            chunk = max(1, (1 << 22) // (m * m))
            for s in range(0, lat.n_cubes(k), chunk):
                P = np.einsum("bxij,btjk->bxtik", bp[s:s + chunk], bm[s:s + chunk])
                nrm = op_norm_batch(P)
                vals[s:s + chunk] = np.mean(np.mean(nrm**pd, axis=2) ** (p / pd), axis=1)
        else:
            ns = max(1, pair_cap // m)
            size = m // ns
            for i in range(lat.n_cubes(k)):
                pick = np.arange(ns) * size + rng.integers(0, size, size=ns)
                outer = _ap_inner(bp[i][pick], bm[i], pd, p)
                vals[i] = outer.mean()
                errs[i] = outer.std(ddof=1) / np.sqrt(ns) if ns > 1 else 0.0
        vals = np.where(interior, vals, -np.inf)
        j = int(np.argmax(vals))
        per_level.append(float(vals[j]))
        if vals[j] > best:
            best, arg, serr = float(vals[j]), _cube_record(lat, k, j), float(errs[j])
    return CharacteristicResult(best, arg, "double_sum", 1.0, 0.0, serr, per_level)


def ap_characteristic_reducing(W, p=None, method="auto", interior_only=True):
    """``sup_I ||V_I V_I'||**p`` over lattice cubes."""
    p = W.p if p is None else float(p)
    method = resolve_method(W, p, method)
    table = reducing_table(W, p, method)
    lat = W.lattice
    best, arg, per_level = -np.inf, None, []
    for k, lv in enumerate(table):
        v = op_norm_batch(lv.V @ lv.Vd) ** p
        if interior_only:
            v = np.where(lat.interior_mask(k), v, -np.inf)
        j = int(np.argmax(v))
        per_level.append(float(v[j]))
        if v[j] > best:
            best, arg = float(v[j]), _cube_record(lat, k, j)
    dist = max(lv.distortion for lv in table)
    return CharacteristicResult(best, arg, method, dist, 0.0, 0.0, per_level)


def b2p_characteristic(W, p=None, method="auto", interior_only=True):
    """B_{2,p} characteristic on a one-dimensional lattice.

    ``sup_I |I| sum_{cells t outside I} ||V_I^{-1} W^{1/p}(t)|| int_cell (t - c_I)^{-2} dt``
    with each kernel integral taken exactly over the cell. The region
    outside the base interval is omitted; ``truncation_deficit`` is the
    missing tail at the attaining interval when the weight is continued by
    its edge-cell values.
    """
    lat = W.lattice
    if lat.d != 1:
        raise UnsupportedError("B_{2,p} characteristic is defined for d = 1 only")
    p = W.p if p is None else float(p)
    method = resolve_method(W, p, method)
    table = reducing_table(W, p, method)
    Wp = W.power(1.0 / p)
    edges = lat.origin[0] + lat.h * np.arange(lat.n_side + 1)
    lo_base, hi_base = edges[0], edges[-1]
    cell_starts = np.arange(lat.n_side)
    best, arg, deficit, per_level = -np.inf, None, 0.0, []
    for k, lv in enumerate(table):
        Vi = np.linalg.inv(lv.V)
        centers = lat.cube_center(k)[:, 0]
        start = lat.cube_start(k)[:, 0]
        m = 2 ** (lat.L - k)
        vol = lat.volume(k)
        vals = np.empty(lat.n_cubes(k))
        tails = np.empty(lat.n_cubes(k))
        chunk = max(1, (1 << 21) // lat.n_side)
        for s in range(0, lat.n_cubes(k), chunk):
            e = slice(s, s + chunk)
            nrm = op_norm_batch(np.einsum("bij,cjk->bcik", Vi[e], Wp))
            c = centers[e][:, None]
            a = edges[None, :-1] - c
            b = edges[None, 1:] - c
            with np.errstate(divide="ignore"):
                ker = np.abs(1.0 / a - 1.0 / b)
            rel = (cell_starts[None, :] - start[e][:, None]) % lat.n_side
            outside = rel >= m
            vals[e] = vol * np.sum(np.where(outside, nrm * ker, 0.0), axis=1)
            tails[e] = vol * (nrm[:, 0] / (c[:, 0] - lo_base) + nrm[:, -1] / (hi_base - c[:, 0]))
        if interior_only:
            vals = np.where(lat.interior_mask(k), vals, -np.inf)
        j = int(np.argmax(vals))
        per_level.append(float(vals[j]))
        if vals[j] > best:
            best, arg, deficit = float(vals[j]), _cube_record(lat, k, j), float(tails[j])
    dist = max(lv.distortion for lv in table)
    return CharacteristicResult(best, arg, method, dist, deficit, 0.0, per_level)


# norms and maximal function -----------------------------------------------

def lp_norm(f, W=None, p=2.0):
    """``(sum_cells |W^{1/p} f|^p vol)^{1/p}``; unweighted when ``W`` is None.

    Matrix-valued ``f`` uses the spectral norm of ``W^{1/p} f`` cellwise.
    """
    vals = f.values if isinstance(f, SampledFunction) else np.asarray(f)
    lat = f.lattice if isinstance(f, SampledFunction) else W.lattice
    flat = vals.reshape((lat.n_cells,) + vals.shape[lat.d:])
    if W is not None:
        if W.lattice != lat:
            raise ValidationError("function and weight lattices differ")
        Wp = W.power(1.0 / p)
        if flat.ndim == 2:
            flat = np.einsum("cij,cj->ci", Wp, flat)
        else:
            flat = Wp @ flat
    if flat.ndim == 1:
        mag = np.abs(flat)
    elif flat.ndim == 2:
        mag = np.linalg.norm(flat, axis=1)
    else:
        mag = op_norm_batch(flat)
    return float((np.sum(mag**p) * lat.cell_volume) ** (1.0 / p))


def square_function_norm(f, W=None, p=2.0, method="auto"):
    """Weighted dyadic square function norm.

    ``(int (sum_{I, eps} |V_I f_I^eps|^2 / |I| 1_I)^{p/2})^{1/p}`` using the
    reducing operators of ``W`` (identity when ``W`` is None).
    """
    lat = f.lattice
    coeffs = haar_transform(f)
    S2 = np.zeros(lat.grid_shape)
    table = reducing_table(W, p, method) if W is not None else None
    for k, det in enumerate(coeffs.details):
        if table is not None:
            det = np.einsum("bij,bsj->bsi", table[k].V, det)
        e = np.sum(det**2, axis=tuple(range(1, det.ndim))) / lat.volume(k)
        S2 += e[lat.cube_of_cells(k)]
    return float((np.sum(S2 ** (p / 2.0)) * lat.cell_volume) ** (1.0 / p))


def weighted_maximal(W, B, p=None, method="auto"):
    """``M'_W B*(x) = max_{I ni x} m_I ||V_I W^{-1/p} B*||`` on finest cells."""
    p = W.p if p is None else float(p)
    lat = W.lattice
    n = W.n
    table = reducing_table(W, p, method)
    Bt = np.swapaxes(B.values, -1, -2).reshape((lat.n_cells, n, n))
    G = (W.power(-1.0 / p) @ Bt).reshape(lat.grid_shape + (n, n))
    out = np.zeros(lat.grid_shape)
    for k in range(lat.L + 1):
        blk = lat.blocks(G, k)
        avg = op_norm_batch(np.einsum("bij,bcjk->bcik", table[k].V, blk)).mean(axis=1)
        out = np.maximum(out, avg[lat.cube_of_cells(k)])
    return SampledFunction(lat, out)
