"""Dyadic lattices, Haar system and good/bad cube classification.

A lattice lives on the half-open base cube ``[a, a + 2**k0)**d`` meshed into
``2**(d*L)`` finest cells of side ``h = 2**(k0 - L)``. Cubes at level ``k``
have side ``2**(k0 - k)`` and are addressed by integer coordinates in
``[0, 2**k)**d``.

Shifted lattices translate level ``k`` by ``sum_{j>k} omega_j 2**(k0 - j)``
with ``omega_j`` in ``{0, 1}**d``. Only ``j <= L`` is kept, so every shift is
a whole number of finest cells and all cubes stay unions of mesh cells. The
base cube is treated as a torus: a shifted cube that runs past the far face
wraps around. Such wrapped cubes still give an exact orthonormal Haar system,
but they are not geometric cubes, and :meth:`DyadicLattice.interior_mask`
flags them so suprema can skip them.
"""
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ResourceLimitError, ValidationError

DEFAULT_CELL_CAP = 2**24


@dataclass(frozen=True)
class DyadicLattice:
    """Finite (possibly shifted) dyadic lattice on a base cube.

    Parameters
    ----------
    d : int
        Spatial dimension, 1 to 3.
    L : int
        Finest level.
    origin : tuple of float
        Lower corner ``a`` of the base cube.
    k0 : int
        Base cube side is ``2**k0``.
    shift : tuple of tuple of int
        ``shift[j-1]`` is ``omega_j`` for ``j = 1..L``.
    """

    d: int
    L: int
    origin: tuple = None
    k0: int = 0
    shift: tuple = None

    def __post_init__(self):
        if self.origin is None:
            object.__setattr__(self, "origin", (0.0,) * self.d)
        if self.shift is None:
            object.__setattr__(self, "shift", ((0,) * self.d,) * self.L)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(
            self, "shift", tuple(tuple(int(b) for b in w) for w in self.shift)
        )
        if len(self.origin) != self.d:
            raise ValidationError("origin must have d entries")
        if len(self.shift) != self.L or any(len(w) != self.d for w in self.shift):
            raise ValidationError("shift must hold L vectors of length d")
        if any(b not in (0, 1) for w in self.shift for b in w):
            raise ValidationError("shift entries must be 0 or 1")

    # geometry -----------------------------------------------------------
    @property
    def n_side(self):
        """Finest cells per axis."""
        return 2**self.L

    @property
    def n_cells(self):
        return 2 ** (self.d * self.L)

    @property
    def grid_shape(self):
        return (self.n_side,) * self.d

    @property
    def base_side(self):
        return 2.0**self.k0

    @property
    def h(self):
        """Finest cell side."""
        return 2.0 ** (self.k0 - self.L)

    @property
    def cell_volume(self):
        return self.h**self.d

    @property
    def is_standard(self):
        return not any(b for w in self.shift for b in w)

    def side(self, k):
        return 2.0 ** (self.k0 - k)

    def volume(self, k):
        return self.side(k) ** self.d

    def n_cubes(self, k):
        return 2 ** (self.d * k)

    def offset(self, k):
        """Per-axis translation of level ``k`` in finest-cell units."""
        off = np.zeros(self.d, dtype=np.int64)
        for j in range(k + 1, self.L + 1):
            off += np.asarray(self.shift[j - 1], dtype=np.int64) << (self.L - j)
        return off

    def cube_coords(self, k):
        """Integer coordinates of all level-``k`` cubes, shape ``(2**(d k), d)``."""
        axes = [np.arange(2**k)] * self.d
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.d)

    def cube_start(self, k, coords=None):
        """First finest-cell index (per axis, mod ``2**L``) of level-``k`` cubes."""
        if coords is None:
            coords = self.cube_coords(k)
        coords = np.asarray(coords, dtype=np.int64)
        return (coords * 2 ** (self.L - k) + self.offset(k)) % self.n_side

    def cube_lower(self, k, coords=None):
        """Lower corner of each cube (torus coordinates)."""
        return np.asarray(self.origin) + self.cube_start(k, coords) * self.h

    def cube_center(self, k, coords=None):
        return self.cube_lower(k, coords) + 0.5 * self.side(k)

    def interior_mask(self, k):
        """True for level-``k`` cubes that do not wrap around the torus."""
        off = self.offset(k)
        c = self.cube_coords(k)
        wraps = (c == 2**k - 1) & (off > 0)
        return ~np.any(wraps, axis=1)

    def cell_centers(self):
        """Finest-cell centers, shape ``grid_shape + (d,)``."""
        axes = [self.origin[i] + (np.arange(self.n_side) + 0.5) * self.h for i in range(self.d)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1)

    # block views ----------------------------------------------------------
    def blocks(self, values, k):
        """Group finest-cell data by level-``k`` cube.

        Returns an array of shape ``(2**(d k), 2**(d (L-k))) + vshape`` whose
        first axis follows :meth:`cube_coords` ordering.
        """
        values = np.asarray(values)
        d, L = self.d, self.L
        vshape = values.shape[d:]
        off = self.offset(k)
        if np.any(off):
            values = np.roll(values, tuple(-int(o) for o in off), axis=tuple(range(d)))
        m = 2 ** (L - k)
        shp = []
        for _ in range(d):
            shp += [2**k, m]
        v = values.reshape(tuple(shp) + vshape)
        perm = [2 * i for i in range(d)] + [2 * i + 1 for i in range(d)]
        perm += list(range(2 * d, 2 * d + len(vshape)))
        v = v.transpose(perm)
        return v.reshape((2 ** (d * k), m**d) + vshape)

    def unblocks(self, blocks, k):
        """Inverse of :meth:`blocks`."""
        blocks = np.asarray(blocks)
        d, L = self.d, self.L
        vshape = blocks.shape[2:]
        m = 2 ** (L - k)
        v = blocks.reshape((2**k,) * d + (m,) * d + vshape)
        perm = []
        for i in range(d):
            perm += [i, d + i]
        perm += list(range(2 * d, 2 * d + len(vshape)))
        v = v.transpose(perm).reshape(self.grid_shape + vshape)
        off = self.offset(k)
        if np.any(off):
            v = np.roll(v, tuple(int(o) for o in off), axis=tuple(range(d)))
        return v

    def block_means(self, values, k):
        return self.blocks(values, k).mean(axis=1)

    def cube_of_cells(self, k):
        """Flat level-``k`` cube index of every finest cell (grid-shaped)."""
        idx = np.arange(self.n_cubes(k))[:, None] * np.ones((1, 2 ** (self.d * (self.L - k))), int)
        return self.unblocks(idx, k)

    def cube(self, level, coords):
        return DyadicCube(level, tuple(int(c) for c in np.atleast_1d(coords)), self)

    def flat_index(self, k, coords):
        return int(np.ravel_multi_index(tuple(np.atleast_1d(coords)), (2**k,) * self.d))

    def coords_of(self, k, flat):
        return tuple(int(c) for c in np.unravel_index(flat, (2**k,) * self.d))

    def children_flat(self, k):
        """Flat level-``k+1`` indices of the children of each level-``k`` cube.

        Shape ``(2**(d k), 2**d)`` with the child axis in ``{0,1}**d``
        product order (``chi = 0`` is the lower half on each axis).
        """
        w = np.asarray(self.shift[k], dtype=np.int64)
        c = self.cube_coords(k)
        chis = np.array(list(itertools.product((0, 1), repeat=self.d)))
        ch = (2 * c[:, None, :] + w + chis[None]) % 2 ** (k + 1)
        return np.ravel_multi_index(tuple(np.moveaxis(ch, -1, 0)), (2 ** (k + 1),) * self.d)

    def to_json(self):
        return {
            "d": self.d,
            "L": self.L,
            "origin": list(self.origin),
            "k0": self.k0,
            "shift": [list(w) for w in self.shift],
        }


@dataclass(frozen=True)
class DyadicCube:
    """Cube of a lattice addressed by level and integer coordinates."""

    level: int
    coords: tuple
    lattice: DyadicLattice = field(repr=False, compare=False)

    @property
    def side(self):
        return self.lattice.side(self.level)

    @property
    def volume(self):
        return self.lattice.volume(self.level)

    @property
    def flat(self):
        return self.lattice.flat_index(self.level, self.coords)

    @property
    def lower(self):
        return self.lattice.cube_lower(self.level, [self.coords])[0]

    @property
    def center(self):
        return self.lower + 0.5 * self.side

    def children(self):
        lat, k = self.lattice, self.level
        if k >= lat.L:
            return []
        w = lat.shift[k]
        out = []
        for chi in itertools.product((0, 1), repeat=lat.d):
            c = tuple((2 * a + b + x) % 2 ** (k + 1) for a, b, x in zip(self.coords, w, chi))
            out.append(DyadicCube(k + 1, c, lat))
        return out

    def contains_cell(self, cell):
        """Whether finest cell ``cell`` (integer index tuple) lies in the cube."""
        lat = self.lattice
        start = lat.cube_start(self.level, [self.coords])[0]
        rel = (np.asarray(cell) - start) % lat.n_side
        return bool(np.all(rel < 2 ** (lat.L - self.level)))

    def to_json(self):
        return {"level": self.level, "coords": list(self.coords)}


def build_lattice(d, L, shift=0, origin=None, k0=0, cell_cap=DEFAULT_CELL_CAP):
    """Create a lattice with ``2**(d L)`` finest cells.

    Parameters
    ----------
    shift : 0, str or array_like
        ``0`` for the standard lattice, ``"random(seed)"`` for i.i.d. uniform
        ``omega_j``, or an explicit ``(L, d)`` array of bits.
    cell_cap : int
        Raise :class:`ResourceLimitError` above this many cells.
    """
    if not 1 <= d <= 3:
        raise ValidationError("d must be 1, 2 or 3")
    if not 1 <= L or d * L > 24:
        raise ValidationError("need 1 <= L <= 24/d")
    if 2 ** (d * L) > cell_cap:
        raise ResourceLimitError(f"2^{d * L} cells exceeds cap {cell_cap}")
    if isinstance(shift, str):
        s = shift.strip()
        if not (s.startswith("random(") and s.endswith(")")):
            raise ValidationError(f"unrecognized shift {shift!r}")
        seed = int(s[len("random("):-1])
        omega = np.random.default_rng(seed).integers(0, 2, size=(L, d))
    elif np.isscalar(shift) and shift == 0:
        omega = np.zeros((L, d), dtype=int)
    else:
        omega = np.asarray(shift, dtype=int).reshape(L, d)
    return DyadicLattice(d=d, L=L, origin=origin, k0=k0, shift=tuple(map(tuple, omega)))


# Haar system ----------------------------------------------------------------

def haar_signatures(d):
    """All cancellative signatures ``{0,1}**d`` minus the all-ones vector."""
    return [e for e in itertools.product((0, 1), repeat=d) if not all(e)]


def _sign_table(d):
    """``T[e, chi] = prod_{i: e_i = 0} (+1 if chi_i = 0 else -1)`` over all e."""
    sigs = list(itertools.product((0, 1), repeat=d))
    T = np.ones((len(sigs), len(sigs)))
    for a, e in enumerate(sigs):
        for b, chi in enumerate(sigs):
            for ei, ci in zip(e, chi):
                if ei == 0 and ci == 1:
                    T[a, b] = -T[a, b]
    return T


def haar_eval(cube, eps, x):
    """Value of ``h_I^eps`` at point ``x``.

    ``eps[i] = 1`` gives the normalized indicator factor on axis ``i`` and
    ``eps[i] = 0`` the normalized difference of left and right halves.
    """
    eps = tuple(int(e) for e in eps)
    lat = cube.lattice
    if len(eps) != lat.d or all(eps):
        raise ValidationError(f"invalid Haar signature {eps}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    pos = (x - np.asarray(lat.origin)) / lat.h
    start = lat.cube_start(cube.level, [cube.coords])[0]
    m = 2.0 ** (lat.L - cube.level)
    rel = np.mod(pos - start, lat.n_side)
    if np.any(rel >= m):
        return 0.0
    val = cube.volume ** -0.5
    for e, t in zip(eps, rel):
        if e == 0 and t >= 0.5 * m:
            val = -val
    return val


@dataclass
class HaarCoefficients:
    """Haar expansion of a piecewise-constant function.

    Attributes
    ----------
    lattice : DyadicLattice
    details : list of ndarray
        ``details[k]`` has shape ``(2**(d k), S) + vshape`` with the signature
        axis ordered as :func:`haar_signatures`.
    mean : ndarray
        Average over the base cube.
    """

    lattice: DyadicLattice
    details: list
    mean: np.ndarray

    @property
    def vshape(self):
        return np.shape(self.mean)

    def __add__(self, other):
        return HaarCoefficients(
            self.lattice, [a + b for a, b in zip(self.details, other.details)], self.mean + other.mean
        )

    def scale(self, c):
        return HaarCoefficients(self.lattice, [c * a for a in self.details], c * self.mean)

    def get(self, level, coords, eps):
        sigs = haar_signatures(self.lattice.d)
        return self.details[level][self.lattice.flat_index(level, coords), sigs.index(tuple(eps))]

    def detail_energy(self):
        return float(sum(np.sum(np.abs(a) ** 2) for a in self.details))

    def max_norm(self):
        """Largest spectral (matrix), Euclidean (vector) or absolute value of any detail."""
        best = 0.0
        for a in self.details:
            if a.size == 0:
                continue
            if a.ndim == 4:
                v = np.linalg.norm(a, ord=2, axis=(-2, -1))
            elif a.ndim == 3:
                v = np.linalg.norm(a, axis=-1)
            else:
                v = np.abs(a)
            best = max(best, float(v.max()))
        return best

    def records(self):
        """JSON-ready list of ``{level, coords, signature, value}`` records."""
        lat = self.lattice
        sigs = haar_signatures(lat.d)
        out = []
        for k, a in enumerate(self.details):
            coords = lat.cube_coords(k)
            for i in range(a.shape[0]):
                for s, e in enumerate(sigs):
                    v = a[i, s]
                    out.append({
                        "level": k,
                        "coords": [int(c) for c in coords[i]],
                        "signature": list(e),
                        "value": np.asarray(v).tolist(),
                    })
        return out

    def to_json(self):
        return json.dumps({
            "lattice": self.lattice.to_json(),
            "mean": np.asarray(self.mean).tolist(),
            "coefficients": self.records(),
        })

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        lat = DyadicLattice(**{k: v for k, v in obj["lattice"].items()})
        mean = np.asarray(obj["mean"], dtype=float)
        sigs = haar_signatures(lat.d)
        details = [np.zeros((lat.n_cubes(k), len(sigs)) + mean.shape) for k in range(lat.L)]
        for r in obj["coefficients"]:
            k = r["level"]
            details[k][lat.flat_index(k, r["coords"]), sigs.index(tuple(r["signature"]))] = r["value"]
        return cls(lat, details, mean)


@dataclass(frozen=True)
class SampledFunction:
    """Piecewise-constant function on the finest mesh of a lattice.

    ``values`` has shape ``lattice.grid_shape + vshape`` where ``vshape`` is
    ``()`` (scalar), ``(n,)`` (vector) or ``(n, n)`` (matrix).
    """

    lattice: DyadicLattice
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[: self.lattice.d] != self.lattice.grid_shape:
            raise ValidationError(
                f"values shape {v.shape} does not match lattice grid {self.lattice.grid_shape}"
            )
        object.__setattr__(self, "values", v)

    @property
    def vshape(self):
        return self.values.shape[self.lattice.d:]

    @property
    def flat(self):
        """Values as ``(n_cells,) + vshape``."""
        return self.values.reshape((self.lattice.n_cells,) + self.vshape)

    def transpose(self):
        """Pointwise matrix transpose ``B*``."""
        return SampledFunction(self.lattice, np.swapaxes(self.values, -1, -2))

    def __add__(self, other):
        o = other.values if isinstance(other, SampledFunction) else other
        return SampledFunction(self.lattice, self.values + o)

    def __sub__(self, other):
        o = other.values if isinstance(other, SampledFunction) else other
        return SampledFunction(self.lattice, self.values - o)

    def __mul__(self, c):
        return SampledFunction(self.lattice, self.values * c)

    __rmul__ = __mul__


def _values_of(f, lattice):
    if isinstance(f, SampledFunction):
        if lattice is not None and f.lattice != lattice:
            raise ValidationError("function and lattice handles differ")
        return f.lattice, np.asarray(f.values, dtype=float)
    if lattice is None:
        raise ValidationError("a lattice is required for raw arrays")
    vals = np.asarray(f, dtype=float)
    if vals.shape[: lattice.d] != lattice.grid_shape:
        raise ValidationError(f"array shape {vals.shape} does not match lattice {lattice.grid_shape}")
    return lattice, vals


def level_means(values, lattice):
    """Cube averages at every level: list ``means[k]`` of shape ``(2**(d k),) + vshape``."""
    lat = lattice
    vshape = values.shape[lat.d:]
    means = [None] * (lat.L + 1)
    means[lat.L] = values.reshape((lat.n_cells,) + vshape)
    for k in range(lat.L - 1, -1, -1):
        ch = lat.children_flat(k)
        means[k] = means[k + 1][ch].mean(axis=1)
    return means


def haar_transform(f, lattice=None):
    """Exact Haar expansion of piecewise-constant data.

    Parameters
    ----------
    f : SampledFunction or ndarray
        Values on the finest mesh, shape ``grid_shape + vshape``.
    lattice : DyadicLattice, optional
        Required when ``f`` is a raw array.

    Returns
    -------
    HaarCoefficients
    """
    lat, vals = _values_of(f, lattice)
    d = lat.d
    T = _sign_table(d)[:-1]  # drop the all-ones row
    means = level_means(vals, lat)
    details = []
    for k in range(lat.L):
        ch = lat.children_flat(k)
        mu = means[k + 1][ch]  # (N_k, 2^d, ...)
        coef = np.tensordot(T, mu, axes=([1], [1]))  # (S, N_k, ...)
        coef = np.moveaxis(coef, 0, 1) * (lat.volume(k) ** 0.5 / 2**d)
        details.append(coef)
    return HaarCoefficients(lat, details, means[0][0])


def haar_inverse(coeffs):
    """Rebuild finest-cell values from a :class:`HaarCoefficients`."""
    lat = coeffs.lattice
    d = lat.d
    T = _sign_table(d)
    mean = np.asarray(coeffs.mean, dtype=float)
    cur = mean[None]
    for k in range(lat.L):
        det = np.asarray(coeffs.details[k], dtype=float)
        full = np.concatenate([det, (lat.volume(k) ** 0.5 * cur)[:, None]], axis=1)
        mu = np.tensordot(T.T, full, axes=([1], [1])) / lat.volume(k) ** 0.5  # (2^d, N_k, ...)
        nxt = np.empty((lat.n_cubes(k + 1),) + mean.shape)
        ch = lat.children_flat(k)
        nxt[ch.T] = mu
        cur = nxt
    return cur.reshape(lat.grid_shape + mean.shape)


def haar_function(lattice, level, coords, eps):
    """Grid sample of ``h_I^eps`` on the finest mesh (exact for level < L)."""
    sigs = haar_signatures(lattice.d)
    det = [np.zeros((lattice.n_cubes(k), len(sigs))) for k in range(lattice.L)]
    det[level][lattice.flat_index(level, coords), sigs.index(tuple(eps))] = 1.0
    return haar_inverse(HaarCoefficients(lattice, det, np.zeros(())))


# good and bad cubes ---------------------------------------------------------

def goodness_gamma(alpha, d):
    return alpha / (2.0 * alpha + 2.0 * d)


def _boundary_distance(start, size, off, period_k):
    """Distance (cells) from ``[start, start+size)`` to the nearest level grid line."""
    lo = np.mod(start - off, period_k)
    hi = np.mod(off - start - size, period_k)
    return np.minimum(lo, hi)


def bad_mask(lattice, level, r, alpha=1.0):
    """Boolean badness of every cube at ``level``.

    A cube ``I`` is bad when some lattice cube ``J`` with
    ``side(J) >= 2**r side(I)`` has ``dist(I, boundary J) <= side(I)**g side(J)**(1-g)``
    where ``g = alpha / (2 alpha + 2 d)``. The nearest boundary at each scale
    is that of the ancestor of ``I``, and only levels ``0..level-r`` exist in
    the finite lattice.
    """
    lat = lattice
    g = goodness_gamma(alpha, lat.d)
    start = lat.cube_start(level).astype(float)
    size = 2 ** (lat.L - level)
    bad = np.zeros(len(start), dtype=bool)
    for k in range(0, level - r + 1):
        per = 2 ** (lat.L - k)
        off = lat.offset(k)
        dist = _boundary_distance(start, size, off, per).min(axis=1)
        thr = float(size) ** g * float(per) ** (1.0 - g)
        bad |= dist <= thr
    return bad


def is_bad(cube, r, alpha=1.0):
    """Badness of a single cube; see :func:`bad_mask`."""
    lat = cube.lattice
    return bool(bad_mask(lat, cube.level, r, alpha)[cube.flat])


def _bad_from_positions(pos, r, alpha, d, depth):
    """Badness of a cube of unit side given per-axis positions inside ancestors.

    ``pos`` has shape ``(trials, d)`` holding integers in ``[0, 2**depth)``;
    the lower ``g`` bits give the offset inside the ancestor ``g`` levels up.
    """
    gam = goodness_gamma(alpha, d)
    bad = np.zeros(pos.shape[0], dtype=bool)
    for gg in range(r, depth + 1):
        per = 2**gg
        p = pos % per
        dist = np.minimum(p, per - 1 - p).min(axis=1)
        bad |= dist <= per ** (1.0 - gam)
    return bad


def estimate_pi_bad(d, r, alpha=1.0, trials=10_000, seed=0, depth=12):
    """Monte Carlo probability that a fixed cube is bad in a random lattice.

    Each trial draws the ``depth`` shift vectors above the cube from its own
    generator seeded by ``(seed, trial)``, so results do not depend on
    scheduling. Only ``depth`` ancestor scales are examined, hence the value
    is a lower bound for the untruncated probability.

    Returns
    -------
    estimate : float
    stderr : float
        Binomial standard error ``sqrt(p (1 - p) / trials)``.
    """
    if trials < 100:
        raise ValidationError("trials must be at least 100")
    pos = np.empty((trials, d), dtype=np.int64)
    weights = 2 ** np.arange(depth, dtype=np.int64)
    for t in range(trials):
        bits = np.random.default_rng([seed, t]).integers(0, 2, size=(depth, d))
        pos[t] = weights @ bits
    bad = _bad_from_positions(pos, r, alpha, d, depth)
    est = float(bad.mean())
    return est, float(np.sqrt(est * (1.0 - est) / trials))


def exact_pi_bad(d, r, alpha=1.0, depth=10):
    """Exact badness probability at truncated ``depth`` by enumerating shifts."""
    if d * depth > 22:
        raise ValidationError("enumeration too large")
    axes = [np.arange(2**depth)] * d
    pos = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    return float(_bad_from_positions(pos, r, alpha, d, depth).mean())
