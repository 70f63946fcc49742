"""Seeded random test families: weights, symbols and Carleson sequences."""
import numpy as np

from .dyadic import HaarCoefficients, SampledFunction, haar_inverse, haar_signatures
from .errors import ValidationError
from .weights import ap_characteristic, power_mixture


def _rotations(lattice, rng, pieces_level=2):
    """Rotation field constant on the cubes of ``pieces_level`` (n = 2)."""
    k = min(pieces_level, lattice.L)
    theta = rng.uniform(0, np.pi, size=lattice.n_cubes(k))
    th = theta[lattice.cube_of_cells(k)]
    c, s = np.cos(th), np.sin(th)
    U = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return U


def _orthogonal(rng, n):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def random_ap_weight(lattice, seed=0, n=2, p=2.0, max_char=50.0, attempts=50):
    """Random piecewise power-mixture weight with bounded A_p characteristic.

    Each eigenvalue is a sum of one or two terms ``c |x_1 - a|**beta`` with
    ``|beta| <= 0.6 min(1, p - 1)``. For ``n = 2`` the eigenframe rotates by a
    random angle on each level-2 cube; otherwise it is one random orthogonal
    matrix. Draws are retried until the A_p characteristic on ``lattice`` is
    at most ``max_char``.
    """
    rng = np.random.default_rng([seed, 7919])
    lo, hi = lattice.origin[0], lattice.origin[0] + lattice.base_side
    bmax = 0.6 * min(1.0, p - 1.0)
    for _ in range(attempts):
        terms = []
        for _ in range(n):
            parts = []
            for _ in range(int(rng.integers(1, 3))):
                parts.append((float(rng.uniform(0.5, 2.0)), float(rng.uniform(-bmax, bmax)),
                              float(rng.uniform(lo, hi))))
            terms.append(parts)
        U = _rotations(lattice, rng) if n == 2 else _orthogonal(rng, n)
        W = power_mixture(lattice, terms, U, descriptor=f"a2-family:{seed}")
        W.p = p
        if ap_characteristic(W, p).value <= max_char:
            return W
    raise ValidationError(f"no weight with characteristic <= {max_char} after {attempts} draws")


def random_haar_symbol(lattice, seed=0, depth=4, vshape=(2, 2), decay=0.5):
    """Haar polynomial with Gaussian details on levels ``< depth``.

    Coefficients at level ``k`` are scaled by ``|I|**(1/2) * decay**k`` so
    the symbol has bounded mean oscillation uniformly in the mesh.
    """
    rng = np.random.default_rng([seed, 104729])
    d = lattice.d
    S = len(haar_signatures(d))
    details = []
    for k in range(lattice.L):
        shape = (lattice.n_cubes(k), S) + tuple(vshape)
        if k < depth:
            details.append(rng.standard_normal(shape) * lattice.volume(k) ** 0.5 * decay**k)
        else:
            details.append(np.zeros(shape))
    mean = rng.standard_normal(tuple(vshape))
    return SampledFunction(lattice, haar_inverse(HaarCoefficients(lattice, details, mean)))


def random_carleson(lattice, seed=0, n=2, depth=None, density=0.5):
    """Random vector sequence on cubes, normalized to Carleson norm one.

    Returns a list ``lam[k]`` of arrays ``(2**(d k), S, n)``.
    """
    from .analysis import carleson_norm

    rng = np.random.default_rng([seed, 15485863])
    d = lattice.d
    S = len(haar_signatures(d))
    depth = lattice.L if depth is None else depth
    lam = []
    for k in range(lattice.L):
        a = rng.standard_normal((lattice.n_cubes(k), S, n)) * lattice.volume(k) ** 0.5
        if k >= depth:
            a[:] = 0.0
        else:
            a *= rng.random((lattice.n_cubes(k), 1, 1)) < density
        lam.append(a)
    nrm = carleson_norm(lam, lattice)
    return [a / nrm for a in lam] if nrm > 0 else lam
