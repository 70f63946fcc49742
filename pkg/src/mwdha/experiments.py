"""Refinement studies built from the library pieces.

Each driver returns plain JSON-ready dicts so the CLI and the acceptance
tests share one code path.
"""
import math

import numpy as np

from .dyadic import SampledFunction, build_lattice
from .errors import ValidationError
from .families import random_haar_symbol
from .operators import KernelDescriptor, apply_czo, compute_T1, empirical_operator_norm
from .weights import power1d

ANTIDIAGONAL = ((0.0, 1.0), (1.0, 0.0))


def divergence_oracle(L, beta):
    """``(int_{2^-L}^1 x^{-2 beta} dx)^{1/2}``, the growth of the test function norm."""
    e = 2.0 * beta - 1.0
    if abs(e) < 1e-15:
        return math.sqrt(L * math.log(2.0))
    return math.sqrt((2.0 ** (L * e) - 1.0) / e)


def fitted_rate(levels, values):
    """Least-squares slope of ``log2(value)`` against ``L``."""
    x = np.asarray(levels, dtype=float)
    y = np.log2(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def norm_probe_study(levels, beta=0.75, A=ANTIDIAGONAL, p=2.0, ensemble_size=16, seed=0,
                     kernel="hilbert"):
    """Norm-probe lower bounds for ``H M_A`` on ``diag(x^beta, x^-beta)`` over ``levels``."""
    K = KernelDescriptor(kernel, A)
    rows = []
    for L in levels:
        lat = build_lattice(1, L)
        W = power1d(lat, [beta, -beta])
        W.p = p
        res = empirical_operator_norm(lambda f: apply_czo(K, f), W, p, ensemble_size, seed)
        rows.append({"L": L, "lower_bound": res["lower_bound"], "argmax": res["argmax"]})
    return {"kernel": K.to_json(), "beta": beta, "p": p, "rows": rows, "kind": "lower_bound"}


def counterexample_study(levels=(8, 10, 12), beta=0.75, p=2.0, ensemble_size=16, seed=0):
    """Growth table for the antidiagonal Hilbert operator on the power weight.

    Step ratios of consecutive lower bounds are compared with the exact
    integral oracle; ``advisory_growth`` holds when each step meets
    ``2^{(beta - 1/2) step}`` and stays within 15% of the oracle step.
    """
    if len(levels) < 2:
        raise ValidationError("need at least two levels")
    study = norm_probe_study(levels, beta, ANTIDIAGONAL, p, ensemble_size, seed)
    rows = study["rows"]
    steps = []
    ok = True
    for a, b in zip(rows, rows[1:]):
        ratio = b["lower_bound"] / a["lower_bound"]
        oracle = divergence_oracle(b["L"], beta) / divergence_oracle(a["L"], beta)
        floor = 2.0 ** ((beta - 0.5) * (b["L"] - a["L"]))
        rel = abs(ratio / oracle - 1.0)
        good = ratio >= floor and rel <= 0.15
        ok &= good
        steps.append({"from": a["L"], "to": b["L"], "ratio": ratio, "oracle_ratio": oracle,
                      "floor": floor, "relative_deviation": rel, "pass": good})
    study["steps"] = steps
    study["fitted_rate"] = fitted_rate([r["L"] for r in rows], [r["lower_bound"] for r in rows])
    study["predicted_rate"] = beta - 0.5
    study["advisory_growth"] = bool(ok)
    return study


def compatible_study(levels=(8, 10, 12), beta=0.75, A=((1.0, 0.0), (0.0, 2.0)), p=2.0,
                     ensemble_size=16, seed=0, R_levels=None):
    """Norm-probe stability and T1 size for a commuting matrix part."""
    study = norm_probe_study(levels, beta, A, p, ensemble_size, seed)
    K = KernelDescriptor("hilbert", A)
    lbs = [r["lower_bound"] for r in study["rows"]]
    spread = (max(lbs) - min(lbs)) / min(lbs)
    for row in study["rows"]:
        lat = build_lattice(1, row["L"])
        t1 = compute_T1(K, lat, R_levels)
        row["t1_max_norm"] = t1.max_norm()
        row["t1_threshold"] = 10.0 * 2.0 ** -row["L"]
        row["t1_tail_bound"] = float(max(np.max(t) for t in t1.tail_bound))
    study["relative_spread"] = spread
    study["advisory_stable"] = bool(spread < 0.10)
    study["advisory_t1"] = bool(all(r["t1_max_norm"] <= r["t1_threshold"] for r in study["rows"]))
    return study


def parse_symbol(desc, lattice, n=2):
    """Matrix symbol from ``haar-random(seed, depth)``, ``constant:a,b,...`` or ``identity``."""
    desc = desc.strip()
    if desc.startswith("haar-random(") and desc.endswith(")"):
        parts = [int(v) for v in desc[len("haar-random("):-1].split(",")]
        seed = parts[0]
        depth = parts[1] if len(parts) > 1 else 4
        return random_haar_symbol(lattice, seed, depth, (n, n))
    if desc.startswith("constant:"):
        vals = np.asarray([float(v) for v in desc[len("constant:"):].split(",")])
        if vals.size != n * n:
            raise ValidationError(f"constant symbol needs {n * n} entries")
        M = vals.reshape(n, n)
        return SampledFunction(lattice, np.broadcast_to(M, lattice.grid_shape + (n, n)).copy())
    if desc == "identity":
        return SampledFunction(lattice, np.broadcast_to(np.eye(n), lattice.grid_shape + (n, n)).copy())
    raise ValidationError(f"unknown symbol descriptor {desc!r}")


def commutator_bmo_study(K, B, W, p=None, ensemble_size=16, seed=0, method="auto"):
    """Commutator ``[T, B*] : L^p(W) -> L^p`` probe next to the vector BMO values of ``B``.

    The lower bound on the commutator norm is reported with both
    John-Nirenberg functionals at ``q = p`` (reducing form) and the
    dual-weight form, whose finiteness the commutator bound implies.
    """
    from .analysis import vector_bmo
    from .operators import commutator_apply

    p = W.p if p is None else float(p)
    probe = empirical_operator_norm(lambda f: commutator_apply(K, B, f, adjoint_symbol=True), W, p,
                                    ensemble_size, seed, target="unweighted")
    red = vector_bmo(B, W, p, p, "reducing", method)
    dual = vector_bmo(B, W, p, None, "dual_weight", method)
    lb = probe["lower_bound"]
    return {
        "commutator_lower_bound": lb,
        "commutator_argmax": probe["argmax"],
        "kind": "lower_bound",
        "vector_bmo_reducing": red,
        "vector_bmo_dual_weight": dual,
        "ratio_reducing": red / lb if lb > 0 else None,
        "ratio_dual_weight": dual / lb if lb > 0 else None,
    }
