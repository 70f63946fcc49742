"""Command-line experiment runner.

Usage::

    mwdha <subcommand> [--config FILE] [--out FILE] [--seed N] [--p X] [--level L] ...

Every run writes a JSON report with ``schema: 1``, the fully resolved
configuration, the results and advisory flags. Exit codes: 0 on success,
2 when an advisory flag fails, 1 on any error (including usage errors).
"""
import argparse
import copy
import json
import os
import sys
import tempfile
import time

_threads = os.environ.get("MWDHA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import numpy as np  # noqa: E402

from . import analysis, operators, weights  # noqa: E402
from .dyadic import SampledFunction, build_lattice  # noqa: E402
from .errors import ResourceLimitError, SingularityError, UnsupportedError, ValidationError  # noqa: E402
from .experiments import (commutator_bmo_study, counterexample_study, norm_probe_study,  # noqa: E402
                          parse_symbol)
from .families import random_carleson  # noqa: E402

SCHEMA = 1

COMMANDS = (
    "ap-char", "b2p", "reducing", "bmo", "jn-equiv", "stopping-packing", "carleson", "t1",
    "kernel-check", "wbp-check", "decay-check", "norm-probe", "counterexample", "commutator-bmo",
)

DEFAULTS = {
    "weight": "power1d:0.5,-0.5",
    "p": 2.0,
    "seed": 0,
    "lattice": {"d": 1, "L": 10, "shift": 0, "origin": None, "k0": 0},
    "operator": {"kernel": "hilbert", "A": [[1.0, 0.0], [0.0, 2.0]], "riesz_index": 0, "dilation": None},
    "symbol": "haar-random(0, 4)",
    "experiment": None,
    "out": None,
    "run_log": None,
    "knobs": {
        "lambda1": 16.0,
        "lambda2": None,
        "c_equiv": analysis.C_EQUIV,
        "R_levels": None,
        "ensemble_size": 16,
        "mvee_tol": 1e-6,
        "method": "auto",
        "q": None,
        "r": 5,
        "sample_count": 1000,
        "jmax": 4,
        "levels": [8, 10, 12],
        "beta": 0.75,
        "carleson_depth": None,
    },
}


class ConfigError(ValidationError):
    """Configuration problem tied to a field path."""

    def __init__(self, path, msg):
        super().__init__(f"config error at {path}: {msg}")
        self.path = path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def build_parser():
    parser = _Parser(prog="mwdha", description="Matrix-weighted dyadic analysis experiments.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="report path (stdout when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--p", type=float)
        sp.add_argument("--level", type=int, help="finest level L")
        sp.add_argument("--dim", type=int, help="spatial dimension d")
        sp.add_argument("--weight", help="weight descriptor")
        sp.add_argument("--symbol", help="symbol descriptor")
        sp.add_argument("--kernel", choices=operators.KERNELS)
        sp.add_argument("--method", choices=("auto", "exact_p2", "scalar", "mvee"))
        sp.add_argument("--levels", help="comma separated levels for refinement studies")
        sp.add_argument("--run-log", help="append a JSON line per run to this file")
    return parser


def _merge(base, extra, path=""):
    for key, val in extra.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(where, "unknown field")
        if isinstance(base[key], dict) and val is not None:
            if not isinstance(val, dict):
                raise ConfigError(where, "expected an object")
            _merge(base[key], val, where)
        else:
            base[key] = val
    return base


def resolve_config(args):
    """Defaults, then the config file, then command-line flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError("config", f"file {args.config!r} does not exist")
        with open(args.config) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        _merge(cfg, data)
    flags = {"out": args.out, "seed": args.seed, "p": args.p, "weight": args.weight,
             "symbol": args.symbol, "run_log": args.run_log}
    for key, val in flags.items():
        if val is not None:
            cfg[key] = val
    if args.level is not None:
        cfg["lattice"]["L"] = args.level
    if args.dim is not None:
        cfg["lattice"]["d"] = args.dim
    if args.kernel is not None:
        cfg["operator"]["kernel"] = args.kernel
    if args.method is not None:
        cfg["knobs"]["method"] = args.method
    if args.levels is not None:
        try:
            cfg["knobs"]["levels"] = [int(v) for v in args.levels.split(",")]
        except ValueError:
            raise ConfigError("knobs.levels", "expected comma separated integers") from None
    cfg["experiment"] = cfg["experiment"] or args.command
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    lat = cfg["lattice"]
    for key in ("d", "L", "k0"):
        if not isinstance(lat[key], int) or isinstance(lat[key], bool):
            raise ConfigError(f"lattice.{key}", "must be an integer")
    if not 1 <= lat["d"] <= 3:
        raise ConfigError("lattice.d", "must be 1, 2 or 3")
    if lat["L"] < 1:
        raise ConfigError("lattice.L", "must be at least 1")
    try:
        p = float(cfg["p"])
    except (TypeError, ValueError):
        raise ConfigError("p", "must be a number") from None
    if not p > 1:
        raise ConfigError("p", "must exceed 1")
    cfg["p"] = p
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed", "must be an integer")
    k = cfg["knobs"]
    if k["ensemble_size"] < 16:
        raise ConfigError("knobs.ensemble_size", "must be at least 16")
    if k["sample_count"] < 100:
        raise ConfigError("knobs.sample_count", "must be at least 100")
    if k["lambda1"] <= 1:
        raise ConfigError("knobs.lambda1", "must exceed 1")
    if k["lambda2"] is not None and k["lambda2"] <= 1:
        raise ConfigError("knobs.lambda2", "must exceed 1")
    if k["R_levels"] is not None and k["R_levels"] < 1:
        raise ConfigError("knobs.R_levels", "must be at least 1")
    if not k["levels"] or any(not isinstance(v, int) or v < 1 for v in k["levels"]):
        raise ConfigError("knobs.levels", "must be a non-empty list of positive integers")
    for field in ("weight", "symbol"):
        val = cfg[field]
        if not isinstance(val, str):
            raise ConfigError(field, "must be a descriptor string")
        if val.startswith("file:") and not os.path.exists(val[5:]):
            raise ConfigError(field, f"file {val[5:]!r} does not exist")
    op = cfg["operator"]
    if op["kernel"] not in operators.KERNELS:
        raise ConfigError("operator.kernel", f"must be one of {', '.join(operators.KERNELS)}")
    A = np.asarray(op["A"], dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigError("operator.A", "must be a square matrix")


# building blocks ----------------------------------------------------------------

def make_lattice(cfg, L=None):
    lat = cfg["lattice"]
    return build_lattice(lat["d"], lat["L"] if L is None else L, lat["shift"], lat["origin"], lat["k0"])


def make_weight(cfg, lattice):
    desc = cfg["weight"]
    if desc.startswith("file:"):
        with open(desc[5:]) as fh:
            W = weights.MatrixWeight.from_json(fh.read(), lattice)
    else:
        W = weights.from_descriptor(desc, lattice)
    W.p = cfg["p"]
    return W


def make_symbol(cfg, lattice, n):
    desc = cfg["symbol"]
    if desc.startswith("file:"):
        vals = np.load(desc[5:])
        return SampledFunction(lattice, vals)
    return parse_symbol(desc, lattice, n)


def make_kernel(cfg):
    op = cfg["operator"]
    return operators.KernelDescriptor(op["kernel"], op["A"], op["riesz_index"])


def _root(lattice):
    return lattice.cube(0, (0,) * lattice.d)


# subcommands --------------------------------------------------------------------

def cmd_ap_char(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    res = weights.ap_characteristic(W, cfg["p"], seed=cfg["seed"]).to_json()
    red = weights.ap_characteristic_reducing(W, cfg["p"], cfg["knobs"]["method"]).to_json()
    return {"ap_characteristic": res, "ap_characteristic_reducing": red}, {"finite": bool(np.isfinite(res["value"]))}


def cmd_b2p(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    res = weights.b2p_characteristic(W, cfg["p"], cfg["knobs"]["method"]).to_json()
    return {"b2p_characteristic": res}, {"finite": bool(np.isfinite(res["value"]))}


def cmd_reducing(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    p = cfg["p"]
    method = weights.resolve_method(W, p, cfg["knobs"]["method"])
    table = weights.reducing_table(W, p, method, cfg["knobs"]["mvee_tol"])
    rho, dirs = weights.rho_table(W, p)
    worst_low, worst_high = np.inf, 0.0
    for k, lv in enumerate(table):
        Ve = np.linalg.norm(np.einsum("bij,mj->bmi", lv.V, dirs), axis=-1)
        ratio = Ve / rho[k]
        worst_low = min(worst_low, float(ratio.min()))
        worst_high = max(worst_high, float(ratio.max()))
    root = table[0]
    out = {
        "method": method,
        "distortion_bound": table[0].distortion,
        "root_V": root.V[0].tolist(),
        "root_V_dual": root.Vd[0].tolist(),
        "min_ratio_Ve_over_rho": worst_low,
        "max_ratio_Ve_over_rho": worst_high,
        "directions": int(len(dirs)),
    }
    bound = np.sqrt(W.n) * 1.01 if method == "mvee" else 1.0 + 1e-9
    ok = worst_low >= 1.0 - 1e-9 and worst_high <= bound
    return out, {"john_bound": bool(ok)}


def cmd_bmo(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    B = make_symbol(cfg, lat, W.n)
    p, method = cfg["p"], cfg["knobs"]["method"]
    q = cfg["knobs"]["q"] if cfg["knobs"]["q"] is not None else p
    out = {
        "bmo_w": analysis.bmo_w_norm(B, W, p, method),
        "isral": analysis.bmo_conditions_isral(B, W, p, method, cfg["knobs"]["c_equiv"]),
        "bmo_wpq": {"q": q, "value": analysis.bmo_wpq_norm(B, W, p, q, method)},
        "vector_bmo_reducing": analysis.vector_bmo(B, W, p, q, "reducing", method),
        "vector_bmo_dual_weight": analysis.vector_bmo(B, W, p, None, "dual_weight", method),
        "classical_bmo": analysis.classical_bmo(B, q),
    }
    return out, {"isral_comparable": out["isral"]["comparable"]}


def cmd_jn_equiv(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    B = make_symbol(cfg, lat, W.n)
    out = analysis.john_nirenberg_table(B, W, cfg["p"], cfg["knobs"]["method"])
    out["c_equiv"] = cfg["knobs"]["c_equiv"]
    return out, {"comparable": bool(out["max_ratio"] <= out["c_equiv"])}


def cmd_stopping_packing(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    k = cfg["knobs"]
    tree = analysis.stopping_time(W, _root(lat), cfg["p"], k["lambda1"], k["lambda2"], k["method"])
    rows = analysis.packing_rows(tree, k["jmax"])
    out = {
        "lambda1": tree.lam1,
        "lambda2": tree.lam2,
        "generation_sizes": [len(g) for g in tree.generations],
        "packing": rows,
        "csv": analysis.rows_to_csv(rows),
    }
    return out, {"packing": all(r["pass"] for r in rows)}


def cmd_carleson(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    B = make_symbol(cfg, lat, W.n)
    lam = random_carleson(lat, cfg["seed"], W.n, cfg["knobs"]["carleson_depth"])
    res = analysis.carleson_embedding_check(lam, B, W, cfg["p"], cfg["knobs"]["method"])
    return {"embedding": res}, {"finite": bool(np.isfinite(res["ratio"]))}


def cmd_t1(cfg):
    lat = make_lattice(cfg)
    K = make_kernel(cfg)
    t1 = operators.compute_T1(K, lat, cfg["knobs"]["R_levels"], cfg["operator"]["dilation"])
    W = make_weight(cfg, lat)
    bmo = operators.t1_bmo_norm(t1, W, cfg["p"], cfg["knobs"]["method"])
    threshold = 10.0 * 2.0 ** -lat.L
    out = {
        "kernel": K.to_json(),
        "R_levels": t1.R_levels,
        "dilation": t1.dilation,
        "max_norm": t1.max_norm(),
        "per_level_max": [float(np.abs(d).max()) if d.size else 0.0 for d in t1.coefficients.details],
        "truncation_tail": float(max(np.max(t) for t in t1.tail_bound)),
        "t1_bmo_w": bmo,
        "threshold": threshold,
    }
    return out, {"t1_small": bool(out["max_norm"] <= threshold)}


def cmd_kernel_check(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    K = make_kernel(cfg)
    res = operators.kernel_condition_check(K, W, cfg["p"], cfg["knobs"]["sample_count"], cfg["seed"],
                                           cfg["knobs"]["method"])
    res.pop("sampled_cubes")
    return res, {"finite": bool(np.isfinite(res["size_max"]))}


def cmd_wbp_check(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    K = make_kernel(cfg)
    res = operators.weak_boundedness_check(K, W, cfg["p"], cfg["knobs"]["method"])
    return res, {"finite": bool(np.isfinite(res["value"]))}


def cmd_decay_check(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    K = make_kernel(cfg)
    res = operators.haar_decay_check(K, W, cfg["p"], r=cfg["knobs"]["r"], method=cfg["knobs"]["method"])
    lines = ["gap,distance_class,max_ratio"] + [f"{k},{v!r}" for k, v in res["buckets"].items()]
    res["csv"] = "\n".join(lines) + "\n"
    return res, {"finite": bool(all(np.isfinite(v) for v in res["by_gap"].values()))}


def _beta(cfg):
    return float(cfg["knobs"]["beta"])


def cmd_norm_probe(cfg):
    k = cfg["knobs"]
    A = cfg["operator"]["A"]
    res = norm_probe_study(k["levels"], _beta(cfg), A, cfg["p"], k["ensemble_size"], cfg["seed"],
                           cfg["operator"]["kernel"])
    return res, {}


def cmd_counterexample(cfg):
    k = cfg["knobs"]
    res = counterexample_study(k["levels"], _beta(cfg), cfg["p"], k["ensemble_size"], cfg["seed"])
    return res, {"growth": res["advisory_growth"]}


def cmd_commutator_bmo(cfg):
    lat = make_lattice(cfg)
    W = make_weight(cfg, lat)
    B = make_symbol(cfg, lat, W.n)
    K = make_kernel(cfg)
    res = commutator_bmo_study(K, B, W, cfg["p"], cfg["knobs"]["ensemble_size"], cfg["seed"],
                               cfg["knobs"]["method"])
    return res, {"finite": bool(np.isfinite(res["vector_bmo_reducing"]))}


HANDLERS = {
    "ap-char": cmd_ap_char, "b2p": cmd_b2p, "reducing": cmd_reducing, "bmo": cmd_bmo,
    "jn-equiv": cmd_jn_equiv, "stopping-packing": cmd_stopping_packing, "carleson": cmd_carleson,
    "t1": cmd_t1, "kernel-check": cmd_kernel_check, "wbp-check": cmd_wbp_check,
    "decay-check": cmd_decay_check, "norm-probe": cmd_norm_probe,
    "counterexample": cmd_counterexample, "commutator-bmo": cmd_commutator_bmo,
}

# reporting ----------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(report):
    return json.dumps(report, sort_keys=True, indent=2, default=_jsonable) + "\n"


def write_atomic(path, text):
    """Write through a temporary file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".mwdha-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run(command, cfg):
    """Execute one subcommand and build its report."""
    if command not in HANDLERS:
        raise ValidationError(f"unknown subcommand {command!r}")
    t0 = time.perf_counter()
    results, advisories = HANDLERS[command](cfg)
    return {
        "schema": SCHEMA,
        "command": command,
        "config": cfg,
        "results": results,
        "advisories": advisories,
        "passed": bool(all(advisories.values())),
        "wall_time": time.perf_counter() - t0,
    }


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        report = run(args.command, cfg)
        text = dumps(report)
        if cfg["out"]:
            write_atomic(cfg["out"], text)
        else:
            sys.stdout.write(text)
        if cfg["run_log"]:
            line = json.dumps(report, sort_keys=True, default=_jsonable)
            with open(cfg["run_log"], "a") as fh:
                fh.write(line + "\n")
    except SingularityError as exc:
        where = f" (at {exc.where})" if getattr(exc, "where", None) else ""
        sys.stderr.write(f"mwdha: singular matrix{where}: {exc}\n")
        return 1
    except (ValidationError, UnsupportedError, ResourceLimitError, OSError) as exc:
        sys.stderr.write(f"mwdha: {exc}\n")
        return 1
    return 0 if report["passed"] else 2


if __name__ == "__main__":
    sys.exit(main())
