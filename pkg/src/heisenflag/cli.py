"""Command line front end: batch experiments and field file utilities.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a JSON
diagnostic is written to stderr).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys

import numpy as np

from . import __version__
from . import experiments as ex
from .atoms import SupportError
from .fields import GridField, GridSpec, lp_norm, read_hfld, write_hfld
from .kernels import KernelError
from .operators import PairValidationError, ScaleGrid
from .spectral import SpectralCalculus
from .tiling import TileConvergenceError

EXPERIMENTS = ("equivalence", "proper-subspace", "multiplier", "field")
MAX_HORIZONTAL = 4096


class ConfigError(ValueError):
    pass


NUMERICAL_ERRORS = (KernelError, TileConvergenceError, SupportError, PairValidationError,
                    FloatingPointError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# configuration

DEFAULT_GRID = {"Z": 2.0, "T": 8.0, "n_z": 16, "n_t": 64}


def load_config(path: str) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config(cfg: dict, experiment: str, base_dir: str = ".") -> dict:
    """Check the schema and fill defaults; returns a normalized copy."""
    cfg = copy.deepcopy(cfg)
    known = {"experiment", "nu", "grid", "scales", "seeds", "seed", "params", "out", "threads"}
    extra = sorted(set(cfg) - known)
    _require(not extra, f"unknown config keys: {', '.join(extra)}")
    exp = cfg.setdefault("experiment", experiment)
    _require(exp in EXPERIMENTS, f"unknown experiment {exp!r}")
    _require(exp == experiment, f"config is for {exp!r}, not {experiment!r}")
    nu = cfg.setdefault("nu", 1)
    _require(_is_int(nu) and nu >= 1, "nu must be a positive integer")
    grid = {**DEFAULT_GRID, **cfg.get("grid", {})}
    _require(isinstance(cfg.get("grid", {}), dict), "grid must be an object")
    _require(set(grid) <= set(DEFAULT_GRID), f"unknown grid keys: {sorted(set(grid) - set(DEFAULT_GRID))}")
    for k in ("n_z", "n_t"):
        _require(_is_int(grid[k]) and grid[k] >= 4 and grid[k] % 2 == 0,
                 f"grid.{k} must be an even integer >= 4")
    for k in ("Z", "T"):
        _require(_is_num(grid[k]) and grid[k] > 0, f"grid.{k} must be positive")
    grid = {k: (float(v) if k in ("Z", "T") else v) for k, v in grid.items()}
    cfg["grid"] = grid
    _require(grid["n_z"] ** (2 * nu) <= MAX_HORIZONTAL,
             f"horizontal grid n_z^(2 nu) = {grid['n_z'] ** (2 * nu)} exceeds the dense eigensolve "
             f"limit {MAX_HORIZONTAL}")
    seed = cfg.setdefault("seed", 0)
    _require(_is_int(seed) and seed >= 0, "seed must be a nonnegative integer")
    seeds = cfg.setdefault("seeds", [seed])
    _require(isinstance(seeds, list) and seeds and all(_is_int(s) and s >= 0 for s in seeds),
             "seeds must be a nonempty list of nonnegative integers")
    threads = cfg.setdefault("threads", 1)
    _require(_is_int(threads) and threads >= 1, "threads must be a positive integer")
    out = cfg.setdefault("out", "out")
    _require(isinstance(out, str) and out, "out must be a nonempty string")
    scales = cfg.get("scales")
    if scales is not None:
        _require(isinstance(scales, dict) and set(scales) == {"r", "s"},
                 "scales must be an object with lists r and s")
        for k in ("r", "s"):
            v = scales[k]
            _require(isinstance(v, list) and v and all(_is_num(x) and x > 0 for x in v),
                     f"scales.{k} must be a nonempty list of positive numbers")
    params = cfg.setdefault("params", {})
    _require(isinstance(params, dict), "params must be an object")
    _validate_params(exp, params, base_dir)
    try:
        if exp == "proper-subspace":
            for H in params["H_values"]:
                ex.proper_subspace_grid(H, nu, params["Z"], params["n_z"], params["dt"]).require_commensurate()
        else:
            grid_of(cfg).require_commensurate()
    except ValueError as e:
        raise ConfigError(f"grid: {e}") from e
    return cfg


def _validate_params(exp: str, p: dict, base_dir: str) -> None:
    if exp == "equivalence":
        corpus = p.setdefault("corpus", None)
        if corpus is not None:
            _require(isinstance(corpus, list) and corpus, "params.corpus must be a nonempty list")
            for item in corpus:
                _require(isinstance(item, dict) and "kind" in item, "corpus items need a kind")
                if item["kind"] == "file":
                    _require(isinstance(item.get("path"), str), "file corpus items need a path")
                    path = os.path.join(base_dir, item["path"])
                    _require(os.path.isfile(path), f"referenced field file not found: {item['path']}")
                else:
                    _require(item["kind"] in ex.FIELD_KINDS, f"unknown field kind {item['kind']!r}")
        p.setdefault("kappa", 3.0)
        _require(_is_num(p["kappa"]) and p["kappa"] > 1, "params.kappa must exceed 1")
    elif exp == "proper-subspace":
        p.setdefault("H_values", [4, 8, 16, 32])
        _require(isinstance(p["H_values"], list) and len(p["H_values"]) >= 2
                 and all(_is_num(h) and h > 0 for h in p["H_values"]),
                 "params.H_values must list at least two positive heights")
        p.setdefault("Z", 2.0)
        p.setdefault("n_z", 16)
        p.setdefault("dt", 0.25)
        p.setdefault("r_values", [0.5, 1.0, 2.0])
        p.setdefault("s_min", 0.5)
        _require(_is_int(p["n_z"]) and p["n_z"] >= 4 and p["n_z"] % 2 == 0, "params.n_z must be even >= 4")
        for k in ("Z", "dt", "s_min"):
            _require(_is_num(p[k]) and p[k] > 0, f"params.{k} must be positive")
    elif exp == "multiplier":
        p.setdefault("multipliers", list(ex.MULTIPLIER_NAMES))
        _require(isinstance(p["multipliers"], list) and p["multipliers"]
                 and all(m in ex.MULTIPLIER_NAMES for m in p["multipliers"]),
                 f"params.multipliers must be drawn from {list(ex.MULTIPLIER_NAMES)}")
        p.setdefault("j_values", [2, 3, 4, 5, 6])
        p.setdefault("ell_values", [-1, 0, 1, 2, 3])
        for k in ("j_values", "ell_values"):
            _require(isinstance(p[k], list) and p[k] and all(_is_int(v) for v in p[k]),
                     f"params.{k} must be a nonempty list of integers")
        p.setdefault("eps", 0.5)
        _require(_is_num(p["eps"]) and p["eps"] > 0, "params.eps must be positive")
        p.setdefault("gamma", 0.5)
        p.setdefault("n_sobolev", 128)
        tail = p.setdefault("tail", {})
        tail.setdefault("multiplier", "smooth")
        tail.setdefault("width_level", -1)
        tail.setdefault("height_level", -1)
        tail.setdefault("kappa", 3.0)
        _require(tail["multiplier"] in ex.MULTIPLIER_NAMES, "params.tail.multiplier unknown")
    elif exp == "field":
        action = p.setdefault("action", "gen")
        _require(action in ("gen", "info", "norm", "convert"), f"unknown field action {action!r}")
        if action == "gen":
            p.setdefault("kind", "gaussian")
            _require(p["kind"] in ex.FIELD_KINDS, f"unknown field kind {p['kind']!r}")
            p.setdefault("file", f"{p['kind']}.hfld")
            p.setdefault("options", {})
            _require(isinstance(p["options"], dict), "params.options must be an object")
        else:
            _require(isinstance(p.get("input"), str), f"field action {action} needs params.input")
            path = os.path.join(base_dir, p["input"])
            _require(os.path.isfile(path), f"referenced field file not found: {p['input']}")


HASH_EXCLUDED = ("out", "threads")


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical config, leaving out keys that cannot change results."""
    core = {k: v for k, v in cfg.items() if k not in HASH_EXCLUDED and not k.startswith("_")}
    return hashlib.sha256(json.dumps(core, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def grid_of(cfg: dict) -> GridSpec:
    return GridSpec(nu=cfg["nu"], **cfg["grid"])


def scales_of(cfg: dict, spec: GridSpec) -> ScaleGrid:
    sc = cfg.get("scales")
    if sc is None:
        return ScaleGrid.for_spec(spec)
    return ScaleGrid(tuple(sc["r"]), tuple(sc["s"]))


def _meta(cfg: dict, spec: GridSpec | None, scales: ScaleGrid | None) -> dict:
    return {"config_hash": config_hash(cfg), "version": __version__, "experiment": cfg["experiment"],
            "grid": spec.to_header() if spec else None,
            "scale_band": scales.band() if scales else None}


# ---------------------------------------------------------------------------
# report writers

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str, meta: dict, fields: list, rows: list) -> None:
    buf = io.StringIO()
    for k in sorted(meta):
        buf.write(f"# {k}: {json.dumps(meta[k], sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in fields])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return repr(x)
    return x


def write_json(path: str, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands

def _corpus(cfg: dict, spec: GridSpec) -> list:
    items = cfg["params"]["corpus"]
    if items is None:
        items = [{"kind": "random", "seed": s} for s in cfg["seeds"]]
    out = []
    for i, item in enumerate(items):
        kind = item["kind"]
        if kind == "file":
            f = read_hfld(os.path.join(cfg.get("_base_dir", "."), item["path"]))
            if f.spec != spec:
                raise ConfigError(f"corpus file {item['path']} is on a different grid")
            label = item["path"]
        else:
            seed = item.get("seed", cfg["seed"])
            opts = item.get("options", {})
            try:
                f = ex.generate_field(kind, spec, seed, **opts)
            except TypeError as e:
                raise ConfigError(f"bad options for {kind}: {e}") from e
            label = f"{kind}:{seed}" if kind == "random" else kind
        out.append((i, label, f))
    return out


def cmd_equivalence(cfg: dict) -> list:
    spec = grid_of(cfg)
    scales = scales_of(cfg, spec)
    calc = SpectralCalculus.build(spec)
    corpus = _corpus(cfg, spec)
    kappa = cfg["params"]["kappa"]

    def run(item):
        i, label, f = item
        return {"index": i, "label": label, **ex.equivalence_row(f, calc, scales, kappa)}
    rows = ex.map_ordered(run, corpus, cfg["threads"])
    meta = _meta(cfg, spec, scales)
    os.makedirs(cfg["out"], exist_ok=True)
    p1 = os.path.join(cfg["out"], "equivalence.csv")
    p2 = os.path.join(cfg["out"], "equivalence_ratios.csv")
    write_csv(p1, meta, ["index", "label", *ex.FUNCTIONALS], rows)
    write_csv(p2, meta, ["num", "den", "min", "median", "max", "n"], ex.ratio_summary(rows))
    return [p1, p2]


def cmd_proper_subspace(cfg: dict) -> list:
    p = cfg["params"]
    res = ex.proper_subspace_sweep(tuple(p["H_values"]), threads=cfg["threads"], nu=cfg["nu"],
                                   Z=p["Z"], n_z=p["n_z"], dt=p["dt"],
                                   r_values=tuple(p["r_values"]), s_min=p["s_min"])
    meta = _meta(cfg, None, None)
    meta["scale_band"] = {"r": [min(p["r_values"]), max(p["r_values"])],
                          "s": [p["s_min"], max(p["H_values"])]}
    meta["grid"] = {"nu": cfg["nu"], "Z": p["Z"], "n_z": p["n_z"], "dt": p["dt"], "T": "H"}
    for k in ("witness_fit", "control_fit", "one_param_fit"):
        meta[k] = res[k]
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "proper_subspace.csv")
    write_csv(path, meta, ["H", "n_t", "u_plus_l1", "control_l1", "one_param_l1"], res["rows"])
    return [path]


def cmd_multiplier(cfg: dict) -> list:
    p = cfg["params"]
    spec = grid_of(cfg)
    calc = SpectralCalculus.build(spec)

    def run(name):
        m = ex.named_multiplier(name, p["gamma"])
        rows = ex.multiplier_table(m, calc, p["j_values"], p["ell_values"], p["eps"], p["n_sobolev"])
        return {"name": name, "pieces": rows, "max_ratio": max(r["ratio"] for r in rows)}
    tables = ex.map_ordered(run, list(p["multipliers"]), cfg["threads"])
    t = p["tail"]
    budget = ex.region_tail_budget(ex.named_multiplier(t["multiplier"], p["gamma"]), calc,
                                   t["width_level"], t["height_level"], t["kappa"])
    eps = p["eps"]
    report = {**_meta(cfg, spec, None),
              "scale_band": {"j": [min(p["j_values"]), max(p["j_values"])],
                             "ell": [min(p["ell_values"]), max(p["ell_values"])]},
              "alpha": spec.nu + eps, "beta": (1 + eps) / 2, "eps": eps,
              "multipliers": tables, "tail_budget": {"multiplier": t["multiplier"], **budget}}
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], "multiplier.json")
    write_json(path, report)
    return [path]


def _field_info(f: GridField) -> dict:
    return {"grid": f.spec.to_header(), "dtype": str(f.values.dtype), "shape": list(f.values.shape),
            "cell_volume": f.spec.cell_volume}


def _field_norms(f: GridField) -> dict:
    return {"L1": lp_norm(f, 1), "L2": lp_norm(f, 2), "Linf": lp_norm(f, np.inf),
            "integral": complex(f.integral()).real if not np.iscomplexobj(f.values) else str(f.integral())}


def field_convert(f: GridField, path: str, t_index: int | None = None) -> None:
    """CSV slice: one row per horizontal point at the chosen t index (default t = 0)."""
    spec = f.spec
    k = spec.n_t // 2 if t_index is None else t_index
    if not 0 <= k < spec.n_t:
        raise ConfigError(f"t index {k} outside 0..{spec.n_t - 1}")
    nu = spec.nu
    names = [f"x{j}" for j in range(1, nu + 1)] + [f"y{j}" for j in range(1, nu + 1)]
    zc = spec.z_coords().reshape(-1, 2 * nu)
    vals = f.flat[:, k]
    buf = io.StringIO()
    buf.write(f"# grid: {json.dumps(spec.to_header(), sort_keys=True)}\n")
    buf.write(f"# t: {float(spec.axis_t()[k])!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    cplx = np.iscomplexobj(vals)
    w.writerow(names + (["re", "im"] if cplx else ["value"]))
    for z, v in zip(zc, vals):
        w.writerow([repr(float(c)) for c in z] + ([repr(float(v.real)), repr(float(v.imag))]
                                                 if cplx else [repr(float(v))]))
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def cmd_field_config(cfg: dict) -> list:
    p = cfg["params"]
    action = p["action"]
    os.makedirs(cfg["out"], exist_ok=True)
    if action == "gen":
        spec = grid_of(cfg)
        try:
            f = ex.generate_field(p["kind"], spec, cfg["seed"], **p["options"])
        except TypeError as e:
            raise ConfigError(f"bad options for {p['kind']}: {e}") from e
        path = os.path.join(cfg["out"], p["file"])
        write_hfld(f, path)
        return [path]
    f = read_hfld(os.path.join(cfg["_base_dir"], p["input"]))
    if action == "convert":
        path = os.path.join(cfg["out"], os.path.splitext(os.path.basename(p["input"]))[0] + ".csv")
        field_convert(f, path, p.get("t_index"))
        return [path]
    report = {**_meta(cfg, f.spec, None), "file": os.path.basename(p["input"])}
    report.update(_field_info(f) if action == "info" else _field_norms(f))
    path = os.path.join(cfg["out"], f"field_{action}.json")
    write_json(path, report)
    return [path]


COMMANDS = {"equivalence": cmd_equivalence, "proper-subspace": cmd_proper_subspace,
            "multiplier": cmd_multiplier, "field": cmd_field_config}


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="JSON experiment config")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="seed (overrides config 'seed')")
    p.add_argument("--threads", type=int, help="worker threads (overrides config 'threads')")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heisenflag", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("equivalence", "proper-subspace", "multiplier"):
        _add_common(sub.add_parser(name, help=f"run the {name} experiment"))
    fp = sub.add_parser("field", help="generate, inspect and convert field files")
    fsub = fp.add_subparsers(dest="action")
    _add_common(fp, config_required=False)
    g = fsub.add_parser("gen", help="write a named test field")
    g.add_argument("kind", choices=ex.FIELD_KINDS)
    g.add_argument("path", help="output .hfld file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nu", type=int, default=1)
    g.add_argument("--Z", type=float, default=DEFAULT_GRID["Z"])
    g.add_argument("--T", type=float, default=DEFAULT_GRID["T"])
    g.add_argument("--n-z", type=int, default=DEFAULT_GRID["n_z"])
    g.add_argument("--n-t", type=int, default=DEFAULT_GRID["n_t"])
    i = fsub.add_parser("info", help="print the header of a field file")
    i.add_argument("path")
    n = fsub.add_parser("norm", help="print L1, L2, Linf norms and the integral")
    n.add_argument("path")
    c = fsub.add_parser("convert", help="write a t-slice of a field as CSV")
    c.add_argument("path")
    c.add_argument("csv")
    c.add_argument("--t-index", type=int)
    return ap


def _run_field_direct(args) -> int:
    if args.action == "gen":
        try:
            spec = GridSpec(nu=args.nu, Z=args.Z, T=args.T, n_z=args.n_z, n_t=args.n_t)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        write_hfld(ex.generate_field(args.kind, spec, args.seed), args.path)
        return 0
    if not os.path.isfile(args.path):
        raise ConfigError(f"field file not found: {args.path}")
    try:
        f = read_hfld(args.path)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"cannot read {args.path}: {e}") from e
    if args.action == "convert":
        field_convert(f, args.csv, args.t_index)
        return 0
    out = _field_info(f) if args.action == "info" else _field_norms(f)
    print(json.dumps(_jsonable(out), indent=1, sort_keys=True))
    return 0


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "field" and args.action is not None:
        return _run_field_direct(args)
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    for k in ("out", "seed", "threads"):
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    base = os.path.dirname(os.path.abspath(args.config))
    cfg = validate_config(cfg, args.command, base)
    cfg["_base_dir"] = base
    paths = COMMANDS[args.command](cfg)
    for p in paths:
        print(p)
    return 0


def main(argv=None) -> int:
    try:
        code = run(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        code = 2
    except NUMERICAL_ERRORS as e:
        diag = {"error": type(e).__name__, "message": str(e),
                "diagnostics": getattr(e, "diagnostics", None)}
        print(json.dumps(_jsonable(diag), sort_keys=True), file=sys.stderr)
        code = 3
    return code


if __name__ == "__main__":
    sys.exit(main())
