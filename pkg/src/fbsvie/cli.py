"""Command-line runner: ``fbsvie [--config PATH] [--out DIR] [--backend B] [--N 4,8] SUBCOMMAND``.

Every run writes ``results.csv`` and ``report.json`` into the output
directory, plus ``details.json`` and any profile tables. Exit status is 0 when
all assertions pass, 1 when one fails or the numerics break down, and 2 for
configuration errors (nothing is written in that case).
"""

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
import tempfile

from .errors import Error, SpecError
from .experiments import DEFAULTS, REGISTRY, ExperimentConfig

SUBCOMMANDS = {
    "solve-bsvie": "bsvie-linear",
    "check-mp": "maximum-principle",
    "lq-solve": "lq",
}
FINANCE_CASES = {
    "linear": "finance-case1",
    "meanvar": "finance-meanvar",
    "adjoint1": "finance-adjoint1",
    "adjoint2": "finance-adjoint2",
    "adjoint3": "finance-adjoint3",
}
DEFAULT_SIZES = {
    "finance-case1": [4, 8, 16],
    "finance-meanvar": [4, 8, 16],
    "finance-adjoint1": [4, 8, 16],
    "finance-adjoint2": [4, 8, 16],
    "finance-adjoint3": [4, 8, 16],
    "duality-linear": [4, 8, 16],
}
RESULT_COLUMNS = ["experiment", "metric", "N", "value", "reference", "abs_error", "provenance"]


def parse_sizes(text):
    try:
        return [int(p) for p in str(text).replace(" ", "").split(",") if p]
    except ValueError:
        raise SpecError(f"grid sizes must be comma-separated integers, got {text!r}") from None


def load_config(path):
    """Read an INI file into a flat dict of experiment settings and params."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise SpecError(f"cannot read config {path}: {exc}") from None
    known = {"experiment", "params", "tolerances"}
    extra = set(parser.sections()) - known
    if extra:
        raise SpecError(f"unknown config sections: {sorted(extra)}")
    out = {"params": {}}
    if parser.has_section("experiment"):
        for key, value in parser.items("experiment"):
            key = key.lower()
            if key not in ("problem", "n", "backend", "seed", "out", "n_paths"):
                raise SpecError(f"unknown experiment key {key!r}")
            out[key] = value
    for section in ("params", "tolerances"):
        if parser.has_section(section):
            for key, value in parser.items(section):
                try:
                    out["params"][key] = float(value)
                except ValueError:
                    raise SpecError(f"{section}.{key} must be a number, got {value!r}") from None
    return out


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if hasattr(obj, "item"):
        return _json_safe(obj.item())
    return obj


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x)
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def results_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in records:
        w.writerow([r.experiment, r.metric, r.N, _fmt(r.value), _fmt(r.reference), _fmt(r.abs_error), r.provenance])
    return buf.getvalue()


def table_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def report_dict(name, outcome):
    return {
        "experiment": name,
        "assertions": [
            {"name": a.name, "pass": "pass" if a.passed else "fail",
             "value": _json_safe(a.value), "tolerance": _json_safe(a.tolerance)}
            for a in outcome.assertions
        ],
    }


def _write_atomic(directory, files):
    """Write all files to temporaries first, then rename each into place."""
    os.makedirs(directory, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{name}.", suffix=".tmp")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, os.path.join(directory, name)))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)


def run(config, out_dir):
    """Run ``config`` and write its result files. Returns the Outcome."""
    outcome = REGISTRY[config.problem](config)
    files = {
        "results.csv": results_csv(outcome.records),
        "report.json": json.dumps(report_dict(config.problem, outcome), indent=2) + "\n",
        "details.json": json.dumps(_json_safe(outcome.details), indent=2) + "\n",
    }
    for name, (header, rows) in outcome.tables.items():
        files[f"{name}.csv"] = table_csv(header, rows)
    _write_atomic(out_dir, files)
    return outcome


def build_parser():
    p = argparse.ArgumentParser(prog="fbsvie", description="Forward-backward stochastic Volterra experiments.")
    p.add_argument("--config", help="INI file with [experiment], [params] and [tolerances] sections")
    p.add_argument("--out", help="output directory (default: results)")
    p.add_argument("--backend", choices=["exact-tree", "regression-mc"])
    p.add_argument("--N", dest="sizes", help="comma-separated grid sizes, e.g. 4,8,16")
    p.add_argument("--seed", type=int, help="seed for the regression backend")
    sub = p.add_subparsers(dest="command")
    sub.add_parser("solve-bsvie", help="linear BSVIE by Picard iteration")
    d = sub.add_parser("check-duality", help="forward/backward pairing identity")
    d.add_argument("--kernels", choices=["zero", "linear"], default="zero")
    sub.add_parser("check-mp", help="maximum principle checks")
    sub.add_parser("lq-solve", help="backward LQ optimal control")
    f = sub.add_parser("finance-case", help="risk-minimizing portfolios and adjoints")
    f.add_argument("--case", choices=sorted(FINANCE_CASES), required=True)
    for name in ("gamma", "rho", "alpha", "beta", "x0"):
        f.add_argument(f"--{name}", type=float)
    c = sub.add_parser("convergence", help="any registered experiment across grid sizes")
    c.add_argument("--problem", choices=sorted(REGISTRY), required=True)
    return p


def resolve(args):
    """Merge config file and command line into an ExperimentConfig and output dir."""
    file_cfg = load_config(args.config) if args.config else {"params": {}}
    problem = file_cfg.get("problem")
    params = dict(file_cfg["params"])
    if args.command == "check-duality":
        problem = "duality-zero-kernels" if args.kernels == "zero" else "duality-linear"
    elif args.command == "finance-case":
        problem = FINANCE_CASES[args.case]
        for name in ("gamma", "rho", "alpha", "beta", "x0"):
            value = getattr(args, name)
            if value is not None:
                if name not in DEFAULTS[problem]:
                    raise SpecError(f"--{name} does not apply to case {args.case}")
                params[name] = value
    elif args.command == "convergence":
        problem = args.problem
    elif args.command:
        problem = SUBCOMMANDS[args.command]
    if not problem:
        raise SpecError("no problem given: use a subcommand or set problem in the config")
    if args.command and file_cfg.get("problem") and file_cfg["problem"] != problem:
        raise SpecError(f"config problem {file_cfg['problem']!r} conflicts with the subcommand")
    if problem not in REGISTRY:
        raise SpecError(f"unknown problem {problem!r}")
    sizes_text = args.sizes or file_cfg.get("n")
    sizes = parse_sizes(sizes_text) if sizes_text else DEFAULT_SIZES.get(problem, [4, 8])
    try:
        seed = int(args.seed if args.seed is not None else file_cfg.get("seed", 0))
        n_paths = int(file_cfg.get("n_paths", 20000))
    except ValueError:
        raise SpecError("seed and n_paths must be integers") from None
    cfg = ExperimentConfig(
        problem=problem,
        grid_sizes=sizes,
        backend=args.backend or file_cfg.get("backend", "exact-tree"),
        seed=seed,
        n_paths=n_paths,
        params=params,
    )
    out_dir = args.out or file_cfg.get("out") or "results"
    return cfg, out_dir


def _summary(cfg, outcome, out_dir):
    lines = [f"{cfg.problem}: N={cfg.grid_sizes} backend={cfg.backend} -> {out_dir}"]
    for a in outcome.assertions:
        lines.append(f"  [{'pass' if a.passed else 'FAIL'}] {a.name}: {a.value}")
    return "\n".join(lines)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, out_dir = resolve(args)
    except SpecError as exc:
        print(f"fbsvie: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        outcome = run(cfg, out_dir)
    except Error as exc:
        print(f"fbsvie: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(_summary(cfg, outcome, out_dir))
    return 0 if all(a.passed for a in outcome.assertions) else 1


if __name__ == "__main__":
    sys.exit(main())
