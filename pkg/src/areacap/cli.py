"""Command line: ``gen`` test fields, ``run`` experiments, pretty-print a ``report``.

Exit status: 0 on success, 1 on input errors, 2 when an experiment's checks fail.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from .builtins import BUILTINS, generate
from .experiments import ConfigError, Context, jsonable, run_experiment
from .fieldio import write_field
from .grid import set_workers

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2
REPORT_NAME = "report.jsonl"
SUMMARY_NAME = "summary.txt"

ALIASES = {"identity-map": "identity", "identity_map": "identity", "linear-map": "linear_map",
           "smooth-random": "smooth_random", "radial-singular-map": "radial_singular_map"}


class InputError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_params(items: list[str]) -> dict:
    params = {}
    for item in items:
        if "=" not in item:
            raise InputError(f"parameter '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key == "n":
            key = "dim"
        params[key] = _parse_value(value)
    return params


def load_config(path: Path) -> dict:
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: the config must be a JSON object")
    return cfg


def cmd_gen(args) -> int:
    name = ALIASES.get(args.builtin, args.builtin)
    if name not in BUILTINS:
        print(f"error: unknown builtin '{args.builtin}'; available: {', '.join(sorted(BUILTINS))}", file=sys.stderr)
        return EXIT_INPUT
    params = load_config(Path(args.config)) if args.config else {}
    params.update(_parse_params(args.params))
    if args.seed is not None and name == "smooth_random":
        params.setdefault("seed", args.seed)
    try:
        field = generate(name, params)
    except (TypeError, ValueError) as exc:
        print(f"error: cannot build '{name}' from {params}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out or ".")
    path = write_field(out / f"{args.name or name}.json", field)
    print(path)
    return EXIT_OK


def _resolved_config(cfg: dict, config_dir: Path) -> dict:
    out = dict(cfg)
    for key, value in cfg.items():
        if (key.endswith("_file") or key.endswith("_manifest")) and isinstance(value, str):
            p = Path(value)
            out[key] = str(p if p.is_absolute() else (config_dir / p).resolve())
    return out


def summary_table(records: list[dict]) -> str:
    lines = [f"{'kind':<16} {'wall_time[s]':>12}  key values", "-" * 72]
    for rec in records:
        payload = rec["payload"]
        if rec["kind"] == "header":
            lines.append(f"{'header':<16} {'':>12}  version {payload['version']}, seed {payload['seed']}, "
                         f"kind {payload['config'].get('kind')}")
            continue
        keys = [k for k in ("value", "margin", "lhs", "rhs", "rel_error", "slope", "ratio_spread",
                            "violations", "residual_nodes", "stats") if k in payload]
        text = ", ".join(f"{k}={_short(payload[k])}" for k in keys)
        lines.append(f"{rec['kind']:<16} {rec['wall_time']:>12.3f}  {text}")
    return "\n".join(lines) + "\n"


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_short(x)}" for k, x in v.items()) + "}"
    return str(v)


def cmd_run(args) -> int:
    if not args.config:
        print("error: run needs --config <path>", file=sys.stderr)
        return EXIT_INPUT
    config_path = Path(args.config)
    cfg = load_config(config_path)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise InputError(f"{config_path}: config field 'seed' must be a nonnegative integer")
    cfg["seed"] = seed
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(config_dir=config_path.resolve().parent, out_dir=out, seed=seed)
    header = {"config": _resolved_config(cfg, ctx.config_dir), "version": __version__, "seed": seed}
    t = time.perf_counter()
    try:
        run_experiment(cfg, ctx)
    except ConfigError as exc:
        print(f"error: {config_path}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    records = [{"kind": "header", "payload": jsonable(header), "wall_time": time.perf_counter() - t}] + ctx.records
    with open(out / REPORT_NAME, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False) + "\n")
    (out / SUMMARY_NAME).write_text(summary_table(records))
    if ctx.violations:
        for v in ctx.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def read_report(path: Path) -> list[dict]:
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise InputError(f"report file not found: {path}")
    records = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: line {i}: {exc.msg}")
    return records


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / REPORT_NAME
    records = read_report(path)
    sys.stdout.write(summary_table(records))
    if args.full:
        for rec in records:
            print(json.dumps(rec, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="areacap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="FFT worker cap (default 1)")
        p.add_argument("--seed", type=int, help="seed for sampling choices")

    g = sub.add_parser("gen", help="write a builtin test field")
    g.add_argument("builtin", help=f"one of: {', '.join(sorted(BUILTINS))}")
    g.add_argument("params", nargs="*", help="key=value parameters (values parsed as JSON)")
    g.add_argument("--name", help="output file stem (default: builtin name)")
    common(g)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the experiment named in --config")
    common(r)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="pretty-print a report file or run directory")
    rep.add_argument("path")
    rep.add_argument("--full", action="store_true", help="also dump every record")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) is not None:
        try:
            set_workers(getattr(args, "threads", 1))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
