"""Command-line front end.

Subcommands::

    twosys run --config synthetic-gaussian --seed 7 --out results/ --threads 4
    twosys table results/a/manifest.json results/b/manifest.json [--csv table.csv]
    twosys validate --config my.cfg
    twosys targets

``--config`` takes a path or the name of a shipped preset. Exit codes: 0
success, 2 configuration error, 3 runtime sampling error.
"""

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import yaml

from .. import __version__
from ..errors import ConfigError, ConvergenceError, FactorizationError, SamplingError
from .config import (
    config_violations,
    from_dict,
    load_raw,
    resolved_summary,
    schema_violations,
    shipped_configs,
)
from .runner import run_experiment, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

TABLE_COLUMNS = ("sampler", "target", "median_ess_per_grad", "min_ess_per_grad", "grads_to_low_bias", "max_rhat")

BUILTIN_TARGETS = (
    ("gaussian", "zero-mean Gaussian; precision from eig_min/eig_max/spd_seed or an explicit matrix"),
    ("student-t", "multivariate Student-t with the same scale parameters and nu > 2"),
    ("funnel", "Neal's funnel of dimension dim >= 2 with scale sigma"),
)


def _read_config(path):
    try:
        data = yaml.safe_load(load_raw(path))
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}") from None
    return data


def cmd_run(args):
    config = from_dict(_read_config(args.config))
    problems = config_violations(config)
    if problems:
        path, msg = problems[0]
        raise ConfigError(path, msg)
    result = run_experiment(config, seed=args.seed, threads=args.threads)
    out = Path(args.out if args.out is not None else config.output.dir)
    emit = args.emit_samples if args.emit_samples is not None else config.output.emit_samples
    manifest = write_outputs(result, out, emit)
    if result.status == "excluded":
        print(f"excluded: {result.manifest['exclusion']}")
    else:
        s = result.manifest["summary"]
        print(f"{result.manifest['sampler_label']} on {config.target.name}: "
              f"median ESS/Grad {_fmt(s['median_ess_per_grad'])}, max R-hat {_fmt(s['max_rhat'])}")
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_validate(args):
    try:
        data = _read_config(args.config)
    except ConfigError as exc:
        print(exc)
        print("1 violations")
        return EXIT_CONFIG
    problems = schema_violations(data)
    config = None
    if not problems:
        config = from_dict(data)
        problems = config_violations(config)
    for path, msg in problems:
        print(f"{path}: {msg}")
    print(f"{len(problems)} violations")
    if config is not None:
        for line in resolved_summary(config):
            print(line)
    return EXIT_OK


def cmd_targets(args):
    for name, text in BUILTIN_TARGETS:
        print(f"{name:10s} {text}")
    print()
    print("shipped configs: " + ", ".join(shipped_configs()))
    return EXIT_OK


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, int):
        return str(v)
    return f"{v:.3g}"


def table_rows(manifests):
    """One row per manifest; raises ConfigError for incompatible targets."""
    seen = {}
    rows = []
    for path, m in manifests:
        target = m.get("target", {})
        name = target.get("name", "?")
        if name in seen and seen[name][1] != target:
            other_path, other = seen[name]
            diffs = sorted(k for k in set(other) | set(target) if other.get(k) != target.get(k))
            detail = ", ".join(f"{k}: {other.get(k)!r} vs {target.get(k)!r}" for k in diffs)
            raise ConfigError("target", f"incompatible {name} targets in {other_path} and {path} ({detail})")
        seen.setdefault(name, (path, target))
        label = f"{name}(d={target.get('dim')})"
        s = m.get("summary", {})
        bias = s.get("grads_to_low_bias") if s.get("bias_reference") else None
        rows.append([m.get("sampler_label", m.get("name", "?")), label,
                     s.get("median_ess_per_grad"), s.get("min_ess_per_grad"), bias, s.get("max_rhat")])
    return rows


def table_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for row in rows:
        w.writerow([c if isinstance(c, str) else ("-" if c is None else repr(c)) for c in row])
    return buf.getvalue()


def table_text(rows):
    cells = [list(TABLE_COLUMNS)] + [[c if isinstance(c, str) else _fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(TABLE_COLUMNS))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_table(args):
    manifests = []
    for p in args.manifests:
        path = Path(p)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            manifests.append((str(path), json.loads(path.read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(str(path), f"cannot read manifest: {exc}") from None
    rows = table_rows(manifests)
    sys.stdout.write(table_text(rows))
    if args.csv:
        Path(args.csv).write_text(table_csv(rows))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="twosys", description="Two-system ensemble Langevin samplers: experiments and diagnostics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True, help="config file or shipped preset name")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--emit-samples", choices=("none", "binary", "csv"), default=None)
    p.add_argument("--threads", type=int, default=1, help="worker processes; affects speed only")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("table", help="compare manifests")
    p.add_argument("manifests", nargs="+", help="manifest.json files or output directories")
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("validate", help="check a config and print its resolved form")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("targets", help="list built-in targets and shipped configs")
    p.set_defaults(func=cmd_targets)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed: must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "threads", 1) < 1:
        print("error: --threads: must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SamplingError, ConvergenceError, FactorizationError) as exc:
        print(f"sampling error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
