"""Command-line entry point.

Verbs: pretrain, run, sweep, report, inspect-checkpoint. Every RunConfig
field is exposed as a flag; --config points at a flat key=value file and
flags override file entries. The default output root comes from the
LORACL_OUTPUT_ROOT environment variable when --output-dir is not given.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error, 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

from . import checkpoint as ckpt
from . import harness
from .errors import (AdapterError, ConfigError, ContractError, DataError,
                     LoraclError, NumericError, ShapeError, StorageError)

_EXIT_CODES = ((ConfigError, 2), (ContractError, 2), (ShapeError, 2),
               (AdapterError, 2), (DataError, 3), (NumericError, 4),
               (StorageError, 5))


def parse_config_file(path) -> dict:
    """Flat key=value lines; blank lines and # comments are skipped."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, "
                              f"got {stripped!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="FILE",
                        help="flat key=value configuration file")
    for f in fields(harness.RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, type=type(f.default),
                            default=None, metavar=f.name.upper(),
                            help=f"RunConfig.{f.name} "
                                 f"(default {f.default!r})")


def merged_config(args) -> harness.RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for f in fields(harness.RunConfig):
        given = getattr(args, f.name, None)
        if given is not None:
            values[f.name] = given
    return harness.config_from_mapping(values)


def _output_root(cfg: harness.RunConfig) -> str:
    return (cfg.output_dir or os.environ.get(harness.OUTPUT_ROOT_ENV)
            or "loracl_runs")


def _run_dir(cfg: harness.RunConfig, prefix: str) -> str:
    name = f"{prefix}_{cfg.method}_{cfg.scenario}_{harness.run_identifier(cfg)}"
    path = os.path.join(_output_root(cfg), name)
    os.makedirs(path, exist_ok=True)
    return path


def _record_log(record: harness.RunRecord) -> dict:
    return {
        "run_id": record.run_id,
        "repeat": record.repeat,
        "seed": record.seed,
        "params_trainable": record.params_trainable,
        "pool_accuracy": record.pool_accuracy,
        "rows": [asdict(row) for row in record.rows],
    }


def _write_log(path, cfg, records, extra=None):
    payload = {"config": asdict(cfg),
               "records": [_record_log(r) for r in records]}
    payload.update(extra or {})
    try:
        with open(path, "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write run log {path}: {exc}") from exc


def _print_summary(records):
    summary = harness.summarize(records)
    for record in records:
        routing = record.final_routing_acc
        forgot = record.final_forgetting
        print(f"  repeat {record.repeat} (seed {record.seed}): "
              f"avg_acc {record.final_avg_acc:.4f}, "
              f"forgetting {'N/A' if forgot is None else f'{forgot:.4f}'}, "
              f"routing {'N/A' if routing is None else f'{routing:.4f}'}")
    acc = summary["avg_acc"]
    if acc["std"] is not None:
        print(f"  over {summary['n']} repeats: "
              f"avg_acc {acc['mean']:.4f} +/- {acc['std']:.4f}")


def _cmd_pretrain(args) -> int:
    cfg = merged_config(args)
    outcome = harness.prepare_backbone(cfg)
    out = args.out or os.path.join(_output_root(cfg), "backbone.ckpt")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    harness.save_backbone(outcome, out)
    print(f"pool accuracy {outcome.pool_accuracy:.4f}; backbone saved to {out}")
    return 0


def _cmd_run(args) -> int:
    cfg = merged_config(args)
    if args.backbone:
        harness.install_backbone(cfg, harness.load_backbone(args.backbone))
    run_dir = _run_dir(cfg, "run")
    states = []

    def sink(repeat, state):
        path = os.path.join(run_dir, f"state_r{repeat}.ckpt")
        harness.save_run_state(state, path)
        states.append(path)

    records = harness.execute_run(cfg, state_sink=sink)
    csv_path = harness.write_results_csv(records,
                                         os.path.join(run_dir, "results.csv"))
    _write_log(os.path.join(run_dir, "run_log.json"), cfg, records,
               extra={"state_files": states})
    print(f"{cfg.method} on {cfg.scenario}: {len(records)} repeat(s)")
    _print_summary(records)
    print(f"results in {csv_path}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = merged_config(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be comma-separated integers: "
                          f"{args.values!r}") from exc
    run_dir = _run_dir(cfg, f"sweep_{args.axis}")
    csv_path = os.path.join(run_dir, "sweep.csv")
    done_rows = []

    def keep(value, records):
        for record in records:
            done_rows.extend(harness.record_rows(record))
        # rewritten after every value so partial sweeps survive a failure
        harness.write_rows_csv(done_rows, csv_path)
        print(f"  {args.axis}={value}: "
              f"avg_acc {harness.summarize(records)['avg_acc']['mean']:.4f}")

    records = harness.sweep(cfg, args.axis, values, on_records=keep)
    _write_log(os.path.join(run_dir, "run_log.json"), cfg, records,
               extra={"axis": args.axis, "values": values})
    print(f"sweep results in {csv_path}")
    return 0


def _cmd_report(args) -> int:
    rows = []
    for path in args.results:
        rows.extend(harness.read_rows_csv(path))
    out_dir = args.out or os.path.join(
        os.environ.get(harness.OUTPUT_ROOT_ENV, "loracl_runs"), "report")
    paths = harness.report_rows(rows, out_dir)
    print(paths["table"], end="")
    print(f"report written to {out_dir}")
    return 0


def _cmd_inspect(args) -> int:
    info = ckpt.inspect_checkpoint(args.path)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loracl",
        description="Continual learning with per-dataset low-rank adapter "
                    "experts and prototype routing.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("pretrain", help="train and save the frozen backbone")
    _add_config_flags(p)
    p.add_argument("--out", metavar="PATH", help="backbone checkpoint path")
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("run", help="execute one continual-learning run")
    _add_config_flags(p)
    p.add_argument("--backbone", metavar="PATH",
                   help="reuse a pretrained backbone checkpoint")
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("sweep", help="repeat a run over rank or cluster values")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=("rank", "clusters"))
    p.add_argument("--values", required=True, metavar="V1,V2,...",
                   help="strictly increasing integers")
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("report", help="merge result CSVs and print the "
                                      "parameter table")
    p.add_argument("--results", required=True, nargs="+", metavar="CSV")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(handler=_cmd_report)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest")
    p.add_argument("path", metavar="PATH")
    p.set_defaults(handler=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except LoraclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for kind, code in _EXIT_CODES:
            if isinstance(exc, kind):
                return code
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
