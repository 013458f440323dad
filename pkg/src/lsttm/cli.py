"""Command-line entry point.

    lsttm generate-data <config> <out>
    lsttm train <events> <config> <ckpt-out>
    lsttm eval-temporal <ckpt> <test-log> <report-out>
    lsttm ablate <variant> <events> <config> <report-out>
    lsttm report <reports...>

Configs are key=value files; keys for the simulator and the trainer may share
one file, and each command picks the keys it understands.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import datasim
from .evaluation import HourlyReport, evaluate_report, format_table, read_reports, run_ablation, write_reports
from .trainer import VARIANTS, TrainerConfig, daily_full_train, load_checkpoint, save_checkpoint

log = logging.getLogger("lsttm")


def _read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    return datasim.read_kv(path)


def _trainer_config(args) -> TrainerConfig:
    return datasim.from_kv(
        TrainerConfig,
        _read_config(args.config),
        seed=args.seed,
        meta_mode=args.meta_mode,
        negatives_per_pair=args.negatives_per_pair,
    )


def _boundary(events: datasim.EventLog, boundary: int | None) -> int:
    if len(events) == 0:
        raise ValueError("event log is empty")
    return int(events.day.max()) if boundary is None else boundary


def cmd_generate(args) -> None:
    cfg = datasim.from_kv(datasim.SimConfig, _read_config(args.config), seed=args.seed)
    events = datasim.generate(cfg)
    datasim.store(events, args.out)
    log.info("wrote %d rows to %s", len(events), args.out)


def cmd_train(args) -> None:
    events = datasim.load(args.events)
    cfg = _trainer_config(args)
    day = _boundary(events, args.boundary_day)
    ckpt = daily_full_train(events, cfg, day)
    save_checkpoint(ckpt, args.ckpt_out)
    log.info("trained on days < %d; checkpoint %s (config %s)", day, args.ckpt_out, ckpt.config_hash)


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    events = datasim.load(args.test_log)
    last = int(events.day.max()) if len(events) else 0
    test = events.take((events.day == last) & (events.source == 0))
    report = evaluate_report(ckpt, test, args.model or ckpt.config.variant)
    write_reports([report], args.report_out)
    print(report.table())
    for flag in report.flags:
        print(flag, file=sys.stderr)


def cmd_ablate(args) -> None:
    events = datasim.load(args.events)
    cfg = _trainer_config(args)
    seeds = [cfg.seed + i for i in range(args.runs)]
    report = run_ablation(args.variant, events, cfg, seeds)
    write_reports([report], args.report_out)
    print(report.table())


def cmd_report(args) -> None:
    reports: list[HourlyReport] = []
    for path in args.reports:
        reports.extend(read_reports(path))
    print(format_table(reports))
    if args.out:
        write_reports(reports, args.out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--meta-mode", choices=("first-order", "exact"), default=None)
    common.add_argument("--negatives-per-pair", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lsttm", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="simulate an event log")
    g.add_argument("config", nargs="?")
    g.add_argument("out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="daily full training")
    t.add_argument("events")
    t.add_argument("config", nargs="?")
    t.add_argument("ckpt_out")
    t.add_argument("--boundary-day", type=int, default=None,
                   help="train on days before this one (default: the log's final day)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-temporal", parents=[common], help="hourly AUC on the final day of a log")
    e.add_argument("ckpt")
    e.add_argument("test_log")
    e.add_argument("report_out")
    e.add_argument("--model", default=None, help="name used in the report (default: the checkpoint's variant)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate one variant over several seeds")
    a.add_argument("variant", choices=VARIANTS)
    a.add_argument("events")
    a.add_argument("config", nargs="?")
    a.add_argument("report_out")
    a.add_argument("--runs", type=int, default=3)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", parents=[common], help="merge reports into one table")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", default=None, help="also write the merged rows here")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    for name in ("events", "ckpt", "test_log", "config"):
        path = getattr(args, name, None)
        if path is not None and not Path(path).is_file():
            print(f"lsttm: error: no such file: {path}", file=sys.stderr)
            return 2
    for path in getattr(args, "reports", None) or []:
        if not Path(path).is_file():
            print(f"lsttm: error: no such file: {path}", file=sys.stderr)
            return 2
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"lsttm: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
