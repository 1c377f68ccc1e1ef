"""``mawiflow`` command line."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .errors import EXIT_CODES, MawiflowError

log = logging.getLogger("mawiflow")


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a YYYY-MM-DD date: {text!r}") from None


def _month(text: str) -> tuple[int, int]:
    try:
        d = dt.datetime.strptime(text, "%Y-%m")
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a YYYY-MM month: {text!r}") from None
    return d.year, d.month


def _stages(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in pipeline.DAY_STAGES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown stage(s) {bad}; choose from {pipeline.DAY_STAGES}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mawiflow", description="Turn packet captures plus anomaly annotations into labeled flow datasets.")
    p.add_argument("--root", type=Path, default=None, help=f"data root (default ${pipeline.ROOT_ENV} or ./data)")
    p.add_argument("--jobs", type=int, default=1, help="days processed in parallel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flow-timeout", type=float, default=pipeline.FLOW_TIMEOUT_US / 1e6, metavar="SEC")
    p.add_argument("--activity-timeout", type=float, default=pipeline.ACTIVITY_TIMEOUT_US / 1e6, metavar="SEC")
    p.add_argument("--symmetric-filters", action="store_true", help="also match filters with source and destination swapped")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    ing = sub.add_parser("ingest", help="register a manifest of daily captures and annotation files")
    ing.add_argument("manifest", type=Path)

    run = sub.add_parser("run", help="run the per-day stages")
    which = run.add_mutually_exclusive_group()
    which.add_argument("--date", type=_date)
    which.add_argument("--range", type=_date, nargs=2, metavar=("FIRST", "LAST"))
    run.add_argument("--stages", type=_stages, default=None, help="comma separated subset, e.g. split,flows")

    stats = sub.add_parser("stats", help="row counts, label ratios and per-day coverage")
    stats.add_argument("--json", type=Path, default=None, help="also write the summary as JSON")

    smp = sub.add_parser("sample", help="uniformly sample one month of aggregated flows")
    smp.add_argument("--month", type=_month, required=True, metavar="YYYY-MM")
    smp.add_argument("--rows", type=int, default=3_000_000)
    smp.add_argument("--stratify", action="store_true", help="keep label proportions")

    pre = sub.add_parser("preprocess", help="scale, encode and split a sampled month")
    pre.add_argument("--month", type=_month, required=True, metavar="YYYY-MM")
    pre.add_argument("--validation", action="store_true", help="carve a validation split out of train")

    syn = sub.add_parser("synth", help="write a synthetic month of captures and annotations")
    syn.add_argument("out", type=Path)
    syn.add_argument("--month", type=_month, default=(2011, 1), metavar="YYYY-MM")
    syn.add_argument("--days", type=int, default=3)
    syn.add_argument("--packets", type=int, default=10_000)
    syn.add_argument("--anomalies", type=int, default=3)
    return p


def _config(args) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(
        root=args.root or pipeline.default_root(),
        flow_timeout_us=round(args.flow_timeout * 1e6),
        activity_timeout_us=round(args.activity_timeout * 1e6),
        symmetric_filters=args.symmetric_filters,
        seed=args.seed,
        jobs=max(1, args.jobs),
    )


def _print_reports(reports) -> None:
    for r in reports:
        print(f"{r.key}\t{r.stage}\t{r.status}" + (f"\t{r.reason}" if r.reason else ""))


def dispatch(args) -> int:
    cfg = _config(args)
    if args.verb == "ingest":
        entries = pipeline.ingest(args.manifest, cfg.root)
        print(f"ingested {len(entries)} day(s) into {cfg.root}")
    elif args.verb == "run":
        if args.date:
            dates = [args.date]
        else:
            dates = pipeline.ingested_dates(cfg.root)
            if args.range:
                lo, hi = args.range
                dates = [d for d in dates if lo <= d <= hi]
        if not dates:
            print("nothing to run", file=sys.stderr)
        _print_reports(pipeline.run_days(cfg, dates, args.stages))
    elif args.verb == "stats":
        st = pipeline.dataset_stats(cfg.root)
        sys.stdout.write(st.to_text())
        if args.json:
            body = {"rows": st.rows, "anomaly_ratio": st.anomaly_ratio, "labels": st.labels, "per_day": st.per_day}
            args.json.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    elif args.verb == "sample":
        _print_reports([pipeline.run_sample(cfg, *args.month, args.rows, args.stratify)])
    elif args.verb == "preprocess":
        _print_reports([pipeline.run_preprocess(cfg, *args.month, args.validation)])
    elif args.verb == "synth":
        from .synth import synth_month

        manifest = synth_month(args.out, *args.month, args.days, args.packets, args.anomalies, seed=args.seed)
        print(manifest)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except MawiflowError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
