"""Per-day stage runner over a hive-partitioned data root.

Layout under the root (``DD`` etc. are zero padded)::

    raw/year=YYYY/month=MM/day=DD/source.json      ingested manifest row
    annotations/.../annotations.parquet            merged annotations
    split/.../                                     partition pcaps, report, packet metadata
    flows/.../                                     per-partition flow tables
    labeled/.../                                   per-partition labeled tables
    dataset/.../flows.parquet (+ flows.csv)        aggregated day
    samples/year=YYYY/month=MM/                    sampled month
    preprocessed/year=YYYY/month=MM/               model-ready splits
    ledger/...                                     stage hashes

A stage is skipped when the hash of its inputs and parameters matches the
ledger and every recorded output still has its recorded hash. Once a stage
runs, every later stage of the same invocation runs too.
"""

from __future__ import annotations

import contextlib
import datetime as dt
import hashlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import pandas as pd

from .annotations import BENIGN, load_day_annotations, read_day_annotations, write_day_annotations
from .dataset import aggregate_day, prepare_dataset, propagate_labels, sample_period, write_prepared
from .errors import StageError, ValidationError
from .flowmeter import ACTIVITY_TIMEOUT_US, FLOW_TIMEOUT_US, AssemblyStats, flows_from_capture, write_flows_csv
from .splitter import partition_files, split_capture

logger = logging.getLogger(__name__)

ROOT_ENV = "MAWIFLOW_DATA_ROOT"
DAY_STAGES = ["merge-annotations", "split", "flows", "label", "aggregate"]
MONTH_STAGES = ["sample", "preprocess"]
STAGES = DAY_STAGES + MONTH_STAGES


def default_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "data"))


# -- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    date: dt.date
    capture: str
    annotations: tuple[str, ...]


def _is_url(s: str) -> bool:
    return "://" in s


def ingest_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse a tab-separated ``date  capture  annotations`` listing.

    Annotation paths are comma separated. Relative paths resolve against the
    manifest's directory. Blank lines and ``#`` comments are ignored, and so
    is a header row starting with ``date``.
    """
    path = Path(path)
    base = path.parent.resolve()
    entries: list[ManifestEntry] = []
    seen: dict[dt.date, int] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split("\t")]
        if lineno == 1 and cells[0].lower() == "date":
            continue
        where = f"{path}:{lineno}"
        if len(cells) != 3 or not all(cells):
            raise ValidationError(f"{where}: expected date, capture and annotations columns")
        try:
            date = dt.date.fromisoformat(cells[0])
        except ValueError:
            raise ValidationError(f"{where}: bad date {cells[0]!r}") from None
        if date in seen:
            raise ValidationError(f"{where}: duplicate date {date} (first on line {seen[date]})")
        seen[date] = lineno

        def resolve(p: str) -> str:
            return p if _is_url(p) or os.path.isabs(p) else str(base / p)

        annotations = tuple(resolve(a.strip()) for a in cells[2].split(",") if a.strip())
        if not annotations:
            raise ValidationError(f"{where}: no annotation files")
        entries.append(ManifestEntry(date, resolve(cells[1]), annotations))
    return sorted(entries, key=lambda e: e.date)


# -- storage helpers --------------------------------------------------------


def hive(date: dt.date, day: bool = True) -> Path:
    p = Path(f"year={date.year:04d}") / f"month={date.month:02d}"
    return p / f"day={date.day:02d}" if day else p


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digests(path: Path) -> dict[str, str]:
    """sha256 of a file, or of every file under a directory (relative names)."""
    if path.is_file():
        return {"": file_digest(path)}
    if not path.is_dir():
        return {}
    return {str(p.relative_to(path)): file_digest(p) for p in sorted(path.rglob("*")) if p.is_file()}


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


@contextlib.contextmanager
def atomic_dir(final: Path) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``final`` only on success."""
    final.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        yield scratch
        if final.exists():
            shutil.rmtree(final)
        os.replace(scratch, final)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise


# -- configuration and ledger ----------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    root: Path
    flow_timeout_us: int = FLOW_TIMEOUT_US
    activity_timeout_us: int = ACTIVITY_TIMEOUT_US
    symmetric_filters: bool = False
    seed: int = 0
    jobs: int = 1

    def stage_params(self, stage: str) -> dict:
        if stage == "split":
            return {"symmetric": self.symmetric_filters}
        if stage == "flows":
            return {"flow_timeout_us": self.flow_timeout_us, "activity_timeout_us": self.activity_timeout_us}
        return {}


@dataclass
class StageReport:
    stage: str
    key: str
    status: str  # "ran" or "skipped"
    reason: str = ""
    outputs: list[str] = field(default_factory=list)


class Ledger:
    """Stage hashes for one day or month, kept in one JSON file."""

    def __init__(self, path: Path):
        self.path = path
        self.entries: dict = json.loads(path.read_text()) if path.exists() else {}

    def save(self) -> None:
        atomic_write_text(self.path, json.dumps(self.entries, indent=2, sort_keys=True) + "\n")


def _input_hash(stage: str, params: dict, inputs: Sequence[Path], root: Path) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"stage": stage, "params": params}, sort_keys=True).encode())
    for p in inputs:
        h.update(b"\0" + _rel(p, root).encode())
        for name, digest in tree_digests(p).items():
            h.update(f"\0{name}\0{digest}".encode())
    return h.hexdigest()


def _rel(p: Path, root: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(p)


def _run_stage(
    ledger: Ledger,
    root: Path,
    stage: str,
    key: str,
    params: dict,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    action: Callable[[], None],
    force: bool,
) -> StageReport:
    missing = [str(p) for p in inputs if not p.exists()]
    if missing:
        raise StageError(f"{stage} {key}: missing inputs {missing}")
    ihash = _input_hash(stage, params, inputs, root)
    rec = ledger.entries.get(stage)
    reason = ""
    if force:
        reason = "upstream stage ran"
    elif rec is None:
        reason = "no ledger entry"
    elif rec["input_hash"] != ihash:
        reason = "inputs changed"
    else:
        for rel, digests in rec["outputs"].items():
            if tree_digests(root / rel) != digests:
                reason = f"output {rel} changed"
                break
    rel_outputs = [_rel(p, root) for p in outputs]
    if not reason:
        return StageReport(stage, key, "skipped", outputs=rel_outputs)
    logger.info("%s %s: running (%s)", stage, key, reason)
    action()
    ledger.entries[stage] = {
        "input_hash": ihash,
        "outputs": {_rel(p, root): tree_digests(p) for p in outputs},
    }
    ledger.save()
    return StageReport(stage, key, "ran", reason, rel_outputs)


# -- ingest -----------------------------------------------------------------


def source_path(root: Path, date: dt.date) -> Path:
    return root / "raw" / hive(date) / "source.json"


def ingest(manifest: str | Path, root: Path) -> list[ManifestEntry]:
    """Record every manifest row under ``raw/``; returns the parsed entries."""
    entries = ingest_manifest(manifest)
    for e in entries:
        body = {"date": e.date.isoformat(), "capture": e.capture, "annotations": list(e.annotations)}
        atomic_write_text(source_path(root, e.date), json.dumps(body, indent=2, sort_keys=True) + "\n")
    return entries


def ingested_dates(root: Path) -> list[dt.date]:
    out = []
    for p in (root / "raw").glob("year=*/month=*/day=*/source.json"):
        out.append(dt.date.fromisoformat(json.loads(p.read_text())["date"]))
    return sorted(out)


def load_source(root: Path, date: dt.date) -> ManifestEntry:
    p = source_path(root, date)
    if not p.exists():
        raise ValidationError(f"{date} has not been ingested")
    d = json.loads(p.read_text())
    return ManifestEntry(date, d["capture"], tuple(d["annotations"]))


# -- day stages -------------------------------------------------------------


@dataclass(frozen=True)
class DayPaths:
    annotations: Path
    split: Path
    flows: Path
    labeled: Path
    dataset: Path
    ledger: Path

    @classmethod
    def of(cls, root: Path, date: dt.date) -> "DayPaths":
        h = hive(date)
        return cls(
            annotations=root / "annotations" / h / "annotations.parquet",
            split=root / "split" / h,
            flows=root / "flows" / h,
            labeled=root / "labeled" / h,
            dataset=root / "dataset" / h,
            ledger=root / "ledger" / h / "stages.json",
        )


def _write_flows(split_dir: Path, out: Path, cfg: PipelineConfig) -> None:
    with atomic_dir(out) as tmp:
        summary = {}
        for pid, pcap in partition_files(split_dir):
            stats = AssemblyStats()
            df = flows_from_capture(pcap, cfg.flow_timeout_us, cfg.activity_timeout_us, stats=stats)
            write_flows_csv(df, tmp / f"{pid.stem}.csv")
            df.to_parquet(tmp / f"{pid.stem}.parquet", index=False)
            summary[pid.stem] = asdict(stats)
        (tmp / "flows_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _write_labeled(flows_dir: Path, annotations: Path, out: Path) -> None:
    from .splitter import PartitionId

    day = read_day_annotations(annotations)
    with atomic_dir(out) as tmp:
        for p in sorted(flows_dir.glob("*.parquet")):
            pid = PartitionId.from_stem(p.stem)
            propagate_labels(pd.read_parquet(p), pid, day).to_parquet(tmp / p.name, index=False)


def _write_aggregate(labeled_dir: Path, out: Path) -> None:
    tables = [pd.read_parquet(p) for p in sorted(labeled_dir.glob("*.parquet"))]
    df = aggregate_day(tables)
    with atomic_dir(out) as tmp:
        df.to_parquet(tmp / "flows.parquet", index=False)
        write_flows_csv(df, tmp / "flows.csv")


def run_day(cfg: PipelineConfig, date: dt.date, stages: Optional[Sequence[str]] = None) -> list[StageReport]:
    """Run the requested day stages (all by default) in pipeline order."""
    wanted = list(DAY_STAGES if stages is None else stages)
    unknown = [s for s in wanted if s not in DAY_STAGES]
    if unknown:
        raise ValidationError(f"unknown day stages: {unknown}")
    root = cfg.root
    src = load_source(root, date)
    for p in (src.capture, *src.annotations):
        if _is_url(p):
            raise ValidationError(f"{date}: {p} is remote; download it and ingest a local path")
        if not Path(p).exists():
            raise ValidationError(f"{date}: input {p} does not exist")
    paths = DayPaths.of(root, date)
    ledger = Ledger(paths.ledger)
    key = date.isoformat()
    reports: list[StageReport] = []
    force = False

    def step(stage, inputs, outputs, action):
        nonlocal force
        if stage not in wanted:
            return
        rep = _run_stage(ledger, root, stage, key, cfg.stage_params(stage), inputs, outputs, action, force)
        force = force or rep.status == "ran"
        reports.append(rep)

    ann_inputs = [Path(a) for a in src.annotations]

    def merge():
        day = load_day_annotations(ann_inputs, date=date)
        paths.annotations.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".annotations.", dir=paths.annotations.parent)
        os.close(fd)
        try:
            write_day_annotations(day, Path(tmp))
            os.replace(tmp, paths.annotations)
        except BaseException:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(tmp)
            raise

    step("merge-annotations", ann_inputs, [paths.annotations], merge)
    step(
        "split",
        [Path(src.capture), paths.annotations],
        [paths.split],
        lambda: split_capture(src.capture, read_day_annotations(paths.annotations), paths.split, cfg.symmetric_filters),
    )
    step("flows", [paths.split], [paths.flows], lambda: _write_flows(paths.split, paths.flows, cfg))
    step(
        "label",
        [paths.flows, paths.annotations],
        [paths.labeled],
        lambda: _write_labeled(paths.flows, paths.annotations, paths.labeled),
    )
    step("aggregate", [paths.labeled], [paths.dataset], lambda: _write_aggregate(paths.labeled, paths.dataset))
    return reports


def _run_day_job(args) -> list[StageReport]:
    cfg, date, stages = args
    return run_day(cfg, date, stages)


def run_days(cfg: PipelineConfig, dates: Sequence[dt.date], stages: Optional[Sequence[str]] = None) -> list[StageReport]:
    """Run days independently; with ``cfg.jobs > 1`` they run in worker processes."""
    jobs = [(cfg, d, stages) for d in dates]
    if cfg.jobs <= 1 or len(jobs) <= 1:
        return [r for j in jobs for r in _run_day_job(j)]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        return [r for reps in pool.map(_run_day_job, jobs) for r in reps]


# -- month stages -----------------------------------------------------------


def month_days(root: Path, year: int, month: int) -> list[Path]:
    return sorted((root / "dataset" / f"year={year:04d}" / f"month={month:02d}").glob("day=*/flows.parquet"))


def run_sample(
    cfg: PipelineConfig, year: int, month: int, target_rows: int, stratify: bool = False
) -> StageReport:
    root = cfg.root
    inputs = month_days(root, year, month)
    if not inputs:
        raise StageError(f"no aggregated days for {year:04d}-{month:02d}")
    out = root / "samples" / hive(dt.date(year, month, 1), day=False)
    ledger = Ledger(root / "ledger" / hive(dt.date(year, month, 1), day=False) / "sample.json")

    def action():
        df = sample_period([pd.read_parquet(p) for p in inputs], target_rows, cfg.seed, "Label" if stratify else None)
        with atomic_dir(out) as tmp:
            df.to_parquet(tmp / "sample.parquet", index=False)
            write_flows_csv(df, tmp / "sample.csv")

    params = {"rows": target_rows, "seed": cfg.seed, "stratify": stratify}
    return _run_stage(ledger, root, "sample", f"{year:04d}-{month:02d}", params, inputs, [out], action, False)


def run_preprocess(cfg: PipelineConfig, year: int, month: int, with_validation: bool = False) -> StageReport:
    root = cfg.root
    sample = root / "samples" / hive(dt.date(year, month, 1), day=False) / "sample.parquet"
    out = root / "preprocessed" / hive(dt.date(year, month, 1), day=False)
    ledger = Ledger(root / "ledger" / hive(dt.date(year, month, 1), day=False) / "preprocess.json")

    def action():
        prepared = prepare_dataset(pd.read_parquet(sample), cfg.seed, with_validation)
        with atomic_dir(out) as tmp:
            write_prepared(prepared, tmp)

    params = {"seed": cfg.seed, "validation": with_validation}
    return _run_stage(ledger, root, "preprocess", f"{year:04d}-{month:02d}", params, [sample], [out], action, False)


# -- statistics -------------------------------------------------------------


@dataclass
class DatasetStats:
    rows: int = 0
    labels: dict[str, int] = field(default_factory=dict)
    per_day: list[dict] = field(default_factory=list)

    @property
    def anomaly_ratio(self) -> float:
        return (self.rows - self.labels.get(BENIGN, 0)) / self.rows if self.rows else 0.0

    def to_text(self) -> str:
        lines = [f"rows\t{self.rows}", f"anomaly_ratio\t{self.anomaly_ratio:.6f}"]
        lines += [f"label\t{k}\t{v}" for k, v in sorted(self.labels.items())]
        lines.append("date\tflows\tbenign\tnon_benign\tanomalies\tfilters")
        for d in self.per_day:
            lines.append(
                f"{d['date']}\t{d['flows']}\t{d['benign']}\t{d['non_benign']}\t{d['anomalies']}\t{d['filters']}"
            )
        return "\n".join(lines) + "\n"


def dataset_stats(root: Path) -> DatasetStats:
    """Row counts, label counts and a per-day coverage series."""
    st = DatasetStats()
    labels: dict[str, int] = {}
    for p in sorted((root / "dataset").glob("year=*/month=*/day=*/flows.parquet")):
        parts = dict(part.split("=") for part in p.parent.relative_to(root / "dataset").parts)
        date = dt.date(int(parts["year"]), int(parts["month"]), int(parts["day"]))
        counts = pd.read_parquet(p, columns=["Label"])["Label"].value_counts()
        n = int(counts.sum())
        benign = int(counts.get(BENIGN, 0))
        n_anom = n_filters = 0
        ann = DayPaths.of(root, date).annotations
        if ann.exists():
            day = read_day_annotations(ann)
            n_anom, n_filters = len(day.anomalies), day.filter_count
        st.per_day.append(
            {"date": date.isoformat(), "flows": n, "benign": benign, "non_benign": n - benign,
             "anomalies": n_anom, "filters": n_filters}
        )
        st.rows += n
        for k, v in counts.items():
            labels[str(k)] = labels.get(str(k), 0) + int(v)
    st.labels = dict(sorted(labels.items()))
    return st
