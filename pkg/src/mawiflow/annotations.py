"""MAWILab annotation parsing (CSV filter listings, ADMD XML) and per-day merging.

Canonical CSV header (one row per filter, rows sharing ``anomalyID`` belong
to the same anomaly; ``protocol`` is optional)::

    anomalyID,srcIP,srcPort,dstIP,dstPort,protocol,taxonomy,heuristic,distance,nbDetectors,label

Canonical ADMD layout::

    <admd>
      <anomaly id="a1" type="anomalous" taxonomy="ptmpHTTP" heuristic="503"
               distance="0.7" nbDetectors="4">
        <from sec="1293876000" usec="0"/>
        <to sec="1293876060" usec="0"/>
        <filter src_ip="10.0.0.1" dst_port="80" protocol="6"/>
        <slice>                       <!-- optional extra windows -->
          <from .../><to .../><filter .../>
        </slice>
      </anomaly>
    </admd>

Files using other column or attribute names are adapted with ``CsvSchema`` /
``AdmdSchema`` rather than by editing the parser.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import pyarrow as pa
import pyarrow.parquet as pq

from .capture import canonical_ip
from .errors import (
    AnnotationConflictError,
    AnnotationFormatError,
    AnnotationParseError,
    ValidationError,
)

logger = logging.getLogger(__name__)

ANOMALOUS = "anomalous"
SUSPICIOUS = "suspicious"
NOTICE = "notice"
BENIGN = "benign"
LABELS = (ANOMALOUS, SUSPICIOUS, NOTICE)
# lower rank wins when a packet matches several anomalies
LABEL_RANK = {ANOMALOUS: 0, SUSPICIOUS: 1, NOTICE: 2}

_TUPLE_FIELDS = ("src_ip", "dst_ip", "src_port", "dst_port", "protocol")


@dataclass(frozen=True)
class AnomalyFilter:
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    protocol: Optional[int] = None
    window: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if all(getattr(self, f) is None for f in _TUPLE_FIELDS):
            raise ValidationError("filter without any address, port or protocol matches everything")
        for name in ("src_port", "dst_port"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 65535:
                raise ValidationError(f"{name} {v} out of range")
        if self.protocol is not None and not 0 <= self.protocol <= 255:
            raise ValidationError(f"protocol {self.protocol} out of range")
        if self.window is not None and self.window[0] > self.window[1]:
            raise ValidationError(f"window start {self.window[0]} after stop {self.window[1]}")

    @property
    def expression(self) -> tuple:
        """The 5-tuple part, used to spot duplicates across sources."""
        return (self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.protocol)

    def sort_key(self) -> tuple:
        # None sorts before any value
        return tuple((v is not None, v if v is not None else 0) for v in self.expression) + (
            (self.window is not None, self.window or (0, 0)),
        )

    def describe(self) -> str:
        parts = [f"{k}={getattr(self, k)}" for k in _TUPLE_FIELDS if getattr(self, k) is not None]
        if self.window:
            parts.append(f"window=[{self.window[0]},{self.window[1]}]")
        return " ".join(parts)


@dataclass(frozen=True)
class AnomalyRecord:
    anomaly_id: str
    label: str
    taxonomy: str
    heuristic: int
    distance: float
    nb_detectors: int
    filters: tuple[AnomalyFilter, ...]

    def __post_init__(self):
        if self.label not in LABEL_RANK:
            raise ValidationError(f"anomaly {self.anomaly_id}: unknown label {self.label!r}")
        if not self.filters:
            raise ValidationError(f"anomaly {self.anomaly_id}: no filters")
        if self.nb_detectors < 0:
            raise ValidationError(f"anomaly {self.anomaly_id}: negative nbDetectors")

    def metadata(self) -> tuple:
        return (self.label, self.taxonomy, self.heuristic, self.distance, self.nb_detectors)


@dataclass(frozen=True)
class DayAnnotations:
    date: Optional[dt.date]
    anomalies: tuple[AnomalyRecord, ...]
    source_files: tuple[str, ...] = ()

    def __post_init__(self):
        counts = Counter(a.anomaly_id for a in self.anomalies)
        dupes = sorted(i for i, n in counts.items() if n > 1)
        if dupes:
            raise ValidationError(f"duplicate anomaly ids: {', '.join(dupes)}")

    def by_id(self) -> dict[str, AnomalyRecord]:
        return {a.anomaly_id: a for a in self.anomalies}

    @property
    def filter_count(self) -> int:
        return sum(len(a.filters) for a in self.anomalies)

    def as_csv_view(self) -> list[AnomalyRecord]:
        """Anomalies restricted to their window-less filters."""
        out = []
        for a in self.anomalies:
            plain = tuple(f for f in a.filters if f.window is None)
            if plain:
                out.append(replace(a, filters=plain))
        return out

    def as_admd_view(self) -> list[AnomalyRecord]:
        """Anomalies restricted to their windowed filters."""
        out = []
        for a in self.anomalies:
            timed = tuple(f for f in a.filters if f.window is not None)
            if timed:
                out.append(replace(a, filters=timed))
        return out


# -- CSV ---------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column names of an annotation CSV; override to adapt foreign files."""

    anomaly_id: str = "anomalyID"
    src_ip: str = "srcIP"
    src_port: str = "srcPort"
    dst_ip: str = "dstIP"
    dst_port: str = "dstPort"
    protocol: str = "protocol"
    taxonomy: str = "taxonomy"
    heuristic: str = "heuristic"
    distance: str = "distance"
    nb_detectors: str = "nbDetectors"
    label: str = "label"

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "CsvSchema":
        return cls(**dict(mapping))

    def required(self) -> list[str]:
        return [
            self.anomaly_id, self.src_ip, self.src_port, self.dst_ip, self.dst_port,
            self.taxonomy, self.heuristic, self.distance, self.nb_detectors, self.label,
        ]


def _opt_ip(text: Optional[str], where: str) -> Optional[str]:
    if text is None or not text.strip():
        return None
    try:
        return canonical_ip(text)
    except ValueError as exc:
        raise AnnotationParseError(f"{where}: {exc}") from None


def _opt_int(text: Optional[str], where: str, name: str, hi: int) -> Optional[int]:
    if text is None or not text.strip():
        return None
    try:
        v = int(text.strip())
    except ValueError:
        raise AnnotationParseError(f"{where}: malformed {name} {text!r}") from None
    if not 0 <= v <= hi:
        raise AnnotationParseError(f"{where}: {name} {v} out of range")
    return v


def _label(text: str, where: str) -> str:
    label = (text or "").strip().lower()
    if label not in LABEL_RANK:
        raise AnnotationParseError(f"{where}: unknown label {text!r}")
    return label


def _number(text: Optional[str], where: str, name: str, kind=float):
    try:
        return kind(str(text).strip())
    except (TypeError, ValueError):
        raise AnnotationParseError(f"{where}: malformed {name} {text!r}") from None


def parse_csv_annotations(source: str | Path | io.TextIOBase, schema: CsvSchema = CsvSchema()) -> list[AnomalyRecord]:
    """Parse a MAWILab-style CSV listing into anomalies with window-less filters.

    Records come out in order of first appearance of their ``anomalyID``.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return _parse_csv(fh, str(source), schema)
    return _parse_csv(source, getattr(source, "name", "<csv>"), schema)


def _parse_csv(fh, name: str, schema: CsvSchema) -> list[AnomalyRecord]:
    reader = csv.DictReader(fh)
    header = reader.fieldnames
    if not header:
        raise AnnotationFormatError(f"{name}: missing header row")
    header = [h.strip() for h in header]
    reader.fieldnames = header
    missing = [c for c in schema.required() if c not in header]
    if missing:
        raise AnnotationFormatError(f"{name}: header lacks columns {', '.join(missing)}")
    has_proto = schema.protocol in header

    meta: dict[str, tuple] = {}
    filters: dict[str, list[AnomalyFilter]] = {}
    for row in reader:
        where = f"{name}:{reader.line_num}"
        aid = (row[schema.anomaly_id] or "").strip()
        if not aid:
            raise AnnotationParseError(f"{where}: empty anomaly id")
        label = _label(row[schema.label], where)
        m = (
            label,
            (row[schema.taxonomy] or "").strip(),
            _number(row[schema.heuristic], where, "heuristic", int),
            _number(row[schema.distance], where, "distance"),
            _number(row[schema.nb_detectors], where, "nbDetectors", int),
        )
        if aid in meta and meta[aid][0] != label:
            raise AnnotationParseError(f"{where}: anomaly {aid} relabelled {meta[aid][0]} -> {label}")
        meta.setdefault(aid, m)
        try:
            flt = AnomalyFilter(
                src_ip=_opt_ip(row[schema.src_ip], where),
                dst_ip=_opt_ip(row[schema.dst_ip], where),
                src_port=_opt_int(row[schema.src_port], where, "srcPort", 65535),
                dst_port=_opt_int(row[schema.dst_port], where, "dstPort", 65535),
                protocol=_opt_int(row[schema.protocol], where, "protocol", 255) if has_proto else None,
            )
        except ValidationError as exc:
            raise AnnotationParseError(f"{where}: {exc}") from None
        filters.setdefault(aid, []).append(flt)

    return [
        AnomalyRecord(aid, m[0], m[1], m[2], m[3], m[4], tuple(filters[aid]))
        for aid, m in meta.items()
    ]


# -- ADMD --------------------------------------------------------------------


@dataclass(frozen=True)
class AdmdSchema:
    anomaly: str = "anomaly"
    slice: str = "slice"
    filter: str = "filter"
    start: str = "from"
    stop: str = "to"
    id_attr: str = "id"
    label_attr: str = "type"
    taxonomy_attr: str = "taxonomy"
    heuristic_attr: str = "heuristic"
    distance_attr: str = "distance"
    detectors_attr: str = "nbDetectors"
    src_ip_attr: str = "src_ip"
    dst_ip_attr: str = "dst_ip"
    src_port_attr: str = "src_port"
    dst_port_attr: str = "dst_port"
    protocol_attr: str = "protocol"


def _time_us(el: Optional[ET.Element], where: str) -> Optional[int]:
    if el is None:
        return None
    sec = el.get("sec")
    if sec is None:
        raise AnnotationParseError(f"{where}: <{el.tag}> without sec attribute")
    try:
        return int(sec) * 1_000_000 + int(el.get("usec", "0"))
    except ValueError:
        raise AnnotationParseError(f"{where}: malformed time bound on <{el.tag}>") from None


def parse_admd(
    source: str | Path,
    schema: AdmdSchema = AdmdSchema(),
    warnings: Optional[Counter] = None,
) -> list[AnomalyRecord]:
    """Parse ADMD XML; every filter carries the window of its enclosing interval.

    Intervals lacking a ``from``/``to`` pair produce window-less filters and
    bump ``warnings["missing_window"]``.
    """
    name = str(source)
    try:
        root = ET.parse(source).getroot()
    except ET.ParseError as exc:
        line = exc.position[0] if exc.position else "?"
        raise AnnotationParseError(f"{name}: XML syntax error at line {line}: {exc}") from None
    if warnings is None:
        warnings = Counter()
    s = schema
    out = []
    for i, el in enumerate(root.iter(s.anomaly)):
        aid = el.get(s.id_attr) or f"admd-{i}"
        where = f"{name}: anomaly {aid}"
        label = _label(el.get(s.label_attr, ""), where)
        intervals = [el] + list(el.findall(s.slice))
        filters = []
        for block in intervals:
            start = _time_us(block.find(s.start), where)
            stop = _time_us(block.find(s.stop), where)
            flts = block.findall(s.filter)
            if not flts:
                continue
            if start is None or stop is None:
                window = None
                warnings["missing_window"] += 1
                logger.warning("%s: interval without time bounds, filters kept unwindowed", where)
            else:
                if start > stop:
                    raise ValidationError(f"{where}: from {start} > to {stop}")
                window = (start, stop)
            for f in flts:
                try:
                    filters.append(
                        AnomalyFilter(
                            src_ip=_opt_ip(f.get(s.src_ip_attr), where),
                            dst_ip=_opt_ip(f.get(s.dst_ip_attr), where),
                            src_port=_opt_int(f.get(s.src_port_attr), where, "src_port", 65535),
                            dst_port=_opt_int(f.get(s.dst_port_attr), where, "dst_port", 65535),
                            protocol=_opt_int(f.get(s.protocol_attr), where, "protocol", 255),
                            window=window,
                        )
                    )
                except ValidationError as exc:
                    raise AnnotationParseError(f"{where}: {exc}") from None
        if not filters:
            raise AnnotationParseError(f"{where}: no filters")
        out.append(
            AnomalyRecord(
                anomaly_id=aid,
                label=label,
                taxonomy=el.get(s.taxonomy_attr, ""),
                heuristic=_number(el.get(s.heuristic_attr, "-1"), where, "heuristic", int),
                distance=_number(el.get(s.distance_attr, "nan"), where, "distance"),
                nb_detectors=_number(el.get(s.detectors_attr, "0"), where, "nbDetectors", int),
                filters=tuple(filters),
            )
        )
    return out


# -- merge -------------------------------------------------------------------


def _combine_filters(filters: Iterable[AnomalyFilter]) -> tuple[AnomalyFilter, ...]:
    unique = set(filters)
    windowed = {f.expression for f in unique if f.window is not None}
    kept = [f for f in unique if f.window is not None or f.expression not in windowed]
    return tuple(sorted(kept, key=AnomalyFilter.sort_key))


def merge_annotations(
    csv_records: Sequence[AnomalyRecord],
    admd_records: Sequence[AnomalyRecord],
    date: Optional[dt.date] = None,
    source_files: Sequence[str] = (),
) -> DayAnnotations:
    """Unify CSV and ADMD anomalies of one day, keyed by anomaly id.

    Window-less filters that duplicate the expression of a windowed filter of
    the same anomaly are dropped. CSV metadata wins over ADMD metadata, except
    the label, where any disagreement is an error.
    """
    groups: dict[str, list[AnomalyRecord]] = {}
    for rec in list(csv_records) + list(admd_records):
        groups.setdefault(rec.anomaly_id, []).append(rec)
    merged = []
    for aid in sorted(groups):
        recs = groups[aid]
        labels = sorted({r.label for r in recs})
        if len(labels) > 1:
            raise AnnotationConflictError(f"anomaly {aid}: conflicting labels {' vs '.join(labels)}")
        base = recs[0]
        merged.append(replace(base, filters=_combine_filters(f for r in recs for f in r.filters)))
    return DayAnnotations(date=date, anomalies=tuple(merged), source_files=tuple(source_files))


def load_day_annotations(
    paths: Sequence[str | Path],
    date: Optional[dt.date] = None,
    csv_schema: CsvSchema = CsvSchema(),
    admd_schema: AdmdSchema = AdmdSchema(),
    warnings: Optional[Counter] = None,
) -> DayAnnotations:
    """Parse every annotation file of a day (by extension) and merge them."""
    csv_recs: list[AnomalyRecord] = []
    admd_recs: list[AnomalyRecord] = []
    for p in paths:
        p = Path(p)
        if p.suffix.lower() == ".xml":
            admd_recs.extend(parse_admd(p, admd_schema, warnings))
        elif p.suffix.lower() == ".csv":
            csv_recs.extend(parse_csv_annotations(p, csv_schema))
        else:
            raise AnnotationFormatError(f"{p}: unknown annotation file type")
    # several files of one kind may repeat an anomaly; fold them first
    csv_day = merge_annotations(csv_recs, [])
    admd_day = merge_annotations([], admd_recs)
    return merge_annotations(
        csv_day.anomalies, admd_day.anomalies, date=date, source_files=[Path(p).name for p in paths]
    )


# -- persistence ---------------------------------------------------------------

DAY_SCHEMA = pa.schema(
    [
        ("anomaly_id", pa.string()),
        ("label", pa.string()),
        ("taxonomy", pa.string()),
        ("heuristic", pa.int64()),
        ("distance", pa.float64()),
        ("nb_detectors", pa.int64()),
        ("src_ip", pa.string()),
        ("dst_ip", pa.string()),
        ("src_port", pa.int32()),
        ("dst_port", pa.int32()),
        ("protocol", pa.int16()),
        ("window_start_us", pa.int64()),
        ("window_stop_us", pa.int64()),
    ]
)


def day_to_table(day: DayAnnotations) -> pa.Table:
    cols: dict[str, list] = {name: [] for name in DAY_SCHEMA.names}
    for a in day.anomalies:
        for f in a.filters:
            for name, val in (
                ("anomaly_id", a.anomaly_id), ("label", a.label), ("taxonomy", a.taxonomy),
                ("heuristic", a.heuristic), ("distance", a.distance), ("nb_detectors", a.nb_detectors),
                ("src_ip", f.src_ip), ("dst_ip", f.dst_ip), ("src_port", f.src_port),
                ("dst_port", f.dst_port), ("protocol", f.protocol),
                ("window_start_us", f.window[0] if f.window else None),
                ("window_stop_us", f.window[1] if f.window else None),
            ):
                cols[name].append(val)
    meta = {
        b"date": (day.date.isoformat() if day.date else "").encode(),
        b"source_files": "\n".join(day.source_files).encode(),
    }
    return pa.table(cols, schema=DAY_SCHEMA.with_metadata(meta))


def table_to_day(table: pa.Table) -> DayAnnotations:
    meta = table.schema.metadata or {}
    date_text = meta.get(b"date", b"").decode()
    sources = tuple(s for s in meta.get(b"source_files", b"").decode().split("\n") if s)
    rows = table.to_pylist()
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["anomaly_id"], []).append(r)
    anomalies = []
    for aid, rs in groups.items():
        r0 = rs[0]
        filters = tuple(
            AnomalyFilter(
                r["src_ip"], r["dst_ip"], r["src_port"], r["dst_port"], r["protocol"],
                None if r["window_start_us"] is None else (r["window_start_us"], r["window_stop_us"]),
            )
            for r in rs
        )
        anomalies.append(
            AnomalyRecord(aid, r0["label"], r0["taxonomy"], r0["heuristic"], r0["distance"], r0["nb_detectors"], filters)
        )
    return DayAnnotations(
        date=dt.date.fromisoformat(date_text) if date_text else None,
        anomalies=tuple(anomalies),
        source_files=sources,
    )


def write_day_annotations(day: DayAnnotations, path: str | Path) -> None:
    pq.write_table(day_to_table(day), path)


def read_day_annotations(path: str | Path) -> DayAnnotations:
    return table_to_day(pq.read_table(path))
