"""Route each packet of a day capture to exactly one partition.

A packet goes to the anomaly whose filter it matches, or to the benign
partition when nothing matches. When several anomalies match, the label
precedence anomalous > suspicious > notice decides, then the smallest
anomaly id.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from operator import itemgetter
from pathlib import Path
from typing import Callable, Iterable, Optional, Union
from urllib.parse import quote, unquote

import pyarrow as pa
import pyarrow.parquet as pq

from .annotations import LABEL_RANK, AnomalyFilter, DayAnnotations
from .capture import NON_IP, CaptureReader, CaptureWriter, PacketRecord

logger = logging.getLogger(__name__)

# PacketRecord tuple positions of the five matchable fields, in filter order
_FIELD_POS = (1, 2, 3, 4, 5)
BENIGN_NAME = "benign"
ANOMALY_PREFIX = "anomaly_"


@dataclass(frozen=True, order=True)
class PartitionId:
    """``anomaly_id`` is None for the benign partition."""

    anomaly_id: Optional[str] = None

    @property
    def is_benign(self) -> bool:
        return self.anomaly_id is None

    @property
    def stem(self) -> str:
        """File-name stem; reversible through ``from_stem``."""
        if self.anomaly_id is None:
            return BENIGN_NAME
        return ANOMALY_PREFIX + quote(self.anomaly_id, safe="")

    @classmethod
    def from_stem(cls, stem: str) -> "PartitionId":
        if stem == BENIGN_NAME:
            return BENIGN
        if not stem.startswith(ANOMALY_PREFIX):
            raise ValueError(f"not a partition file stem: {stem!r}")
        return cls(unquote(stem[len(ANOMALY_PREFIX):]))

    def __str__(self) -> str:
        return BENIGN_NAME if self.anomaly_id is None else self.anomaly_id


BENIGN = PartitionId()


def matches(p: PacketRecord, f: AnomalyFilter) -> bool:
    """Literal-direction match: every present filter field equals the packet's,
    and the timestamp lies in the (inclusive) window if there is one."""
    if f.src_ip is not None and f.src_ip != p.src_ip:
        return False
    if f.dst_ip is not None and f.dst_ip != p.dst_ip:
        return False
    if f.src_port is not None and f.src_port != p.src_port:
        return False
    if f.dst_port is not None and f.dst_port != p.dst_port:
        return False
    if f.protocol is not None and f.protocol != p.protocol:
        return False
    if f.window is not None and not f.window[0] <= p.ts_us <= f.window[1]:
        return False
    return True


def _swapped(p: PacketRecord) -> tuple:
    return (None, p.dst_ip, p.src_ip, p.dst_port, p.src_port, p.protocol)


class FilterIndex:
    """Hash index over all filters of a day.

    Filters are grouped by which of the five fields they specify; each group
    is a dict keyed by the specified values, so a lookup costs one probe per
    distinct field combination instead of one comparison per filter.
    """

    def __init__(self, day: DayAnnotations, symmetric: bool = False):
        self.symmetric = symmetric
        groups: dict[tuple[int, ...], dict] = {}
        for a in day.anomalies:
            prio = (LABEL_RANK[a.label], a.anomaly_id)
            for f in a.filters:
                expr = f.expression
                positions = tuple(pos for pos, v in zip(_FIELD_POS, expr) if v is not None)
                key = tuple(v for v in expr if v is not None)
                groups.setdefault(positions, {}).setdefault(key, []).append((prio, f.window))
        # itemgetter with one index returns a scalar; wrap so keys are always tuples
        self._tables: list[tuple[Callable, dict]] = []
        for positions, table in sorted(groups.items()):
            if len(positions) == 1:
                pos = positions[0]
                getter = (lambda p, _i=pos: (p[_i],))
            else:
                getter = itemgetter(*positions)
            self._tables.append((getter, table))

    def _collect(self, view: tuple, ts: int, hits: set) -> None:
        for getter, table in self._tables:
            entries = table.get(getter(view))
            if entries:
                for prio, window in entries:
                    if window is None or window[0] <= ts <= window[1]:
                        hits.add(prio)

    def matching(self, p: PacketRecord) -> set[tuple[int, str]]:
        """(label rank, anomaly id) of every anomaly with a matching filter."""
        hits: set = set()
        if p.protocol == NON_IP or not self._tables:
            return hits
        self._collect(p, p.ts_us, hits)
        if self.symmetric:
            self._collect(_swapped(p), p.ts_us, hits)
        return hits

    def route(self, p: PacketRecord) -> tuple[PartitionId, int]:
        """Winning partition and the number of distinct anomalies that matched."""
        hits = self.matching(p)
        if not hits:
            return BENIGN, 0
        return PartitionId(min(hits)[1]), len(hits)


def route_packet(p: PacketRecord, day: Union[DayAnnotations, FilterIndex], symmetric: bool = False) -> PartitionId:
    index = day if isinstance(day, FilterIndex) else FilterIndex(day, symmetric)
    return index.route(p)[0]


@dataclass
class SplitReport:
    total: int = 0
    multi_match: int = 0
    non_ip: int = 0
    benign: int = 0
    anomalies: dict[str, int] = field(default_factory=dict)

    def count(self, pid: PartitionId) -> int:
        return self.benign if pid.is_benign else self.anomalies.get(pid.anomaly_id, 0)

    def partitions(self) -> list[PartitionId]:
        """Non-empty partitions, benign first then by anomaly id."""
        out = [BENIGN] if self.benign else []
        return out + [PartitionId(a) for a in sorted(self.anomalies)]

    def consistent(self) -> bool:
        return self.benign + sum(self.anomalies.values()) == self.total

    def to_json(self) -> str:
        body = {
            "total": self.total,
            "multi_match": self.multi_match,
            "non_ip": self.non_ip,
            "partitions": {"benign": self.benign, "anomalies": dict(sorted(self.anomalies.items()))},
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitReport":
        d = json.loads(text)
        return cls(
            total=d["total"],
            multi_match=d["multi_match"],
            non_ip=d["non_ip"],
            benign=d["partitions"]["benign"],
            anomalies=dict(d["partitions"]["anomalies"]),
        )


def split_records(
    records: Iterable[PacketRecord],
    day: DayAnnotations,
    emit: Callable[[PartitionId, PacketRecord], None],
    symmetric: bool = False,
) -> SplitReport:
    """Single pass over ``records`` calling ``emit`` once per packet."""
    index = FilterIndex(day, symmetric)
    report = SplitReport()
    counts: dict[Optional[str], int] = {}
    route = index.route
    total = multi = non_ip = 0
    for p in records:
        total += 1
        if p.protocol == NON_IP:
            non_ip += 1
        pid, n = route(p)
        if n > 1:
            multi += 1
        counts[pid.anomaly_id] = counts.get(pid.anomaly_id, 0) + 1
        emit(pid, p)
    report.total, report.multi_match, report.non_ip = total, multi, non_ip
    report.benign = counts.pop(None, 0)
    report.anomalies = dict(sorted(counts.items()))
    return report


class _PartitionSinks:
    """Lazily opened pcap writers, at most ``max_open`` file handles at once."""

    def __init__(self, directory: Path, link_type: int, max_open: int = 128):
        self.directory = directory
        self.link_type = link_type
        self.max_open = max_open
        self._open: dict[PartitionId, tuple] = {}
        self._started: set[PartitionId] = set()

    def write(self, pid: PartitionId, rec: PacketRecord) -> None:
        entry = self._open.get(pid)
        if entry is None:
            if len(self._open) >= self.max_open:
                victim = next(iter(self._open))
                self._open.pop(victim)[0].close()
            path = self.directory / f"{pid.stem}.pcap"
            resume = pid in self._started
            fh = open(path, "ab" if resume else "wb")
            entry = self._open[pid] = (fh, CaptureWriter(fh, self.link_type, header=not resume))
            self._started.add(pid)
        entry[1].write(rec)

    def close(self) -> None:
        for fh, _ in self._open.values():
            fh.close()
        self._open.clear()


_META_FIELDS = [
    ("ts_us", pa.int64()),
    ("src_ip", pa.string()),
    ("dst_ip", pa.string()),
    ("src_port", pa.int32()),
    ("dst_port", pa.int32()),
    ("protocol", pa.int16()),
    ("ip_header_len", pa.int32()),
    ("transport_header_len", pa.int32()),
    ("payload_len", pa.int64()),
    ("wire_len", pa.int64()),
    ("tcp_flags", pa.int16()),
    ("tcp_window", pa.int32()),
]
PACKET_META_SCHEMA = pa.schema(_META_FIELDS + [("partition", pa.string())])


class _MetadataWriter:
    """Batched parquet writer for the per-packet metadata byproduct."""

    def __init__(self, path: Path, batch: int = 65536):
        self._writer = pq.ParquetWriter(path, PACKET_META_SCHEMA)
        self._batch = batch
        self._rows: list[tuple] = []

    def add(self, pid: PartitionId, rec: PacketRecord) -> None:
        self._rows.append(rec[:12] + (str(pid),))
        if len(self._rows) >= self._batch:
            self.flush()

    def flush(self) -> None:
        if not self._rows:
            return
        cols = list(zip(*self._rows))
        self._writer.write_table(
            pa.table({name: list(col) for name, col in zip(PACKET_META_SCHEMA.names, cols)}, schema=PACKET_META_SCHEMA)
        )
        self._rows = []

    def close(self) -> None:
        self.flush()
        self._writer.close()


REPORT_NAME = "split_report.json"
METADATA_NAME = "packets.parquet"


def split_capture(
    capture: str | Path,
    day: DayAnnotations,
    out_dir: str | Path,
    symmetric: bool = False,
    write_metadata: bool = True,
) -> SplitReport:
    """Split ``capture`` into ``<out_dir>/<partition>.pcap`` files.

    Also writes ``split_report.json`` and (optionally) the packet metadata
    table. Everything is produced in a scratch directory and moved into place
    only on success, replacing any previous ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        reader = CaptureReader(capture)
        it = iter(reader)
        first = next(it, None)
        sinks = _PartitionSinks(scratch, reader.link_type)
        meta = _MetadataWriter(scratch / METADATA_NAME) if write_metadata else None

        def emit(pid: PartitionId, rec: PacketRecord) -> None:
            sinks.write(pid, rec)
            if meta is not None:
                meta.add(pid, rec)

        def stream():
            if first is not None:
                yield first
                yield from it

        try:
            report = split_records(stream(), day, emit, symmetric)
        finally:
            sinks.close()
            if meta is not None:
                meta.close()
        (scratch / REPORT_NAME).write_text(report.to_json())
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(scratch, out_dir)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    logger.info(
        "split %s: %d packets, %d benign, %d anomaly partitions, %d multi-match",
        capture, report.total, report.benign, len(report.anomalies), report.multi_match,
    )
    return report


def partition_files(split_dir: str | Path) -> list[tuple[PartitionId, Path]]:
    """Partition pcaps in a split directory, benign first then by anomaly id."""
    out = []
    for p in Path(split_dir).glob("*.pcap"):
        out.append((PartitionId.from_stem(p.stem), p))
    return sorted(out, key=lambda t: (not t[0].is_benign, t[0].anomaly_id or ""))
