"""Bidirectional flow assembly and CICFlowMeter-style flow features.

Lengths are payload bytes (IP datagram minus IP and transport headers), as
in CICFlowMeter; header length is IP plus transport header bytes. All time
arithmetic is in integer microseconds.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from .capture import ACK, FIN, NON_IP, PSH, RST, TCP, URG, PacketRecord
from .errors import ReorderError

logger = logging.getLogger(__name__)

FLOW_TIMEOUT_US = 120_000_000
ACTIVITY_TIMEOUT_US = 5_000_000
# an inter-arrival gap above this starts a new subflow
SUBFLOW_GAP_US = 1_000_000
# a bulk is >= BULK_MIN_PACKETS payload packets in one direction, gaps <= BULK_GAP_US
BULK_MIN_PACKETS = 4
BULK_GAP_US = 1_000_000

ID_COLUMNS = ["Flow ID", "Src IP", "Src Port", "Dst IP", "Dst Port", "Protocol", "Timestamp"]

FEATURE_COLUMNS = [
    "Flow Duration",
    "Total Fwd Packet",
    "Total Bwd packets",
    "Total Length of Fwd Packet",
    "Total Length of Bwd Packet",
    "Fwd Packet Length Max",
    "Fwd Packet Length Min",
    "Fwd Packet Length Mean",
    "Fwd Packet Length Std",
    "Bwd Packet Length Max",
    "Bwd Packet Length Min",
    "Bwd Packet Length Mean",
    "Bwd Packet Length Std",
    "Flow Bytes/s",
    "Flow Packets/s",
    "Flow IAT Mean",
    "Flow IAT Std",
    "Flow IAT Max",
    "Flow IAT Min",
    "Fwd IAT Total",
    "Fwd IAT Mean",
    "Fwd IAT Std",
    "Fwd IAT Max",
    "Fwd IAT Min",
    "Bwd IAT Total",
    "Bwd IAT Mean",
    "Bwd IAT Std",
    "Bwd IAT Max",
    "Bwd IAT Min",
    "Fwd PSH Flags",
    "Bwd PSH Flags",
    "Fwd URG Flags",
    "Bwd URG Flags",
    "Fwd Header Length",
    "Bwd Header Length",
    "Fwd Packets/s",
    "Bwd Packets/s",
    "Packet Length Min",
    "Packet Length Max",
    "Packet Length Mean",
    "Packet Length Std",
    "Packet Length Variance",
    "FIN Flag Count",
    "SYN Flag Count",
    "RST Flag Count",
    "PSH Flag Count",
    "ACK Flag Count",
    "URG Flag Count",
    "CWR Flag Count",
    "ECE Flag Count",
    "Down/Up Ratio",
    "Average Packet Size",
    "Fwd Segment Size Avg",
    "Bwd Segment Size Avg",
    "Fwd Bytes/Bulk Avg",
    "Fwd Packet/Bulk Avg",
    "Fwd Bulk Rate Avg",
    "Bwd Bytes/Bulk Avg",
    "Bwd Packet/Bulk Avg",
    "Bwd Bulk Rate Avg",
    "Subflow Fwd Packets",
    "Subflow Fwd Bytes",
    "Subflow Bwd Packets",
    "Subflow Bwd Bytes",
    "FWD Init Win Bytes",
    "Bwd Init Win Bytes",
    "Fwd Act Data Pkts",
    "Fwd Seg Size Min",
    "Active Mean",
    "Active Std",
    "Active Max",
    "Active Min",
    "Idle Mean",
    "Idle Std",
    "Idle Max",
    "Idle Min",
]

LABEL_COLUMN = "Label"


def emit_schema() -> list[str]:
    """Output column names in order."""
    return ID_COLUMNS + FEATURE_COLUMNS + [LABEL_COLUMN]


class RunningStats:
    """Exact min/max/mean/sample-std over an integer series.

    Sum and sum of squares are kept as Python ints, so the variance numerator
    is exact and only the final division rounds.
    """

    __slots__ = ("n", "total", "sq", "lo", "hi")

    def __init__(self):
        self.n = 0
        self.total = 0
        self.sq = 0
        self.lo = 0
        self.hi = 0

    def add(self, x: int) -> None:
        if self.n == 0:
            self.lo = self.hi = x
        elif x < self.lo:
            self.lo = x
        elif x > self.hi:
            self.hi = x
        self.n += 1
        self.total += x
        self.sq += x * x

    @property
    def mean(self) -> float:
        return self.total / self.n if self.n else 0.0

    @property
    def variance(self) -> float:
        n = self.n
        if n < 2:
            return 0.0
        return (n * self.sq - self.total * self.total) / (n * (n - 1))

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def summary(self) -> tuple:
        if self.n == 0:
            return (0, 0, 0.0, 0.0)
        return (self.lo, self.hi, self.mean, self.std)


def running_stats(values: Iterable[int]) -> tuple:
    """(min, max, mean, sample std) of ``values``; all zero when empty."""
    s = RunningStats()
    for v in values:
        s.add(v)
    return s.summary()


def flow_key(p: PacketRecord) -> tuple:
    """Orientation-insensitive lookup key."""
    a = (p.src_ip, p.src_port)
    b = (p.dst_ip, p.dst_port)
    return (a, b, p.protocol) if a <= b else (b, a, p.protocol)


class _Bulk:
    __slots__ = ("run_n", "run_bytes", "run_start", "run_last", "count", "packets", "bytes", "duration")

    def __init__(self):
        self.run_n = 0
        self.run_bytes = 0
        self.run_start = 0
        self.run_last = 0
        self.count = 0
        self.packets = 0
        self.bytes = 0
        self.duration = 0

    def add(self, ts: int, size: int) -> None:
        if self.run_n and ts - self.run_last > BULK_GAP_US:
            self.run_n = 0
        if self.run_n == 0:
            self.run_n, self.run_bytes, self.run_start, self.run_last = 1, size, ts, ts
            return
        self.run_n += 1
        self.run_bytes += size
        if self.run_n == BULK_MIN_PACKETS:
            self.count += 1
            self.packets += self.run_n
            self.bytes += self.run_bytes
            self.duration += ts - self.run_start
        elif self.run_n > BULK_MIN_PACKETS:
            self.packets += 1
            self.bytes += size
            self.duration += ts - self.run_last
        self.run_last = ts

    def features(self) -> tuple[float, float, float]:
        if self.count == 0:
            return (0.0, 0.0, 0.0)
        rate = self.bytes / (self.duration / 1e6) if self.duration > 0 else 0.0
        return (self.bytes / self.count, self.packets / self.count, rate)


class FlowAccumulator:
    """Running state of one open flow."""

    def __init__(self, p: PacketRecord, activity_timeout_us: int = ACTIVITY_TIMEOUT_US):
        self.src_ip, self.dst_ip = p.src_ip, p.dst_ip
        self.src_port, self.dst_port = p.src_port, p.dst_port
        self.protocol = p.protocol
        self.activity_timeout = activity_timeout_us
        self.first_ts = self.last_ts = p.ts_us
        self.fwd_len = RunningStats()
        self.bwd_len = RunningStats()
        self.all_len = RunningStats()
        self.flow_iat = RunningStats()
        self.fwd_iat = RunningStats()
        self.bwd_iat = RunningStats()
        self.active = RunningStats()
        self.idle = RunningStats()
        self.fwd_last = self.bwd_last = None
        self.flag_counts = [0] * 8  # bit order FIN..CWR
        self.fwd_psh = self.bwd_psh = self.fwd_urg = self.bwd_urg = 0
        self.fwd_hdr = self.bwd_hdr = 0
        self.fwd_seg_min: Optional[int] = None
        self.fwd_act_data = 0
        self.fwd_init_win = 0
        self.bwd_init_win: Optional[int] = None
        self.fwd_bulk = _Bulk()
        self.bwd_bulk = _Bulk()
        self.subflows = 1
        self.seg_start = p.ts_us
        self.fin_fwd = self.fin_bwd = False
        self.closed_by: Optional[str] = None
        self.fwd_init_win = p.tcp_window or 0
        self._add(p, True, p.ts_us)

    def is_forward(self, p: PacketRecord) -> bool:
        return p.src_ip == self.src_ip and p.src_port == self.src_port and (
            p.dst_ip == self.dst_ip and p.dst_port == self.dst_port
        )

    def add(self, p: PacketRecord) -> None:
        # timestamps inside the reorder slack never move the clock backwards
        ts = p.ts_us if p.ts_us > self.last_ts else self.last_ts
        gap = ts - self.last_ts
        self.flow_iat.add(gap)
        if gap > SUBFLOW_GAP_US:
            self.subflows += 1
        if gap > self.activity_timeout:
            self.active.add(self.last_ts - self.seg_start)
            self.idle.add(gap)
            self.seg_start = ts
        self.last_ts = ts
        self._add(p, self.is_forward(p), ts)

    def _add(self, p: PacketRecord, forward: bool, ts: int) -> None:
        size = p.payload_len
        hdr = p.ip_header_len + p.transport_header_len
        self.all_len.add(size)
        flags = p.tcp_flags or 0
        if flags:
            fc = self.flag_counts
            for bit in range(8):
                if flags >> bit & 1:
                    fc[bit] += 1
        if forward:
            self.fwd_len.add(size)
            self.fwd_hdr += hdr
            if self.fwd_last is not None:
                self.fwd_iat.add(ts - self.fwd_last)
            self.fwd_last = ts
            if size >= 1:
                self.fwd_act_data += 1
            if self.fwd_seg_min is None or hdr < self.fwd_seg_min:
                self.fwd_seg_min = hdr
            if flags & PSH:
                self.fwd_psh += 1
            if flags & URG:
                self.fwd_urg += 1
            if flags & FIN:
                self.fin_fwd = True
            if size > 0:
                self.fwd_bulk.add(ts, size)
                self.bwd_bulk.run_n = 0
        else:
            self.bwd_len.add(size)
            self.bwd_hdr += hdr
            if self.bwd_last is not None:
                self.bwd_iat.add(ts - self.bwd_last)
            self.bwd_last = ts
            if self.bwd_init_win is None:
                self.bwd_init_win = p.tcp_window or 0
            if flags & PSH:
                self.bwd_psh += 1
            if flags & URG:
                self.bwd_urg += 1
            if flags & FIN:
                self.fin_bwd = True
            if size > 0:
                self.bwd_bulk.add(ts, size)
                self.fwd_bulk.run_n = 0

    @property
    def packets(self) -> int:
        return self.fwd_len.n + self.bwd_len.n


def _rate(count: float, duration_us: int) -> float:
    return count / (duration_us / 1e6) if duration_us > 0 else 0.0


def format_timestamp(ts_us: int) -> str:
    """UTC, microsecond precision, fixed width so text order is time order."""
    sec, usec = divmod(ts_us, 1_000_000)
    return dt.datetime.fromtimestamp(sec, dt.timezone.utc).strftime("%Y-%m-%d %H:%M:%S") + f".{usec:06d}"


def compute_features(acc: FlowAccumulator) -> dict:
    """Feature row of a (closed) flow, keyed by column name in schema order."""
    duration = acc.last_ts - acc.first_ts
    fwd_n, bwd_n = acc.fwd_len.n, acc.bwd_len.n
    total_n = fwd_n + bwd_n
    fwd_bytes, bwd_bytes = acc.fwd_len.total, acc.bwd_len.total
    f_min, f_max, f_mean, f_std = acc.fwd_len.summary()
    b_min, b_max, b_mean, b_std = acc.bwd_len.summary()
    fi_min, fi_max, fi_mean, fi_std = acc.flow_iat.summary()
    wi_min, wi_max, wi_mean, wi_std = acc.fwd_iat.summary()
    bi_min, bi_max, bi_mean, bi_std = acc.bwd_iat.summary()
    p_min, p_max, p_mean, _ = acc.all_len.summary()
    active = RunningStats()
    active.n, active.total, active.sq = acc.active.n, acc.active.total, acc.active.sq
    active.lo, active.hi = acc.active.lo, acc.active.hi
    active.add(acc.last_ts - acc.seg_start)
    a_min, a_max, a_mean, a_std = active.summary()
    i_min, i_max, i_mean, i_std = acc.idle.summary()
    fb = acc.fwd_bulk.features()
    bb = acc.bwd_bulk.features()
    fc = acc.flag_counts
    sub = acc.subflows
    proto = acc.protocol
    flow_id = f"{acc.src_ip}-{acc.dst_ip}-{acc.src_port}-{acc.dst_port}-{proto}"
    values = [
        flow_id, acc.src_ip, acc.src_port, acc.dst_ip, acc.dst_port, proto, format_timestamp(acc.first_ts),
        duration,
        fwd_n, bwd_n, fwd_bytes, bwd_bytes,
        f_max, f_min, f_mean, f_std,
        b_max, b_min, b_mean, b_std,
        _rate(fwd_bytes + bwd_bytes, duration), _rate(total_n, duration),
        fi_mean, fi_std, fi_max, fi_min,
        acc.fwd_iat.total, wi_mean, wi_std, wi_max, wi_min,
        acc.bwd_iat.total, bi_mean, bi_std, bi_max, bi_min,
        acc.fwd_psh, acc.bwd_psh, acc.fwd_urg, acc.bwd_urg,
        acc.fwd_hdr, acc.bwd_hdr,
        _rate(fwd_n, duration), _rate(bwd_n, duration),
        p_min, p_max, p_mean, acc.all_len.std, acc.all_len.variance,
        fc[0], fc[1], fc[2], fc[3], fc[4], fc[5], fc[7], fc[6],
        bwd_n / fwd_n if fwd_n else 0.0,
        (fwd_bytes + bwd_bytes) / total_n,
        fwd_bytes / fwd_n if fwd_n else 0.0,
        bwd_bytes / bwd_n if bwd_n else 0.0,
        fb[0], fb[1], fb[2], bb[0], bb[1], bb[2],
        fwd_n / sub, fwd_bytes / sub, bwd_n / sub, bwd_bytes / sub,
        acc.fwd_init_win if proto == TCP else 0,
        (acc.bwd_init_win or 0) if proto == TCP else 0,
        acc.fwd_act_data, acc.fwd_seg_min or 0,
        a_mean, a_std, a_max, a_min,
        i_mean, i_std, i_max, i_min,
        "",
    ]
    return dict(zip(_SCHEMA, values))


_SCHEMA = emit_schema()
assert len(_SCHEMA) == 84


@dataclass
class AssemblyStats:
    packets: int = 0
    skipped_non_ip: int = 0
    flows: int = 0
    closed_by_fin: int = 0
    closed_by_rst: int = 0
    closed_by_timeout: int = 0
    closed_at_end: int = 0


class FlowAssembler:
    """Incremental flow table; feed time-ordered packets, collect closed flows.

    A packet joins the open flow with the same orientation-insensitive key
    unless more than ``flow_timeout_us`` has passed since that flow's first
    packet, in which case the old flow is closed and the packet starts a new
    one. TCP flows close after an RST, or once both sides have sent FIN and
    the final ACK arrives.
    """

    def __init__(
        self,
        flow_timeout_us: int = FLOW_TIMEOUT_US,
        activity_timeout_us: int = ACTIVITY_TIMEOUT_US,
        reorder_slack_us: int = 0,
    ):
        self.flow_timeout = flow_timeout_us
        self.activity_timeout = activity_timeout_us
        self.reorder_slack = reorder_slack_us
        self.flows: dict[tuple, FlowAccumulator] = {}
        self.stats = AssemblyStats()
        self._clock: Optional[int] = None
        self._index = 0

    def _expire(self, now: int, out: list) -> None:
        flows = self.flows
        timeout = self.flow_timeout
        while flows:
            key = next(iter(flows))
            acc = flows[key]
            if now - acc.first_ts <= timeout:
                break
            del flows[key]
            acc.closed_by = "timeout"
            self.stats.closed_by_timeout += 1
            out.append(acc)

    def add(self, p: PacketRecord) -> list[FlowAccumulator]:
        """Process one packet; return flows closed as a consequence, in closing order."""
        idx = self._index
        self._index += 1
        if p.protocol == NON_IP:
            self.stats.skipped_non_ip += 1
            return []
        ts = p.ts_us
        if self._clock is None or ts > self._clock:
            self._clock = ts
        elif ts < self._clock - self.reorder_slack:
            raise ReorderError(
                f"packet {idx} at {ts} precedes stream time {self._clock} by more than {self.reorder_slack} us",
                idx,
            )
        self.stats.packets += 1
        closed: list[FlowAccumulator] = []
        self._expire(self._clock, closed)
        key = flow_key(p)
        acc = self.flows.get(key)
        if acc is not None and ts - acc.first_ts > self.flow_timeout:
            del self.flows[key]
            acc.closed_by = "timeout"
            self.stats.closed_by_timeout += 1
            closed.append(acc)
            acc = None
        if acc is None:
            acc = FlowAccumulator(p, self.activity_timeout)
            self.flows[key] = acc
            self.stats.flows += 1
            finishing = False
        else:
            finishing = acc.fin_fwd and acc.fin_bwd
            acc.add(p)
        if p.protocol == TCP:
            flags = p.tcp_flags or 0
            if flags & RST:
                acc.closed_by = "rst"
                self.stats.closed_by_rst += 1
            elif finishing and flags & ACK and not flags & FIN:
                acc.closed_by = "fin"
                self.stats.closed_by_fin += 1
            if acc.closed_by is not None:
                del self.flows[key]
                closed.append(acc)
        return closed

    def flush(self) -> list[FlowAccumulator]:
        """Close every remaining flow, oldest first."""
        out = list(self.flows.values())
        for acc in out:
            acc.closed_by = "end"
        self.stats.closed_at_end += len(out)
        self.flows.clear()
        return out


def assemble_flows(
    packets: Iterable[PacketRecord],
    flow_timeout_us: int = FLOW_TIMEOUT_US,
    activity_timeout_us: int = ACTIVITY_TIMEOUT_US,
    reorder_slack_us: int = 0,
    stats: Optional[AssemblyStats] = None,
) -> Iterator[dict]:
    """Yield one feature row per flow, in closing order."""
    asm = FlowAssembler(flow_timeout_us, activity_timeout_us, reorder_slack_us)
    for p in packets:
        for acc in asm.add(p):
            yield compute_features(acc)
    for acc in asm.flush():
        yield compute_features(acc)
    if stats is not None:
        for name, value in vars(asm.stats).items():
            setattr(stats, name, value)


STRING_COLUMNS = {"Flow ID", "Src IP", "Dst IP", "Timestamp", LABEL_COLUMN}
INT_COLUMNS = {
    "Src Port", "Dst Port", "Protocol", "Flow Duration",
    "Total Fwd Packet", "Total Bwd packets", "Total Length of Fwd Packet", "Total Length of Bwd Packet",
    "Fwd Packet Length Max", "Fwd Packet Length Min", "Bwd Packet Length Max", "Bwd Packet Length Min",
    "Flow IAT Max", "Flow IAT Min", "Fwd IAT Total", "Fwd IAT Max", "Fwd IAT Min",
    "Bwd IAT Total", "Bwd IAT Max", "Bwd IAT Min",
    "Fwd PSH Flags", "Bwd PSH Flags", "Fwd URG Flags", "Bwd URG Flags",
    "Fwd Header Length", "Bwd Header Length", "Packet Length Min", "Packet Length Max",
    "FIN Flag Count", "SYN Flag Count", "RST Flag Count", "PSH Flag Count",
    "ACK Flag Count", "URG Flag Count", "CWR Flag Count", "ECE Flag Count",
    "FWD Init Win Bytes", "Bwd Init Win Bytes", "Fwd Act Data Pkts", "Fwd Seg Size Min",
    "Active Max", "Active Min", "Idle Max", "Idle Min",
}


def column_dtype(name: str) -> str:
    if name in STRING_COLUMNS:
        return "object"
    return "int64" if name in INT_COLUMNS else "float64"


def flows_frame(rows: Iterable[dict], extra: Optional[list[str]] = None):
    """DataFrame with schema column order and fixed dtypes (also when empty)."""
    import pandas as pd

    columns = emit_schema() + list(extra or [])
    df = pd.DataFrame.from_records(list(rows), columns=columns)
    for name in emit_schema():
        df[name] = df[name].astype(column_dtype(name))
    return df


def write_flows_csv(df, path) -> None:
    df.to_csv(path, index=False, lineterminator="\n")


def read_flows_csv(path):
    import pandas as pd

    dtypes = {n: column_dtype(n) for n in emit_schema()}
    numeric = [n for n, t in dtypes.items() if t != "object"]
    dtypes = {n: (str if t == "object" else t) for n, t in dtypes.items()}
    return pd.read_csv(path, dtype=dtypes, float_precision="round_trip", keep_default_na=False, na_values={n: [""] for n in numeric})


def flows_from_capture(
    path,
    flow_timeout_us: int = FLOW_TIMEOUT_US,
    activity_timeout_us: int = ACTIVITY_TIMEOUT_US,
    reorder_slack_us: int = 0,
    stats: Optional[AssemblyStats] = None,
):
    from .capture import read_capture

    return flows_frame(
        assemble_flows(read_capture(path), flow_timeout_us, activity_timeout_us, reorder_slack_us, stats)
    )
