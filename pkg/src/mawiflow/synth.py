"""Synthetic traffic and annotation generators for tests, demos and benchmarks."""

from __future__ import annotations

import datetime as dt
import random
import socket
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import quoteattr

from .capture import LINKTYPE_ETHERNET, TCP, UDP, PacketRecord, dissect, write_capture

_ETH_SRC = bytes.fromhex("020000000001")
_ETH_DST = bytes.fromhex("020000000002")


def _checksum_free_ipv4(src: str, dst: str, proto: int, l4: bytes, ident: int = 0) -> bytes:
    total = 20 + len(l4)
    return (
        struct.pack(
            "!BBHHHBBH4s4s",
            0x45,
            0,
            total,
            ident & 0xFFFF,
            0,
            64,
            proto,
            0,
            socket.inet_aton(src),
            socket.inet_aton(dst),
        )
        + l4
    )


def _ipv6(src: str, dst: str, proto: int, l4: bytes) -> bytes:
    return (
        struct.pack("!IHBB", 6 << 28, len(l4), proto, 64)
        + socket.inet_pton(socket.AF_INET6, src)
        + socket.inet_pton(socket.AF_INET6, dst)
        + l4
    )


def build_frame(
    src: str,
    dst: str,
    sport: int = 0,
    dport: int = 0,
    proto: int = UDP,
    payload_len: int = 0,
    flags: int = 0,
    window: int = 0,
    snap_payload: Optional[int] = None,
) -> bytes:
    """Ethernet frame carrying an IPv4/IPv6 TCP, UDP or bare-IP datagram.

    ``snap_payload`` limits how many payload bytes are physically included,
    imitating a snap-length truncated capture; header length fields still
    announce the full ``payload_len``.
    """
    body = bytes(payload_len)
    if proto == TCP:
        l4 = struct.pack("!HHIIBBHHH", sport, dport, 0, 0, 5 << 4, flags, window, 0, 0) + body
    elif proto == UDP:
        l4 = struct.pack("!HHHH", sport, dport, 8 + payload_len, 0) + body
    else:
        l4 = body
    if ":" in src:
        ip = _ipv6(src, dst, proto, l4)
        ethertype = 0x86DD
    else:
        ip = _checksum_free_ipv4(src, dst, proto, l4)
        ethertype = 0x0800
    frame = _ETH_DST + _ETH_SRC + struct.pack("!H", ethertype) + ip
    if snap_payload is not None and snap_payload < payload_len:
        frame = frame[: len(frame) - (payload_len - snap_payload)]
    return frame


def make_packet(
    ts_us: int,
    src: str,
    dst: str,
    sport: int = 0,
    dport: int = 0,
    proto: int = UDP,
    payload_len: int = 0,
    flags: int = 0,
    window: int = 0,
) -> PacketRecord:
    frame = build_frame(src, dst, sport, dport, proto, payload_len, flags, window)
    return dissect(frame, ts_us, len(frame), LINKTYPE_ETHERNET)


def arp_frame() -> bytes:
    return _ETH_DST + _ETH_SRC + struct.pack("!H", 0x0806) + bytes(28)


@dataclass(frozen=True)
class SynthAnomaly:
    anomaly_id: str
    label: str
    taxonomy: str
    heuristic: int
    distance: float
    nb_detectors: int
    # each filter: (src_ip, dst_ip, src_port, dst_port, protocol), None = wildcard
    filters: tuple[tuple, ...]
    window: Optional[tuple[int, int]]


def write_annotation_files(
    anomalies: Sequence[SynthAnomaly], csv_path: Path, admd_path: Path
) -> None:
    """Write anomalies in the canonical CSV and ADMD layouts.

    Every filter goes into the CSV; windowed anomalies are additionally
    written to the ADMD file with their time bounds.
    """
    lines = ["anomalyID,srcIP,srcPort,dstIP,dstPort,protocol,taxonomy,heuristic,distance,nbDetectors,label"]
    for a in anomalies:
        for src, dst, sport, dport, proto in a.filters:
            cells = [
                a.anomaly_id,
                src or "",
                "" if sport is None else str(sport),
                dst or "",
                "" if dport is None else str(dport),
                "" if proto is None else str(proto),
                a.taxonomy,
                str(a.heuristic),
                repr(a.distance),
                str(a.nb_detectors),
                a.label,
            ]
            lines.append(",".join(cells))
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    xml = ['<?xml version="1.0" encoding="UTF-8"?>', "<admd>"]
    for a in anomalies:
        if a.window is None:
            continue
        xml.append(
            f"  <anomaly id={quoteattr(a.anomaly_id)} type={quoteattr(a.label)} "
            f"taxonomy={quoteattr(a.taxonomy)} heuristic=\"{a.heuristic}\" "
            f"distance=\"{a.distance!r}\" nbDetectors=\"{a.nb_detectors}\">"
        )
        start, stop = a.window
        xml.append(f'    <from sec="{start // 1_000_000}" usec="{start % 1_000_000}"/>')
        xml.append(f'    <to sec="{stop // 1_000_000}" usec="{stop % 1_000_000}"/>')
        for src, dst, sport, dport, proto in a.filters:
            attrs = []
            for key, val in (("src_ip", src), ("src_port", sport), ("dst_ip", dst), ("dst_port", dport), ("protocol", proto)):
                if val is not None:
                    attrs.append(f'{key}="{val}"')
            xml.append(f"    <filter {' '.join(attrs)}/>")
        xml.append("  </anomaly>")
    xml.append("</admd>")
    admd_path.write_text("\n".join(xml) + "\n", encoding="utf-8")


_LABELS = ("anomalous", "suspicious", "notice")
_TAXONOMIES = ("ptmpHTTP", "alphfl", "ntscICec", "sntscSYN", "unknown")


def synth_day(
    rng: random.Random,
    day_start_us: int,
    n_packets: int,
    n_anomalies: int,
    n_hosts: int = 40,
    duration_s: int = 900,
) -> tuple[list[PacketRecord], list[SynthAnomaly]]:
    """Random 15-minute trace plus anomalies anchored on real conversations.

    Each anomaly takes the 5-tuple of a packet in the trace, masks out some
    fields, and (usually) restricts itself to a time window around it, so
    window exclusion actually happens on recurring tuples.
    """
    hosts = [f"10.{rng.randrange(4)}.{rng.randrange(256)}.{rng.randrange(1, 255)}" for _ in range(n_hosts)]
    ports = [53, 80, 443, 22, 123, 8080] + [rng.randrange(1024, 65536) for _ in range(10)]
    n_conv = max(1, n_packets // 8)
    convs = []
    for _ in range(n_conv):
        proto = rng.choice((TCP, TCP, UDP))
        convs.append((rng.choice(hosts), rng.choice(hosts), rng.choice(ports), rng.choice(ports), proto))
    span = duration_s * 1_000_000
    times = sorted(rng.randrange(span) for _ in range(n_packets))
    frame_cache: dict[tuple, bytes] = {}
    packets = []
    for ts in times:
        src, dst, sport, dport, proto = rng.choice(convs)
        if rng.random() < 0.4:
            src, dst, sport, dport = dst, src, dport, sport
        payload = rng.choice((0, 0, 40, 100, 512, 1460))
        flags = rng.choice((0x10, 0x18, 0x02, 0x12, 0x11)) if proto == TCP else 0
        key = (src, dst, sport, dport, proto, payload, flags)
        frame = frame_cache.get(key)
        if frame is None:
            frame = frame_cache[key] = build_frame(src, dst, sport, dport, proto, payload, flags, 1024 if proto == TCP else 0)
        packets.append(dissect(frame, day_start_us + ts, len(frame)))

    anomalies = []
    for i in range(n_anomalies):
        filters = []
        anchor_idx = rng.randrange(len(packets)) if packets else None
        window = None
        for _ in range(rng.choice((1, 1, 2))):
            if anchor_idx is None:
                tup = (rng.choice(hosts), rng.choice(hosts), rng.choice(ports), rng.choice(ports), TCP)
            else:
                tup = packets[rng.randrange(len(packets))].five_tuple if filters else packets[anchor_idx].five_tuple
            mask = rng.choice(((1, 1, 1, 1, 1), (1, 0, 0, 0, 0), (0, 1, 0, 1, 1), (1, 1, 0, 0, 0), (1, 1, 1, 1, 0), (0, 0, 0, 1, 1)))
            filters.append(tuple(v if m else None for v, m in zip(tup, mask)))
        if anchor_idx is not None and rng.random() < 0.8:
            center = packets[anchor_idx].ts_us
            half = rng.randrange(1, 120) * 1_000_000
            window = (center - half, center + half)
        anomalies.append(
            SynthAnomaly(
                anomaly_id=f"a{i:03d}",
                label=rng.choice(_LABELS),
                taxonomy=rng.choice(_TAXONOMIES),
                heuristic=rng.choice((503, 999, 20, 1)),
                distance=round(rng.uniform(-2, 2), 3),
                nb_detectors=rng.randrange(1, 13),
                filters=tuple(filters),
                window=window,
            )
        )
    return packets, anomalies


def synth_month(
    root: Path,
    year: int,
    month: int,
    days: int,
    packets_per_day: int,
    anomalies_per_day: int,
    seed: int = 0,
) -> Path:
    """Write per-day captures and annotations plus a manifest; return the manifest path."""
    rng = random.Random(seed)
    root.mkdir(parents=True, exist_ok=True)
    rows = ["date\tcapture\tannotations"]
    for d in range(1, days + 1):
        date = dt.date(year, month, d)
        start = int(dt.datetime(year, month, d, 14, 0, tzinfo=dt.timezone.utc).timestamp()) * 1_000_000
        packets, anomalies = synth_day(rng, start, packets_per_day, anomalies_per_day)
        stem = date.strftime("%Y%m%d")
        cap = root / f"{stem}1400.pcap"
        write_capture(packets, cap)
        csv_path = root / f"{stem}_anomalous_suspicious.csv"
        admd_path = root / f"{stem}_anomalous_suspicious.xml"
        write_annotation_files(anomalies, csv_path, admd_path)
        rows.append(f"{date.isoformat()}\t{cap.name}\t{csv_path.name},{admd_path.name}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest


def records(items: Iterable[tuple]) -> list[PacketRecord]:
    """Shorthand: build packets from ``make_packet`` argument tuples."""
    return [make_packet(*item) for item in items]
