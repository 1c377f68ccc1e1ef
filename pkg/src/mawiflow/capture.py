"""Classic pcap reading/writing and IPv4/IPv6 header dissection.

Only the libpcap "classic" container is handled (both byte orders, µs and ns
timestamp magics). Gzip-compressed captures are detected by their leading
magic bytes and decompressed on the fly.
"""

from __future__ import annotations

import contextlib
import gzip
import logging
import socket
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, NamedTuple, Optional

from .errors import CaptureFormatError, ContractError, TruncatedCaptureError

logger = logging.getLogger(__name__)

GZIP_MAGIC = b"\x1f\x8b"

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D
PCAPNG_MAGIC = 0x0A0D0D0A

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LOOP = 108
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229
# some BSDs write the raw-IP DLT values instead of LINKTYPE_RAW
_RAW_ALIASES = {12, 14, LINKTYPE_RAW}

DEFAULT_SNAPLEN = 262144

# protocol value given to frames that carry no IPv4/IPv6 datagram (ARP, LLDP, ...)
NON_IP = -1

TCP = 6
UDP = 17

FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10
URG = 0x20
ECE = 0x40
CWR = 0x80

_ETH_IPV4 = 0x0800
_ETH_IPV6 = 0x86DD
_ETH_VLAN = {0x8100, 0x88A8, 0x9100}

# IPv6 extension headers walked to reach the transport header
_IPV6_EXT = {0, 43, 60}
_IPV6_FRAG = 44

_GLOBAL = struct.Struct("IHHiIII")


class PacketRecord(NamedTuple):
    """One captured frame, reduced to the fields flow export needs."""

    ts_us: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    ip_header_len: int
    transport_header_len: int
    payload_len: int
    wire_len: int
    tcp_flags: Optional[int]
    tcp_window: Optional[int]
    raw_frame: Optional[bytes]
    link_type: int = LINKTYPE_ETHERNET

    @property
    def is_ip(self) -> bool:
        return self.protocol != NON_IP

    @property
    def five_tuple(self) -> tuple[str, str, int, int, int]:
        return (self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.protocol)


def _non_ip(ts_us: int, wire_len: int, frame: bytes, link_type: int) -> PacketRecord:
    return PacketRecord(ts_us, "", "", 0, 0, NON_IP, 0, 0, 0, wire_len, None, None, frame, link_type)


def _ipv6_str(raw: bytes) -> str:
    return socket.inet_ntop(socket.AF_INET6, raw)


def canonical_ip(text: str) -> str:
    """Render an address exactly as the dissector does, or raise ValueError."""
    text = text.strip()
    try:
        if ":" in text:
            return socket.inet_ntop(socket.AF_INET6, socket.inet_pton(socket.AF_INET6, text))
        return socket.inet_ntoa(socket.inet_pton(socket.AF_INET, text))
    except OSError as exc:
        raise ValueError(f"invalid IP address {text!r}") from exc


def dissect(frame: bytes, ts_us: int, wire_len: int, link_type: int = LINKTYPE_ETHERNET) -> PacketRecord:
    """Decode link, network and transport headers of ``frame``.

    Never raises on malformed or truncated content: anything that cannot be
    decoded as IP becomes a ``NON_IP`` record, and a transport header cut off
    by the snap length yields zero ports.
    """
    off = 0
    if link_type == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return _non_ip(ts_us, wire_len, frame, link_type)
        ethertype = (frame[12] << 8) | frame[13]
        off = 14
        while ethertype in _ETH_VLAN and len(frame) >= off + 4:
            ethertype = (frame[off + 2] << 8) | frame[off + 3]
            off += 4
        if ethertype == _ETH_IPV4:
            version = 4
        elif ethertype == _ETH_IPV6:
            version = 6
        else:
            return _non_ip(ts_us, wire_len, frame, link_type)
    elif link_type in _RAW_ALIASES or link_type in (LINKTYPE_IPV4, LINKTYPE_IPV6):
        if not frame:
            return _non_ip(ts_us, wire_len, frame, link_type)
        version = frame[0] >> 4
    elif link_type == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            return _non_ip(ts_us, wire_len, frame, link_type)
        ethertype = (frame[14] << 8) | frame[15]
        off = 16
        version = 4 if ethertype == _ETH_IPV4 else 6 if ethertype == _ETH_IPV6 else 0
    elif link_type in (LINKTYPE_NULL, LINKTYPE_LOOP):
        if len(frame) < 5:
            return _non_ip(ts_us, wire_len, frame, link_type)
        off = 4
        version = frame[4] >> 4
    else:
        return _non_ip(ts_us, wire_len, frame, link_type)

    if version == 4:
        if len(frame) < off + 20:
            return _non_ip(ts_us, wire_len, frame, link_type)
        ihl = (frame[off] & 0x0F) * 4
        total_len = (frame[off + 2] << 8) | frame[off + 3]
        frag = ((frame[off + 6] & 0x1F) << 8) | frame[off + 7]
        proto = frame[off + 9]
        src = socket.inet_ntoa(frame[off + 12 : off + 16])
        dst = socket.inet_ntoa(frame[off + 16 : off + 20])
        ip_hlen = ihl
        ip_payload = total_len - ihl
        t = off + ihl
        first_fragment = frag == 0
    elif version == 6:
        if len(frame) < off + 40:
            return _non_ip(ts_us, wire_len, frame, link_type)
        payload_field = (frame[off + 4] << 8) | frame[off + 5]
        nxt = frame[off + 6]
        src = _ipv6_str(frame[off + 8 : off + 24])
        dst = _ipv6_str(frame[off + 24 : off + 40])
        t = off + 40
        ip_hlen = 40
        first_fragment = True
        while nxt in _IPV6_EXT or nxt == _IPV6_FRAG:
            if len(frame) < t + 8:
                break
            if nxt == _IPV6_FRAG:
                first_fragment = ((frame[t + 2] << 8 | frame[t + 3]) >> 3) == 0
                ext_len = 8
            else:
                ext_len = (frame[t + 1] + 1) * 8
            nxt = frame[t]
            t += ext_len
            ip_hlen += ext_len
        proto = nxt
        ip_payload = payload_field + 40 - ip_hlen
    else:
        return _non_ip(ts_us, wire_len, frame, link_type)

    sport = dport = 0
    thlen = 0
    flags: Optional[int] = None
    window: Optional[int] = None
    avail = len(frame) - t
    if proto == TCP:
        flags = 0
        window = 0
        if first_fragment and avail >= 4:
            sport = (frame[t] << 8) | frame[t + 1]
            dport = (frame[t + 2] << 8) | frame[t + 3]
        if first_fragment and avail >= 13:
            thlen = (frame[t + 12] >> 4) * 4
        else:
            thlen = 20 if first_fragment else 0
        if first_fragment and avail >= 14:
            flags = frame[t + 13]
        if first_fragment and avail >= 16:
            window = (frame[t + 14] << 8) | frame[t + 15]
    elif proto == UDP:
        if first_fragment:
            thlen = 8
            if avail >= 4:
                sport = (frame[t] << 8) | frame[t + 1]
                dport = (frame[t + 2] << 8) | frame[t + 3]
    payload = ip_payload - thlen
    if payload < 0:
        payload = 0
    return PacketRecord(ts_us, src, dst, sport, dport, proto, ip_hlen, thlen, payload, wire_len, flags, window, frame, link_type)


def _open_stream(path: Path, stack: contextlib.ExitStack) -> BinaryIO:
    fh = stack.enter_context(open(path, "rb"))
    if fh.peek(2)[:2] == GZIP_MAGIC:
        return stack.enter_context(gzip.GzipFile(fileobj=fh, mode="rb"))  # type: ignore[return-value]
    return fh


class CaptureReader:
    """Iterate over the packets of a classic pcap (optionally gzipped) file.

    After iteration ``count`` holds the number of packets yielded.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.count = 0
        self.link_type = LINKTYPE_ETHERNET
        self.nanosecond = False
        self.snaplen = DEFAULT_SNAPLEN

    def __iter__(self) -> Iterator[PacketRecord]:
        with contextlib.ExitStack() as stack:
            yield from self._iter(_open_stream(self.path, stack))

    def _iter(self, fh: BinaryIO) -> Iterator[PacketRecord]:
        header = fh.read(24)
        if len(header) < 4:
            raise CaptureFormatError(f"{self.path}: too short for a capture header")
        magic_le = struct.unpack("<I", header[:4])[0]
        if magic_le in (MAGIC_US, MAGIC_NS):
            endian = "<"
        elif struct.unpack(">I", header[:4])[0] in (MAGIC_US, MAGIC_NS):
            endian = ">"
        elif magic_le == PCAPNG_MAGIC:
            raise CaptureFormatError(f"{self.path}: pcapng is not supported, convert to classic pcap")
        else:
            raise CaptureFormatError(f"{self.path}: unrecognized magic 0x{header[:4].hex()}")
        if len(header) < 24:
            raise CaptureFormatError(f"{self.path}: truncated global header")
        magic, _vmaj, _vmin, _zone, _sig, snaplen, network = struct.unpack(endian + "IHHiIII", header)
        self.nanosecond = magic == MAGIC_NS
        self.snaplen = snaplen
        # upper 16 bits may carry FCS info (pcap-linktype(7))
        self.link_type = link_type = network & 0x0FFFFFFF
        rec = struct.Struct(endian + "IIII")
        unpack = rec.unpack
        read = fh.read
        ns = self.nanosecond
        n = 0
        try:
            while True:
                hdr = read(16)
                if not hdr:
                    break
                if len(hdr) < 16:
                    raise TruncatedCaptureError(
                        f"{self.path}: truncated packet header after {n} packets", n
                    )
                sec, frac, caplen, wire_len = unpack(hdr)
                frame = read(caplen)
                if len(frame) < caplen:
                    raise TruncatedCaptureError(
                        f"{self.path}: truncated packet data after {n} packets", n
                    )
                ts_us = sec * 1_000_000 + (frac // 1000 if ns else frac)
                n += 1
                self.count = n
                yield dissect(frame, ts_us, wire_len, link_type)
        except (EOFError, gzip.BadGzipFile) as exc:
            raise TruncatedCaptureError(f"{self.path}: {exc} after {n} packets", n) from exc


def read_capture(path: str | Path) -> Iterator[PacketRecord]:
    """Yield the packets of ``path`` in file order."""
    return iter(CaptureReader(path))


class CaptureWriter:
    """Little-endian, microsecond-resolution pcap writer.

    Pass ``header=False`` to append packets to a file already started.
    """

    def __init__(
        self,
        fh: BinaryIO,
        link_type: int = LINKTYPE_ETHERNET,
        snaplen: int = DEFAULT_SNAPLEN,
        header: bool = True,
    ):
        self._fh = fh
        self.link_type = link_type
        self.count = 0
        self._rec = struct.Struct("<IIII")
        if header:
            fh.write(_GLOBAL.pack(MAGIC_US, 2, 4, 0, 0, snaplen, link_type))

    def write(self, record: PacketRecord) -> None:
        frame = record.raw_frame
        if frame is None:
            raise ContractError(f"packet at ts={record.ts_us} has no raw_frame to write")
        if record.link_type != self.link_type:
            raise ContractError(
                f"link type {record.link_type} does not match capture link type {self.link_type}"
            )
        sec, usec = divmod(record.ts_us, 1_000_000)
        self._fh.write(self._rec.pack(sec, usec, len(frame), record.wire_len))
        self._fh.write(frame)
        self.count += 1


def write_capture(
    records: Iterable[PacketRecord],
    path: str | Path,
    link_type: Optional[int] = None,
    snaplen: int = DEFAULT_SNAPLEN,
) -> int:
    """Write ``records`` to ``path`` and return the number written.

    The link type defaults to that of the first record (Ethernet for an empty
    stream). A ``.gz`` suffix produces a gzip container with a zero mtime, so
    equal input gives equal bytes.
    """
    it = iter(records)
    first = next(it, None)
    if link_type is None:
        link_type = first.link_type if first is not None else LINKTYPE_ETHERNET
    if str(path).endswith(".gz"):
        fh = gzip.GzipFile(path, "wb", mtime=0)
    else:
        fh = open(path, "wb")
    with fh:
        writer = CaptureWriter(fh, link_type, snaplen)
        if first is not None:
            writer.write(first)
            for rec in it:
                writer.write(rec)
        return writer.count
