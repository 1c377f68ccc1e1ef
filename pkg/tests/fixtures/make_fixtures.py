"""Regenerate the binary capture fixtures.

Frames and pcap headers are assembled with ``struct`` directly so the
fixtures do not depend on the package's own writer.

    python tests/fixtures/make_fixtures.py
"""

import gzip
import socket
import struct
from pathlib import Path

HERE = Path(__file__).parent
BASE_TS = 1_293_876_000  # 2011-01-01 10:00:00 UTC


def udp_frame(src, dst, sport, dport, payload):
    udp = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, 20 + len(udp), 1, 0, 64, 17, 0,
        socket.inet_aton(src), socket.inet_aton(dst),
    )
    eth = bytes.fromhex("020000000002020000000001") + b"\x08\x00"
    return eth + ip + udp


def tcp_frame(src, dst, sport, dport, flags, window, payload):
    tcp = struct.pack("!HHIIBBHHH", sport, dport, 1, 0, 5 << 4, flags, window, 0, 0) + payload
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, 20 + len(tcp), 1, 0, 64, 6, 0,
        socket.inet_aton(src), socket.inet_aton(dst),
    )
    eth = bytes.fromhex("020000000002020000000001") + b"\x08\x00"
    return eth + ip + tcp


def pcap(frames, endian="<", nanos=False, link=1):
    magic = 0xA1B23C4D if nanos else 0xA1B2C3D4
    out = [struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, link)]
    for sec, frac, frame in frames:
        out.append(struct.pack(endian + "IIII", sec, frac, len(frame), len(frame)))
        out.append(frame)
    return b"".join(out)


def main():
    three = [
        (BASE_TS, 0, udp_frame("10.0.0.1", "10.0.0.2", 5000, 53, b"\x00" * 10)),
        (BASE_TS, 250_000, udp_frame("10.0.0.1", "10.0.0.2", 5000, 53, b"\x00" * 20)),
        (BASE_TS + 1, 500_000, udp_frame("10.0.0.1", "10.0.0.2", 5000, 53, b"\x00" * 30)),
    ]
    plain = pcap(three)
    (HERE / "three_udp.pcap").write_bytes(plain)
    (HERE / "three_udp.pcap.gz").write_bytes(gzip.compress(plain, mtime=0))
    (HERE / "empty.pcap").write_bytes(pcap([]))
    (HERE / "three_udp_be.pcap").write_bytes(pcap(three, endian=">"))
    ns_frames = [(s, f * 1000 + 789, fr) for s, f, fr in three]
    (HERE / "three_udp_ns.pcap").write_bytes(pcap(ns_frames, nanos=True))

    handshake = [
        (BASE_TS, 0, tcp_frame("192.168.1.10", "192.168.1.20", 40000, 80, 0x02, 29200, b"")),
        (BASE_TS, 1_000, tcp_frame("192.168.1.20", "192.168.1.10", 80, 40000, 0x12, 28960, b"")),
        (BASE_TS, 2_000, tcp_frame("192.168.1.10", "192.168.1.20", 40000, 80, 0x10, 229, b"")),
        (BASE_TS, 3_000, tcp_frame("192.168.1.10", "192.168.1.20", 40000, 80, 0x18, 229, b"G" * 120)),
        (BASE_TS, 9_000, tcp_frame("192.168.1.20", "192.168.1.10", 80, 40000, 0x18, 235, b"H" * 900)),
        (BASE_TS, 10_000, tcp_frame("192.168.1.10", "192.168.1.20", 40000, 80, 0x11, 229, b"")),
        (BASE_TS, 11_000, tcp_frame("192.168.1.20", "192.168.1.10", 80, 40000, 0x11, 235, b"")),
        (BASE_TS, 12_000, tcp_frame("192.168.1.10", "192.168.1.20", 40000, 80, 0x10, 229, b"")),
    ]
    (HERE / "tcp_session.pcap").write_bytes(pcap(handshake))
    arp = bytes.fromhex("ffffffffffff020000000001") + b"\x08\x06" + bytes(28)
    (HERE / "mixed_arp.pcap").write_bytes(pcap([handshake[0], (BASE_TS, 500, arp), three[0]]))
    truncated = pcap(three)
    (HERE / "truncated.pcap").write_bytes(truncated[:-7])


if __name__ == "__main__":
    main()
