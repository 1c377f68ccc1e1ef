import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flow_cases import CASES, S, T0, fwd, udp
from flow_oracle import reference
from mawiflow.capture import read_capture, write_capture
from mawiflow.errors import ReorderError
from mawiflow.flowmeter import (
    FLOW_TIMEOUT_US,
    AssemblyStats,
    FlowAssembler,
    assemble_flows,
    emit_schema,
    flows_from_capture,
    read_flows_csv,
    running_stats,
    write_flows_csv,
)
from mawiflow.synth import make_packet

FIXTURES = Path(__file__).parent / "fixtures"


def by_name(name):
    return next(c for c in CASES if c[0] == name)


def one_flow(name):
    _, pkts, ft, at = by_name(name)
    (row,) = assemble_flows(pkts, ft, at)
    return row


def assert_rows_match(got, expected):
    for col, want in expected.items():
        have = got[col]
        if isinstance(want, float) or isinstance(have, float):
            assert math.isclose(have, want, rel_tol=1e-6, abs_tol=1e-9), (col, have, want)
        else:
            assert have == want, (col, have, want)


def test_header_matches_reference_fixture():
    ref = (FIXTURES / "cicflowmeter_v3_header.csv").read_text().rstrip("\n").split(",")
    assert emit_schema() == ref
    assert emit_schema()[0] == "Flow ID" and emit_schema()[-1] == "Label"


@pytest.mark.parametrize("values,expected", [([], (0, 0, 0, 0)), ([5], (5, 5, 5, 0)), ([2, 4, 6], (2, 6, 4, 2))])
def test_running_stats(values, expected):
    assert running_stats(values) == pytest.approx(expected)


def test_single_packet_flow():
    row = one_flow("single_udp")
    assert row["Flow Duration"] == 0 and row["Total Fwd Packet"] == 1
    assert row["Flow Bytes/s"] == 0 and row["Flow Packets/s"] == 0
    assert all(row[f"Flow IAT {s}"] == 0 for s in ("Mean", "Std", "Max", "Min"))
    assert row["Down/Up Ratio"] == 0 and row["Average Packet Size"] == 60


def test_two_forward_packets():
    row = one_flow("two_forward")
    assert row["Fwd Packet Length Mean"] == 150
    assert row["Fwd IAT Mean"] == 1_000_000
    assert row["Flow Bytes/s"] == 300


def test_fin_handshake_is_one_flow():
    _, pkts, ft, at = by_name("fin_handshake")
    stats = AssemblyStats()
    (row,) = assemble_flows(pkts, ft, at, stats=stats)
    assert row["SYN Flag Count"] == 2 and row["FIN Flag Count"] == 2
    assert stats.closed_by_fin == 1 and stats.closed_at_end == 0
    assert (row["FWD Init Win Bytes"], row["Bwd Init Win Bytes"]) == (1024, 4096)


def test_rst_closes_after_packet():
    rows = list(assemble_flows(by_name("rst_forward")[1]))
    assert [r["Total Fwd Packet"] + r["Total Bwd packets"] for r in rows] == [3, 1]


def test_down_up_ratio():
    assert one_flow("ratio_3_fwd_6_bwd")["Down/Up Ratio"] == 2.0


def test_idle_gap_segmentation():
    row = one_flow("idle_gap_7s")
    assert (row["Idle Mean"], row["Idle Min"], row["Idle Max"]) == (7_000_000, 7_000_000, 7_000_000)
    # two active periods: 1 s and 0.5 s
    assert (row["Active Max"], row["Active Min"]) == (1_000_000, 500_000)


def test_bulk_by_hand():
    row = one_flow("bulk_forward")
    assert row["Fwd Packet/Bulk Avg"] == 6
    assert row["Fwd Bytes/Bulk Avg"] == sum(1000 + i for i in range(6))
    assert row["Fwd Bulk Rate Avg"] == pytest.approx(6015 / 0.5)
    broken = one_flow("bulk_broken_by_bwd_payload")
    assert broken["Fwd Packet/Bulk Avg"] == 5 and broken["Bwd Packet/Bulk Avg"] == 0
    assert one_flow("bulk_zero_payload_acks_interleaved")["Fwd Packet/Bulk Avg"] == 5
    assert one_flow("bulk_gap_over_one_second")["Fwd Packet/Bulk Avg"] == 4


def test_subflows_by_hand():
    row = one_flow("subflows")
    # gaps above 1 s: 0.5->2, 2.000001->3.000002 and 3.000002->5
    assert row["Subflow Fwd Packets"] == 6 / 4


def test_timeout_split_bounds_duration():
    _, pkts, ft, at = by_name("timeout_split")
    rows = list(assemble_flows(pkts, ft, at))
    assert [r["Total Fwd Packet"] for r in rows] == [3, 3, 3]
    assert all(r["Flow Duration"] <= ft for r in rows)


def flow_sort_key(r):
    return (r["Timestamp"], r["Flow ID"], r["Total Fwd Packet"], r["Total Bwd packets"])


@pytest.mark.parametrize("case", CASES, ids=[c[0] for c in CASES])
def test_fixture_capture_matches_oracle(case, tmp_path):
    name, pkts, ft, at = case
    path = tmp_path / f"{name}.pcap"
    write_capture(pkts, path)
    replayed = list(read_capture(path))
    df = flows_from_capture(path, ft, at)
    expected = reference(replayed, ft, at)
    assert list(df.columns) == emit_schema()
    assert len(df) == len(expected)
    got = sorted(df.to_dict("records"), key=flow_sort_key)
    for g, e in zip(got, sorted(expected, key=flow_sort_key)):
        assert set(e) == set(emit_schema())
        assert_rows_match(g, e)
    # conservation
    ip = [p for p in replayed if p.protocol >= 0]
    assert (df["Total Fwd Packet"] + df["Total Bwd packets"]).sum() == len(ip)
    assert (df["Total Length of Fwd Packet"] + df["Total Length of Bwd Packet"]).sum() == sum(p.payload_len for p in ip)


def test_closing_order():
    pkts = [
        udp(0, 1, sport=1),
        fwd(1, 0, 4),  # tcp RST closes at once
        udp(2, 1, sport=2),
        udp(11 * S, 1, sport=3),  # expires the two udp flows first
    ]
    asm = FlowAssembler(flow_timeout_us=10 * S)
    closed = [acc for p in pkts for acc in asm.add(p)] + asm.flush()
    assert [(a.protocol, a.src_port, a.closed_by) for a in closed] == [
        (6, 40000, "rst"), (17, 1, "timeout"), (17, 2, "timeout"), (17, 3, "end"),
    ]


def test_reorder_beyond_slack_names_index():
    pkts = [udp(10, 1), udp(20, 1), udp(5, 1)]
    with pytest.raises(ReorderError, match="packet 2") as info:
        list(assemble_flows(pkts))
    assert info.value.index == 2
    rows = list(assemble_flows(pkts, reorder_slack_us=15))
    assert rows[0]["Total Fwd Packet"] == 3 and rows[0]["Flow IAT Min"] >= 0


def test_csv_round_trip_and_determinism(tmp_path):
    _, pkts, ft, at = by_name("random_mixed")
    write_capture(pkts, tmp_path / "m.pcap")
    a, b = flows_from_capture(tmp_path / "m.pcap", ft, at), flows_from_capture(tmp_path / "m.pcap", ft, at)
    write_flows_csv(a, tmp_path / "a.csv")
    write_flows_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().split("\n", 1)[0]
    assert header == (FIXTURES / "cicflowmeter_v3_header.csv").read_text().rstrip("\n")
    back = read_flows_csv(tmp_path / "a.csv")
    assert list(back.dtypes) == list(a.dtypes)
    assert back.drop(columns="Label").equals(a.drop(columns="Label"))


def test_empty_capture_gives_empty_table(tmp_path):
    df = flows_from_capture(FIXTURES / "empty.pcap")
    assert len(df) == 0 and list(df.columns) == emit_schema()


packet_rows = st.lists(
    st.tuples(
        st.integers(0, 3 * S),
        st.sampled_from([("10.0.0.1", "10.0.0.2"), ("10.0.0.2", "10.0.0.1"), ("10.0.0.3", "10.0.0.1")]),
        st.sampled_from([(1, 2), (2, 1)]),
        st.sampled_from([6, 17]),
        st.integers(0, 1500),
        st.sampled_from([0, 1, 2, 4, 8, 16, 17, 24]),
    ),
    max_size=60,
)


@settings(max_examples=80, deadline=None)
@given(packet_rows, st.sampled_from([500_000, 2 * S, FLOW_TIMEOUT_US]), st.sampled_from([100_000, S]))
def test_random_streams_match_oracle(rows, flow_timeout, activity_timeout):
    rows = sorted(rows, key=lambda r: r[0])
    pkts = [make_packet(T0 + t, a, b, sp, dp, proto, n, fl if proto == 6 else 0, 7) for t, (a, b), (sp, dp), proto, n, fl in rows]
    got = list(assemble_flows(pkts, flow_timeout, activity_timeout))
    expected = reference(pkts, flow_timeout, activity_timeout)
    assert len(got) == len(expected)
    for g, e in zip(sorted(got, key=flow_sort_key), sorted(expected, key=flow_sort_key)):
        assert_rows_match(g, e)
    assert sum(r["Total Fwd Packet"] + r["Total Bwd packets"] for r in got) == len(pkts)
    for r in got:
        assert 0 <= r["Flow Duration"] <= flow_timeout
        for prefix in ("Fwd Packet Length", "Bwd Packet Length", "Flow IAT", "Fwd IAT", "Bwd IAT", "Active", "Idle"):
            assert r[f"{prefix} Min"] <= r[f"{prefix} Mean"] + 1e-9 and r[f"{prefix} Mean"] <= r[f"{prefix} Max"] + 1e-9
        assert math.isclose(r["Packet Length Std"] ** 2, r["Packet Length Variance"], rel_tol=1e-9, abs_tol=1e-12)
