import datetime as dt
import json

import pandas as pd
import pytest

from mawiflow import cli, pipeline
from mawiflow.errors import StageError, ValidationError
from mawiflow.pipeline import DayPaths, PipelineConfig, ingest, ingest_manifest, run_day, tree_digests
from mawiflow.synth import synth_month

D1 = dt.date(2011, 1, 1)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    raw = tmp_path_factory.mktemp("raw")
    return synth_month(raw, 2011, 1, 2, 2000, 3, seed=11)


def fresh(tmp_path, corpus, **kw):
    root = tmp_path / "data"
    ingest(corpus, root)
    return PipelineConfig(root=root, **kw)


def statuses(reports):
    return {r.stage: r.status for r in reports}


def test_manifest_parsing(tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    assert ingest_manifest(empty) == []
    m = tmp_path / "m.tsv"
    m.write_text(
        "date\tcapture\tannotations\n"
        "2011-01-03\tc3.pcap\ta3.csv\n"
        "# comment\n\n"
        "2011-01-01\t/abs/c1.pcap.gz\ta1.csv,a1.xml\n"
        "2011-01-02\thttp://example.org/c2.pcap\ta2.csv\n"
    )
    entries = ingest_manifest(m)
    assert [e.date.day for e in entries] == [1, 2, 3]
    assert entries[0].annotations == (str(tmp_path / "a1.csv"), str(tmp_path / "a1.xml"))
    assert entries[0].capture == "/abs/c1.pcap.gz" and entries[1].capture.startswith("http://")
    dup = tmp_path / "dup.tsv"
    dup.write_text("2011-01-01\tc.pcap\ta.csv\n2011-01-01\td.pcap\tb.csv\n")
    with pytest.raises(ValidationError, match="duplicate date"):
        ingest_manifest(dup)
    bad = tmp_path / "bad.tsv"
    bad.write_text("2011-01-01\tc.pcap\n")
    with pytest.raises(ValidationError, match=":1:"):
        ingest_manifest(bad)


def test_run_twice_skips_everything(tmp_path, corpus):
    cfg = fresh(tmp_path, corpus)
    first = run_day(cfg, D1)
    assert set(statuses(first).values()) == {"ran"}
    assert set(statuses(run_day(cfg, D1)).values()) == {"skipped"}


def test_corrupt_intermediate_reruns_stage_and_dependents(tmp_path, corpus):
    cfg = fresh(tmp_path, corpus)
    run_day(cfg, D1)
    paths = DayPaths.of(cfg.root, D1)
    before = tree_digests(paths.dataset)
    victim = next(paths.flows.glob("*.parquet"))
    victim.write_bytes(b"garbage")
    got = statuses(run_day(cfg, D1))
    assert got == {"merge-annotations": "skipped", "split": "skipped", "flows": "ran", "label": "ran", "aggregate": "ran"}
    assert tree_digests(paths.dataset) == before


def test_parameter_change_invalidates_flows(tmp_path, corpus):
    cfg = fresh(tmp_path, corpus)
    run_day(cfg, D1)
    shorter = PipelineConfig(root=cfg.root, flow_timeout_us=1_000_000)
    got = statuses(run_day(shorter, D1))
    assert got["split"] == "skipped" and got["flows"] == "ran" and got["aggregate"] == "ran"


def test_missing_annotations_fail_before_output(tmp_path, corpus):
    root = tmp_path / "data"
    ingest(corpus, root)
    src = json.loads(pipeline.source_path(root, D1).read_text())
    src["annotations"].append(str(tmp_path / "nope.csv"))
    pipeline.source_path(root, D1).write_text(json.dumps(src))
    with pytest.raises(ValidationError, match="nope.csv"):
        run_day(PipelineConfig(root=root), D1)
    assert sorted(p.name for p in root.iterdir()) == ["raw"]


def test_interrupted_stage_leaves_no_output(tmp_path, corpus, monkeypatch):
    cfg = fresh(tmp_path, corpus)

    def boom(*a, **k):
        raise RuntimeError("killed")

    monkeypatch.setattr(pipeline, "flows_from_capture", boom)
    with pytest.raises(RuntimeError):
        run_day(cfg, D1)
    flows_parent = DayPaths.of(cfg.root, D1).flows.parent
    assert not flows_parent.exists() or list(flows_parent.iterdir()) == []
    monkeypatch.undo()
    got = statuses(run_day(cfg, D1))
    assert got["split"] == "skipped" and got["flows"] == "ran"


def test_stage_subset_requires_upstream(tmp_path, corpus):
    cfg = fresh(tmp_path, corpus)
    with pytest.raises(StageError, match="missing inputs"):
        run_day(cfg, D1, ["flows"])


def write_dataset(root, date, labels):
    d = DayPaths.of(root, date).dataset
    d.mkdir(parents=True)
    pd.DataFrame({"Label": labels}).to_parquet(d / "flows.parquet")


def test_stats(tmp_path):
    assert pipeline.dataset_stats(tmp_path).rows == 0
    assert pipeline.dataset_stats(tmp_path).anomaly_ratio == 0
    write_dataset(tmp_path, D1, ["benign"] * 7 + ["anomalous"] * 3)
    write_dataset(tmp_path, dt.date(2011, 1, 5), ["notice"])
    st = pipeline.dataset_stats(tmp_path)
    assert st.rows == 11 and len(st.per_day) == 2
    assert st.per_day[0]["non_benign"] == 3
    assert st.per_day[0]["non_benign"] / st.per_day[0]["flows"] == pytest.approx(0.3)
    assert st.labels == {"anomalous": 3, "benign": 7, "notice": 1}


def test_parallel_days_match_serial(tmp_path, corpus):
    serial = fresh(tmp_path / "s", corpus)
    par = fresh(tmp_path / "p", corpus, jobs=2)
    dates = pipeline.ingested_dates(serial.root)
    pipeline.run_days(serial, dates)
    pipeline.run_days(par, dates)
    for d in dates:
        assert tree_digests(DayPaths.of(serial.root, d).dataset) == tree_digests(DayPaths.of(par.root, d).dataset)


def test_cli_exit_codes_and_env_root(tmp_path, corpus, monkeypatch, capsys):
    dup = tmp_path / "dup.tsv"
    dup.write_text("2011-01-01\tc.pcap\ta.csv\n2011-01-01\td.pcap\tb.csv\n")
    assert cli.main(["--root", str(tmp_path / "x"), "ingest", str(dup)]) == 7
    assert "error[validation]" in capsys.readouterr().err
    monkeypatch.setenv(pipeline.ROOT_ENV, str(tmp_path / "envroot"))
    assert cli.main(["ingest", str(corpus)]) == 0
    assert cli.main(["run", "--date", "2011-01-02", "--stages", "merge-annotations,split"]) == 0
    out = capsys.readouterr().out
    assert "2011-01-02\tsplit\tran" in out
    assert (tmp_path / "envroot" / "split" / "year=2011" / "month=01" / "day=02" / "benign.pcap").exists()
    assert cli.main(["sample", "--month", "2011-01", "--rows", "10"]) == 14
    with pytest.raises(SystemExit):
        cli.main(["run", "--stages", "bogus"])


def test_cli_full_month(tmp_path, corpus, capsys):
    root = str(tmp_path / "d")
    assert cli.main(["--root", root, "ingest", str(corpus)]) == 0
    assert cli.main(["--root", root, "run"]) == 0
    assert cli.main(["--root", root, "sample", "--month", "2011-01", "--rows", "10000000"]) == 12
    assert "only" in capsys.readouterr().err
    assert cli.main(["--root", root, "sample", "--month", "2011-01", "--rows", "500", "--stratify"]) == 0
    assert cli.main(["--root", root, "preprocess", "--month", "2011-01"]) == 0
    out = tmp_path / "d" / "preprocessed" / "year=2011" / "month=01"
    assert sorted(p.name for p in out.iterdir()) == [
        "preprocess.json", "scaler.txt", "split_manifest.json", "test.parquet", "train.parquet",
    ]
    assert len(pd.read_parquet(out / "train.parquet")) + len(pd.read_parquet(out / "test.parquet")) == 500
    assert cli.main(["--root", root, "stats", "--json", str(tmp_path / "s.json")]) == 0
    assert json.loads((tmp_path / "s.json").read_text())["rows"] > 0
