"""Labeled flow tables: label propagation, aggregation, sampling and the
model-ready preprocessing (scaling, protocol one-hot, binary labels, splits)."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .annotations import BENIGN, DayAnnotations
from .errors import ChecksumError, ConsistencyError, SampleSizeError, SchemaError
from .flowmeter import FEATURE_COLUMNS, LABEL_COLUMN, emit_schema
from .splitter import PartitionId

logger = logging.getLogger(__name__)

SIDE_COLUMNS = ["anomaly_id", "taxonomy", "heuristic"]
ID_COLUMNS = ["Flow ID", "Src IP", "Src Port", "Dst IP", "Dst Port", "Timestamp"]
SORT_KEYS = ["Timestamp", "Flow ID", "anomaly_id"]
DEFAULT_TARGET_ROWS = 3_000_000
TEST_FRACTION = 0.2
VALIDATION_FRACTION = 0.2


def labeled_columns() -> list[str]:
    return emit_schema() + SIDE_COLUMNS


def propagate_labels(flows: pd.DataFrame, partition: PartitionId, day: DayAnnotations) -> pd.DataFrame:
    """Stamp every flow of one partition with that partition's label."""
    out = flows.copy()
    if partition.is_benign:
        label, aid, taxonomy, heuristic = BENIGN, "", "", -1
    else:
        rec = day.by_id().get(partition.anomaly_id)
        if rec is None:
            raise ConsistencyError(f"partition {partition.anomaly_id!r} has no anomaly in the day annotations")
        label, aid, taxonomy, heuristic = rec.label, rec.anomaly_id, rec.taxonomy, rec.heuristic
    out[LABEL_COLUMN] = label
    out["anomaly_id"] = aid
    out["taxonomy"] = taxonomy
    out["heuristic"] = np.int64(heuristic)
    out = out.astype({"anomaly_id": object, "taxonomy": object, LABEL_COLUMN: object, "heuristic": "int64"})
    return out


def sort_flows(df: pd.DataFrame) -> pd.DataFrame:
    return df.sort_values(SORT_KEYS, kind="mergesort").reset_index(drop=True)


def aggregate_day(tables: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Concatenate labeled partition tables and sort deterministically."""
    if not tables:
        return _empty_labeled()
    cols = list(tables[0].columns)
    for i, t in enumerate(tables[1:], 1):
        if list(t.columns) != cols:
            raise SchemaError(f"table {i} columns differ from table 0")
    nonempty = [t for t in tables if len(t)] or [tables[0]]
    return sort_flows(pd.concat(nonempty, ignore_index=True))


def _empty_labeled() -> pd.DataFrame:
    from .flowmeter import column_dtype

    df = pd.DataFrame({c: pd.Series(dtype=column_dtype(c)) for c in emit_schema()})
    df["anomaly_id"] = pd.Series(dtype=object)
    df["taxonomy"] = pd.Series(dtype=object)
    df["heuristic"] = pd.Series(dtype="int64")
    return df


def _allocate(counts: Sequence[int], target: int) -> list[int]:
    """Largest-remainder proportional allocation summing to ``target``."""
    total = sum(counts)
    exact = [c * target / total for c in counts]
    alloc = [int(x) for x in exact]
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - alloc[i]), i))
    for i in order[: target - sum(alloc)]:
        alloc[i] += 1
    return alloc


def sample_period(
    tables: Sequence[pd.DataFrame],
    target_rows: int = DEFAULT_TARGET_ROWS,
    seed: int = 0,
    stratify: Optional[str] = None,
) -> pd.DataFrame:
    """Uniform sample without replacement over all rows of the period.

    With ``stratify`` set to a column name, each stratum keeps its share of
    rows (largest remainder rounding).
    """
    df = aggregate_day(list(tables)) if len(tables) != 1 else sort_flows(tables[0])
    n = len(df)
    if target_rows > n:
        raise SampleSizeError(f"requested {target_rows} rows but only {n} available", n)
    rng = np.random.default_rng(seed)
    if stratify is None:
        idx = rng.choice(n, size=target_rows, replace=False)
    else:
        groups = df.groupby(stratify, sort=True).indices
        keys = sorted(groups)
        alloc = _allocate([len(groups[k]) for k in keys], target_rows)
        idx = np.concatenate(
            [rng.choice(groups[k], size=a, replace=False) for k, a in zip(keys, alloc)] or [np.array([], dtype=int)]
        )
    return sort_flows(df.iloc[np.sort(idx)])


def table_digest(df: pd.DataFrame) -> str:
    h = hashlib.sha256()
    h.update("\x1f".join(map(str, df.columns)).encode())
    if len(df):
        h.update(pd.util.hash_pandas_object(df, index=False).to_numpy().tobytes())
    return h.hexdigest()


@dataclass
class ScalerParams:
    features: list[tuple[str, float, float]]
    dataset_hash: str = ""
    seed: Optional[int] = None

    def names(self) -> list[str]:
        return [f for f, _, _ in self.features]


def fit_scaler(train: pd.DataFrame, features: Sequence[str] = FEATURE_COLUMNS, seed: Optional[int] = None) -> ScalerParams:
    missing = [f for f in features if f not in train.columns]
    if missing:
        raise SchemaError(f"training table lacks features: {missing[:5]}")
    params = []
    for f in features:
        col = train[f].to_numpy(dtype=np.float64)
        lo, hi = (float(col.min()), float(col.max())) if len(col) else (0.0, 0.0)
        params.append((f, lo, hi))
    return ScalerParams(params, table_digest(train[list(features)]), seed)


def apply_scaler(df: pd.DataFrame, params: ScalerParams) -> pd.DataFrame:
    """x' = (x - min) / (max - min); constant features map to 0. No clipping."""
    missing = [f for f in params.names() if f not in df.columns]
    if missing:
        raise SchemaError(f"table lacks scaled features: {missing[:5]}")
    out = df.copy()
    for f, lo, hi in params.features:
        col = out[f].to_numpy(dtype=np.float64)
        span = hi - lo
        out[f] = (col - lo) / span if span > 0 else np.zeros(len(col))
    return out


def invert_scaler(df: pd.DataFrame, params: ScalerParams) -> pd.DataFrame:
    out = df.copy()
    for f, lo, hi in params.features:
        out[f] = out[f].to_numpy(dtype=np.float64) * (hi - lo) + lo
    return out


def _seal(body: str) -> str:
    return body + f"sha256 = {hashlib.sha256(body.encode()).hexdigest()}\n"


def _unseal(text: str, what: str) -> str:
    body, sep, last = text.rstrip("\n").rpartition("\n")
    body += "\n"
    if not sep or not last.startswith("sha256 = "):
        raise ChecksumError(f"{what}: missing checksum line")
    if hashlib.sha256(body.encode()).hexdigest() != last[len("sha256 = "):].strip():
        raise ChecksumError(f"{what}: checksum mismatch")
    return body


def dump_scaler(params: ScalerParams) -> str:
    lines = [
        "format = mawiflow-minmax-1",
        f"dataset_hash = {params.dataset_hash}",
        f"seed = {'' if params.seed is None else params.seed}",
        f"features = {len(params.features)}",
    ]
    lines += [f"feature = {json.dumps(name)} {lo!r} {hi!r}" for name, lo, hi in params.features]
    return _seal("\n".join(lines) + "\n")


def load_scaler(text: str) -> ScalerParams:
    body = _unseal(text, "scaler archive")
    meta, feats = {}, []
    for line in body.splitlines():
        key, _, value = line.partition(" = ")
        if key == "feature":
            name, end = json.JSONDecoder().raw_decode(value)
            lo, hi = value[end:].split()
            feats.append((name, float(lo), float(hi)))
        else:
            meta[key] = value
    if int(meta.get("features", -1)) != len(feats):
        raise ChecksumError("scaler archive: feature count mismatch")
    seed = int(meta["seed"]) if meta.get("seed") else None
    return ScalerParams(feats, meta.get("dataset_hash", ""), seed)


def fit_one_hot(train: pd.DataFrame, column: str = "Protocol") -> list[int]:
    return sorted(int(v) for v in pd.unique(train[column]))


def apply_one_hot(
    df: pd.DataFrame, categories: Sequence[int], column: str = "Protocol", warnings: Optional[Counter] = None
) -> pd.DataFrame:
    """Replace ``column`` by one indicator column per fitted category."""
    values = df[column].to_numpy()
    out = df.drop(columns=[column])
    for c in categories:
        out[f"{column}_{c}"] = (values == c).astype(np.int8)
    unseen = int((~np.isin(values, list(categories))).sum())
    if unseen and warnings is not None:
        warnings["unseen_protocol"] += unseen
    return out


def binarize_label(df: pd.DataFrame) -> pd.DataFrame:
    """benign -> 0, every other label -> 1."""
    out = df.copy()
    out[LABEL_COLUMN] = (out[LABEL_COLUMN] != BENIGN).astype(np.int8)
    return out


def drop_missing(df: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    """Remove rows with an absent cell or a non-finite numeric value."""
    bad = df.isna().any(axis=1).to_numpy()
    num = df.select_dtypes(include=[np.number])
    if num.shape[1]:
        bad |= ~np.isfinite(num.to_numpy(dtype=np.float64)).all(axis=1)
    return df[~bad].reset_index(drop=True), int(bad.sum())


@dataclass
class SplitManifest:
    seed: int
    with_validation: bool
    n_rows: int
    train: list[int]
    test: list[int]
    validation: list[int] = field(default_factory=list)

    @property
    def ratios(self) -> dict[str, float]:
        if self.with_validation:
            return {"train": 0.64, "validation": 0.16, "test": 0.2}
        return {"train": 0.8, "test": 0.2}

    def to_text(self) -> str:
        body = {
            "seed": self.seed,
            "with_validation": self.with_validation,
            "n_rows": self.n_rows,
            "ratios": self.ratios,
            "counts": {"train": len(self.train), "validation": len(self.validation), "test": len(self.test)},
            "train": self.train,
            "validation": self.validation,
            "test": self.test,
        }
        return _seal(json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        d = json.loads(_unseal(text, "split manifest"))
        return cls(d["seed"], d["with_validation"], d["n_rows"], d["train"], d["test"], d["validation"])


def split_dataset(n_rows: int, seed: int, with_validation: bool = False) -> SplitManifest:
    """Seeded 80/20 split of row positions; 64/16/20 with validation."""
    if isinstance(n_rows, pd.DataFrame):
        n_rows = len(n_rows)
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_test = round(n_rows * TEST_FRACTION)
    n_val = round((n_rows - n_test) * VALIDATION_FRACTION) if with_validation else 0
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test:n_test + n_val])
    train = np.sort(perm[n_test + n_val:])
    return SplitManifest(seed, with_validation, n_rows, train.tolist(), test.tolist(), val.tolist())


@dataclass
class PreparedDataset:
    splits: dict[str, pd.DataFrame]
    scaler: ScalerParams
    protocols: list[int]
    manifest: SplitManifest
    dropped: int
    warnings: Counter


def prepare_dataset(df: pd.DataFrame, seed: int = 0, with_validation: bool = False) -> PreparedDataset:
    """Drop incomplete rows, split, fit scaler and one-hot on train, transform all splits.

    Output tables hold the scaled features, protocol indicators and the
    binary label; identifier and side columns are dropped.
    """
    clean, dropped = drop_missing(df[emit_schema()])
    manifest = split_dataset(len(clean), seed, with_validation)
    parts = {"train": manifest.train, "test": manifest.test}
    if with_validation:
        parts["validation"] = manifest.validation
    raw = {k: clean.iloc[v].reset_index(drop=True) for k, v in parts.items()}
    scaler = fit_scaler(raw["train"], seed=seed)
    protocols = fit_one_hot(raw["train"])
    warnings: Counter = Counter()
    splits = {}
    for name in ("train", "validation", "test"):
        if name not in raw:
            continue
        t = apply_scaler(raw[name], scaler)
        t = apply_one_hot(t, protocols, warnings=warnings)
        t = binarize_label(t)
        splits[name] = t[FEATURE_COLUMNS + [f"Protocol_{p}" for p in protocols] + [LABEL_COLUMN]]
    if dropped:
        logger.info("dropped %d rows with missing values", dropped)
    return PreparedDataset(splits, scaler, protocols, manifest, dropped, warnings)


def write_prepared(prepared: PreparedDataset, out_dir: Path) -> list[Path]:
    """Write split parquet files and the two checksummed sidecars; returns paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, t in prepared.splits.items():
        p = out_dir / f"{name}.parquet"
        t.to_parquet(p, index=False)
        written.append(p)
    (out_dir / "scaler.txt").write_text(dump_scaler(prepared.scaler))
    (out_dir / "split_manifest.json").write_text(prepared.manifest.to_text())
    meta = {"dropped": prepared.dropped, "protocols": prepared.protocols, "warnings": dict(prepared.warnings)}
    (out_dir / "preprocess.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return written + [out_dir / "scaler.txt", out_dir / "split_manifest.json", out_dir / "preprocess.json"]


def concat_tables(tables: Iterable[pd.DataFrame]) -> pd.DataFrame:
    tables = list(tables)
    return aggregate_day(tables) if tables else _empty_labeled()
