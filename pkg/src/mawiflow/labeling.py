"""Alarm-overlap similarity and the community label rule used by MAWILab.

Only the reusable math lives here; community detection and the SCANN
combiner itself run upstream and their outputs arrive as annotations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import AbstractSet, Hashable, Iterable, Sequence, TextIO

ANOMALOUS = "anomalous"
SUSPICIOUS = "suspicious"
NOTICE = "notice"
UNCLASSIFIED = "unclassified"

# notice needs d_c strictly above this
NOTICE_THRESHOLD = 0.5


@dataclass(frozen=True)
class AlarmTrafficSet:
    alarm_id: str
    flows: frozenset

    def __init__(self, alarm_id: str, flows: Iterable[Hashable]):
        object.__setattr__(self, "alarm_id", alarm_id)
        object.__setattr__(self, "flows", frozenset(flows))

    def __len__(self) -> int:
        return len(self.flows)


@dataclass(frozen=True)
class CommunityVerdict:
    accepted: bool
    distance: float


def _flows(x) -> AbstractSet:
    return x.flows if isinstance(x, AlarmTrafficSet) else x


def simpson_index(a, b) -> float:
    """|a ∩ b| / min(|a|, |b|). Accepts AlarmTrafficSet or plain sets."""
    fa, fb = _flows(a), _flows(b)
    smaller = min(len(fa), len(fb))
    if smaller == 0:
        raise ZeroDivisionError("Simpson index undefined for an empty set")
    if len(fa) > len(fb):
        fa, fb = fb, fa
    return sum(1 for x in fa if x in fb) / smaller


def build_similarity_edges(sets: Sequence) -> list[tuple[int, int, float]]:
    """Edges (i, j, w) with i < j for every pair whose overlap w is positive."""
    # inverted index so disjoint pairs are never compared
    owners: dict = {}
    for i, s in enumerate(sets):
        flows = _flows(s)
        if not flows:
            raise ZeroDivisionError(f"set {i} is empty")
        for f in flows:
            owners.setdefault(f, []).append(i)
    shared: dict[tuple[int, int], int] = {}
    for idx in owners.values():
        for k, i in enumerate(idx):
            for j in idx[k + 1:]:
                shared[(i, j)] = shared.get((i, j), 0) + 1
    sizes = [len(_flows(s)) for s in sets]
    return [(i, j, n / min(sizes[i], sizes[j])) for (i, j), n in sorted(shared.items())]


def write_edges(edges: Iterable[tuple[int, int, float]], fh: TextIO) -> None:
    for i, j, w in edges:
        fh.write(f"{i}\t{j}\t{w!r}\n")


def classify_community(v: CommunityVerdict, fold_unclassified: bool = False) -> str:
    """Label of an alarm community from its SCANN verdict and distance d_c.

    Rejected communities with 0 < d_c <= 0.5 are not covered by the published
    rule; they come back as ``unclassified`` unless ``fold_unclassified`` maps
    them to suspicious.
    """
    if v.accepted:
        return ANOMALOUS
    if v.distance <= 0:
        return SUSPICIOUS
    if v.distance > NOTICE_THRESHOLD:
        return NOTICE
    return SUSPICIOUS if fold_unclassified else UNCLASSIFIED
