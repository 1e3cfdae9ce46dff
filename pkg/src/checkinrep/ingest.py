"""Raw check-in log ingestion.

Parses TSV/CSV check-in logs into typed records, filters sparse users and
locations to a fixed point, segments per-user streams into sequences at
temporal gaps, and packages chronological per-user train/val/test splits
together with vocabularies, the user social graph and the log inter-event
time statistics needed downstream.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"

SECONDS_PER_DAY = 86400.0
SECONDS_PER_HOUR = 3600.0


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckInRecord:
    """One visit event: who, where (id + coordinates), when, what kind of place."""

    user: int
    lid: int
    lon: float
    lat: float
    t: int
    cat: str = ""


@dataclass(frozen=True)
class CheckInSequence:
    """Time-ordered visits of a single user."""

    user: int
    records: tuple[CheckInRecord, ...]

    def __post_init__(self) -> None:
        if len(self.records) < 2:
            raise ValueError(f"sequence needs at least 2 records, got {len(self.records)}")
        if any(r.user != self.user for r in self.records):
            raise ValueError("all records in a sequence must share the same user")
        ts = [r.t for r in self.records]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("records must be non-decreasing in time")

    @property
    def start_t(self) -> int:
        return self.records[0].t

    @property
    def end_t(self) -> int:
        return self.records[-1].t

    def __len__(self) -> int:
        return len(self.records)


class Vocab:
    """Deterministic id -> contiguous index mapping, optionally with an UNK slot."""

    def __init__(self, ids: Iterable, with_unk: bool = False):
        self.with_unk = with_unk
        self.ids = sorted(set(ids))
        offset = 1 if with_unk else 0
        self._index = {v: i + offset for i, v in enumerate(self.ids)}
        self.unk_index = 0 if with_unk else None

    def __len__(self) -> int:
        return len(self.ids) + (1 if self.with_unk else 0)

    def __contains__(self, v) -> bool:
        return v in self._index

    def encode(self, v) -> int:
        idx = self._index.get(v)
        if idx is None:
            if self.unk_index is None:
                raise KeyError(f"{v!r} not in vocabulary and no UNK slot configured")
            return self.unk_index
        return idx

    def decode(self, idx: int):
        if self.with_unk:
            if idx == 0:
                return UNK_TOKEN
            return self.ids[idx - 1]
        return self.ids[idx]


class SocialGraph:
    """Undirected user graph without self-loops, stored as sorted adjacency lists."""

    def __init__(self, edges: Iterable[tuple[int, int]] = ()):
        adj: dict[int, set[int]] = {}
        for u, v in edges:
            if u == v:
                continue
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
        self._adj = {u: tuple(sorted(vs)) for u, vs in adj.items()}

    def ensure_nodes(self, users: Iterable[int]) -> None:
        for u in users:
            self._adj.setdefault(u, ())

    def neighbors(self, user: int) -> tuple[int, ...]:
        return self._adj.get(user, ())

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(sorted(self._adj))

    def edges(self) -> list[tuple[int, int]]:
        out = []
        for u in sorted(self._adj):
            for v in self._adj[u]:
                if u < v:
                    out.append((u, v))
        return out

    def num_edges(self) -> int:
        return len(self.edges())


@dataclass
class DatasetBundle:
    """Everything the training and evaluation stages consume."""

    train: list[CheckInSequence]
    val: list[CheckInSequence]
    test: list[CheckInSequence]
    user_vocab: Vocab
    loc_vocab: Vocab
    cat_vocab: Vocab
    graph: SocialGraph
    log_dt_mean: float  # mean of log inter-event seconds on the train split
    log_dt_std: float  # std of the same; substituted with 1.0 when degenerate
    tz_offset_hours: float = 0.0
    filter_params: dict = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return len(self.user_vocab)

    @property
    def num_locations(self) -> int:
        return len(self.loc_vocab)

    def all_sequences(self) -> list[CheckInSequence]:
        return list(self.train) + list(self.val) + list(self.test)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

#: column order: user, time, lat, lon, lid, cat (cat optional)
FORMAT_COLUMNS = {
    "gowalla": {"user": 0, "time": 1, "lat": 2, "lon": 3, "lid": 4, "cat": None, "delimiter": "\t", "header": False},
    "weeplace": {"user": 0, "lid": 1, "time": 2, "lat": 3, "lon": 4, "cat": 6, "delimiter": ",", "header": True},
    "generic-csv": {"user": 0, "time": 1, "lat": 2, "lon": 3, "lid": 4, "cat": 5, "delimiter": "\t", "header": False},
}


def _parse_time(token: str) -> int:
    token = token.strip()
    try:
        return int(float(token))
    except ValueError:
        pass
    iso = token.replace("Z", "+00:00")
    dt = datetime.fromisoformat(iso)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_checkins(
    path: str | Path,
    fmt: str = "generic-csv",
    column_map: dict | None = None,
) -> list[CheckInRecord]:
    """Parse a raw check-in file into records sorted by (user, t).

    Malformed lines and out-of-range coordinates are rejected and counted;
    a single summary warning reports the totals. Non-integer user/location
    ids are mapped to integers by sorted order of the raw ids.
    """
    path = Path(path)
    if fmt not in FORMAT_COLUMNS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {sorted(FORMAT_COLUMNS)}")
    cols = dict(FORMAT_COLUMNS[fmt])
    if column_map:
        cols.update(column_map)
    delim = cols["delimiter"]

    raw_rows: list[tuple[str, int, float, float, str, str]] = []
    n_malformed = 0
    n_out_of_range = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if cols["header"] and lineno == 0:
                continue
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(delim)
            try:
                user_tok = parts[cols["user"]].strip()
                lid_tok = parts[cols["lid"]].strip()
                t = _parse_time(parts[cols["time"]])
                lat = float(parts[cols["lat"]])
                lon = float(parts[cols["lon"]])
                cat = ""
                if cols["cat"] is not None and cols["cat"] < len(parts):
                    cat = parts[cols["cat"]].strip()
            except (IndexError, ValueError):
                n_malformed += 1
                logger.debug("malformed line %d: %r", lineno + 1, line)
                continue
            if not (-90.0 < lat < 90.0) or not (-180.0 < lon < 180.0):
                n_out_of_range += 1
                logger.debug("out-of-range coordinates on line %d: lat=%s lon=%s", lineno + 1, lat, lon)
                continue
            raw_rows.append((user_tok, t, lat, lon, lid_tok, cat))

    user_map = _int_id_map(row[0] for row in raw_rows)
    lid_map = _int_id_map(row[4] for row in raw_rows)

    records = [
        CheckInRecord(user=user_map[u], lid=lid_map[lid], lon=lon, lat=lat, t=t, cat=cat)
        for (u, t, lat, lon, lid, cat) in raw_rows
    ]
    records.sort(key=lambda r: (r.user, r.t))
    if n_malformed or n_out_of_range:
        logger.warning(
            "%s: rejected %d malformed line(s) and %d record(s) with out-of-range coordinates",
            path.name,
            n_malformed,
            n_out_of_range,
        )
    return records


def _int_id_map(tokens: Iterable[str]) -> dict[str, int]:
    uniq = sorted(set(tokens))
    try:
        return {tok: int(tok) for tok in uniq}
    except ValueError:
        return {tok: i for i, tok in enumerate(uniq)}


# ---------------------------------------------------------------------------
# Filtering and segmentation
# ---------------------------------------------------------------------------


def filter_and_segment(
    records: Sequence[CheckInRecord],
    min_user_records: int = 10,
    min_loc_visits: int = 10,
    history_days: float = 120.0,
    gap_hours: float = 24.0,
) -> list[CheckInSequence]:
    """Filter sparse users/locations and cut user streams into sequences.

    The user filter (>= min_user_records), location filter (>= min_loc_visits),
    per-user truncation to the most recent ``history_days`` and the drop of
    sequences shorter than 2 all remove records, so the whole pipeline is
    iterated to a fixed point; the result is therefore idempotent.
    Sequences are cut wherever consecutive events are more than
    ``gap_hours`` apart.
    """
    current = list(records)
    while True:
        survivors = _filter_pass(current, min_user_records, min_loc_visits, history_days)
        sequences = _segment(survivors, gap_hours)
        flattened = [r for seq in sequences for r in seq.records]
        if len(flattened) == len(current):
            return sequences
        current = flattened


def _filter_pass(
    records: list[CheckInRecord],
    min_user_records: int,
    min_loc_visits: int,
    history_days: float,
) -> list[CheckInRecord]:
    current = records
    # User/location thresholds interact, so iterate the pair to a fixed point
    # before truncating histories.
    while True:
        user_counts: dict[int, int] = {}
        for r in current:
            user_counts[r.user] = user_counts.get(r.user, 0) + 1
        kept = [r for r in current if user_counts[r.user] >= min_user_records]

        loc_counts: dict[int, int] = {}
        for r in kept:
            loc_counts[r.lid] = loc_counts.get(r.lid, 0) + 1
        kept = [r for r in kept if loc_counts[r.lid] >= min_loc_visits]

        if len(kept) == len(current):
            break
        current = kept

    horizon = history_days * SECONDS_PER_DAY
    last_t: dict[int, int] = {}
    for r in current:
        last_t[r.user] = max(last_t.get(r.user, r.t), r.t)
    return [r for r in current if r.t >= last_t[r.user] - horizon]


def _segment(records: list[CheckInRecord], gap_hours: float) -> list[CheckInSequence]:
    gap = gap_hours * SECONDS_PER_HOUR
    by_user: dict[int, list[CheckInRecord]] = {}
    for r in records:
        by_user.setdefault(r.user, []).append(r)

    sequences = []
    for user in sorted(by_user):
        stream = sorted(by_user[user], key=lambda r: r.t)
        chunk = [stream[0]]
        for prev, cur in zip(stream, stream[1:]):
            if cur.t - prev.t > gap:
                if len(chunk) >= 2:
                    sequences.append(CheckInSequence(user=user, records=tuple(chunk)))
                chunk = [cur]
            else:
                chunk.append(cur)
        if len(chunk) >= 2:
            sequences.append(CheckInSequence(user=user, records=tuple(chunk)))
    return sequences


# ---------------------------------------------------------------------------
# Bundle assembly
# ---------------------------------------------------------------------------


def _split_counts(n: int, ratio: tuple[int, int, int]) -> tuple[int, int, int]:
    total = sum(ratio)
    n_train = max(1, int(n * ratio[0] / total))
    n_val = int(n * ratio[1] / total)
    if n_train + n_val > n:
        n_val = n - n_train
    return n_train, n_val, n - n_train - n_val


def build_bundle(
    sequences: Sequence[CheckInSequence],
    social_edges: Iterable[tuple[int, int]] | None = None,
    colocation_min_shared: int = 3,
    tz_offset_hours: float = 0.0,
    split_ratio: tuple[int, int, int] = (6, 2, 2),
    filter_params: dict | None = None,
) -> DatasetBundle:
    """Split sequences chronologically per user and derive shared artifacts.

    Vocabularies and the log inter-event time statistics come from the train
    split only; unseen test locations fall back to the UNK index. The social
    graph uses the provided friendship edges, or a co-location graph
    (users sharing >= ``colocation_min_shared`` distinct train locations)
    when none are given.
    """
    if not sequences:
        raise ValueError("cannot build a bundle from zero sequences")

    by_user: dict[int, list[CheckInSequence]] = {}
    for seq in sequences:
        by_user.setdefault(seq.user, []).append(seq)

    train: list[CheckInSequence] = []
    val: list[CheckInSequence] = []
    test: list[CheckInSequence] = []
    for user in sorted(by_user):
        seqs = sorted(by_user[user], key=lambda s: (s.start_t, s.end_t))
        n_train, n_val, _ = _split_counts(len(seqs), split_ratio)
        train.extend(seqs[:n_train])
        val.extend(seqs[n_train : n_train + n_val])
        test.extend(seqs[n_train + n_val :])

    user_vocab = Vocab((s.user for s in sequences), with_unk=False)
    loc_vocab = Vocab((r.lid for s in train for r in s.records), with_unk=True)
    cat_vocab = Vocab((r.cat for s in train for r in s.records), with_unk=True)

    log_dts = []
    for seq in train:
        for a, b in zip(seq.records, seq.records[1:]):
            dt = b.t - a.t
            if dt > 0:
                log_dts.append(math.log(dt))
    if log_dts:
        mean = sum(log_dts) / len(log_dts)
        var = sum((x - mean) ** 2 for x in log_dts) / len(log_dts)
        std = math.sqrt(var)
    else:
        logger.warning("no positive train inter-event times; using mean=0, std=1")
        mean, std = 0.0, 1.0
    if std <= 0.0:
        logger.warning("degenerate inter-event time std (all gaps equal); substituting std=1")
        std = 1.0

    if social_edges is not None:
        graph = SocialGraph(social_edges)
    else:
        graph = _colocation_graph(train, colocation_min_shared)
    graph.ensure_nodes(s.user for s in sequences)

    return DatasetBundle(
        train=train,
        val=val,
        test=test,
        user_vocab=user_vocab,
        loc_vocab=loc_vocab,
        cat_vocab=cat_vocab,
        graph=graph,
        log_dt_mean=mean,
        log_dt_std=std,
        tz_offset_hours=tz_offset_hours,
        filter_params=dict(filter_params or {}),
    )


def _colocation_graph(train: Sequence[CheckInSequence], min_shared: int) -> SocialGraph:
    locs_by_user: dict[int, set[int]] = {}
    for seq in train:
        locs_by_user.setdefault(seq.user, set()).update(r.lid for r in seq.records)
    users = sorted(locs_by_user)
    edges = []
    for i, u in enumerate(users):
        for v in users[i + 1 :]:
            if len(locs_by_user[u] & locs_by_user[v]) >= min_shared:
                edges.append((u, v))
    return SocialGraph(edges)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

BUNDLE_VERSION = 1
_SPLIT_FILES = {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"}


def save_bundle(bundle: DatasetBundle, out_dir: str | Path) -> Path:
    """Write a bundle as one JSONL file per split plus a JSON manifest.

    Output is deterministic byte-for-byte for identical inputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cats = sorted({r.cat for split in (bundle.train, bundle.val, bundle.test) for s in split for r in s.records})
    cat_index = {c: i for i, c in enumerate(cats)}

    for name, seqs in (("train", bundle.train), ("val", bundle.val), ("test", bundle.test)):
        with (out_dir / _SPLIT_FILES[name]).open("w", encoding="utf-8") as fh:
            for seq in seqs:
                row = {
                    "user": seq.user,
                    "t": [r.t for r in seq.records],
                    "lid": [r.lid for r in seq.records],
                    "lat": [r.lat for r in seq.records],
                    "lon": [r.lon for r in seq.records],
                    "cat": [cat_index[r.cat] for r in seq.records],
                }
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")

    manifest = {
        "version": BUNDLE_VERSION,
        "users": list(bundle.user_vocab.ids),
        "locations": list(bundle.loc_vocab.ids),
        "categories_vocab": list(bundle.cat_vocab.ids),
        "category_strings": cats,
        "social_edges": bundle.graph.edges(),
        "log_dt_mean": bundle.log_dt_mean,
        "log_dt_std": bundle.log_dt_std,
        "tz_offset_hours": bundle.tz_offset_hours,
        "filter_params": bundle.filter_params,
        "counts": {
            "users": len(bundle.user_vocab.ids),
            "locations": len(bundle.loc_vocab.ids),
            "checkins": sum(len(s) for s in bundle.all_sequences()),
            "sequences": {"train": len(bundle.train), "val": len(bundle.val), "test": len(bundle.test)},
        },
    }
    with (out_dir / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return out_dir


def load_bundle(in_dir: str | Path) -> DatasetBundle:
    in_dir = Path(in_dir)
    with (in_dir / "manifest.json").open("r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {manifest.get('version')!r}")

    cats = manifest["category_strings"]
    splits: dict[str, list[CheckInSequence]] = {}
    for name, fname in _SPLIT_FILES.items():
        seqs = []
        with (in_dir / fname).open("r", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                recs = tuple(
                    CheckInRecord(
                        user=row["user"],
                        lid=lid,
                        lon=lon,
                        lat=lat,
                        t=t,
                        cat=cats[ci],
                    )
                    for t, lid, lat, lon, ci in zip(row["t"], row["lid"], row["lat"], row["lon"], row["cat"])
                )
                seqs.append(CheckInSequence(user=row["user"], records=recs))
        splits[name] = seqs

    all_seqs = splits["train"] + splits["val"] + splits["test"]
    user_vocab = Vocab(manifest["users"], with_unk=False)
    loc_vocab = Vocab(manifest["locations"], with_unk=True)
    cat_vocab = Vocab(manifest["categories_vocab"], with_unk=True)
    graph = SocialGraph(tuple(e) for e in manifest["social_edges"])
    graph.ensure_nodes(s.user for s in all_seqs)
    return DatasetBundle(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        user_vocab=user_vocab,
        loc_vocab=loc_vocab,
        cat_vocab=cat_vocab,
        graph=graph,
        log_dt_mean=manifest["log_dt_mean"],
        log_dt_std=manifest["log_dt_std"],
        tz_offset_hours=manifest["tz_offset_hours"],
        filter_params=manifest["filter_params"],
    )
