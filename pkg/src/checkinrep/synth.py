"""Synthetic check-in generator with planted structure.

Each topic is a geographically distinct pool of POIs plus a daily activity
schedule (intended hours). Users follow one topic on weekdays and one on
weekends; every generated day draws fresh POIs from the day-type topic's
pool (each activity slot has its own sub-pool and a per-user preferred
venue) and event times are the intended hours plus Gaussian jitter, with a
configurable fraction of timestamps corrupted to uniform-random hours.

The generator emits the same raw TSV format the ingestion stage consumes,
plus a ground-truth labels file (topic per sequence, intended hour and
corruption flag per event) for controlled end-to-end evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400

# 2023-01-02 00:00 UTC, a Monday, so day index % 7 >= 5 means weekend.
BASE_EPOCH = 1672617600


@dataclass
class SynthSpec:
    """Knobs of the planted-structure corpus.

    Each topic's daily schedule runs from ``schedule_start + topic_phase * k``
    in steps of ``activity_spacing`` hours; hours wrap modulo 24 within the day.
    """

    num_users: int = 50
    num_topics: int = 4
    pois_per_topic: int = 20
    activities_per_day: int = 4
    days: int = 20
    jitter_std_hours: float = 0.5
    noise_rate: float = 0.1
    preferred_poi_prob: float = 0.5
    schedule_start: float = 7.0
    activity_spacing: float = 3.0
    topic_phase: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_topics < 1 or self.num_users < 1 or self.days < 1:
            raise ValueError("num_users, num_topics and days must all be positive")
        if self.activities_per_day < 2:
            raise ValueError("need at least 2 activities per day to form sequences")
        if self.pois_per_topic < self.activities_per_day:
            raise ValueError(
                f"pois_per_topic={self.pois_per_topic} cannot cover "
                f"{self.activities_per_day} activity sub-pools"
            )
        if self.jitter_std_hours < 0:
            raise ValueError("jitter std must be >= 0")
        if not (0.0 <= self.noise_rate <= 1.0):
            raise ValueError("noise_rate must lie in [0, 1]")


@dataclass
class Topic:
    index: int
    center_lat: float
    center_lon: float
    intended_hours: list[float]
    # activity slot -> list of (lid, lat, lon, category)
    pools: list[list[tuple[int, float, float, str]]] = field(default_factory=list)


@dataclass
class SynthResult:
    checkins_path: Path
    labels_path: Path
    topics: list[Topic]


def _build_topics(spec: SynthSpec, rng: np.random.Generator) -> list[Topic]:
    topics = []
    next_lid = 0
    for k in range(spec.num_topics):
        # Centers far apart so geohash prefixes differ at coarse bits.
        lat = -60.0 + 120.0 * (k + 0.5) / spec.num_topics
        lon = -150.0 + 300.0 * ((k * 7) % spec.num_topics + 0.5) / spec.num_topics
        # Distinct schedules: same spacing, topic-specific phase.
        start = spec.schedule_start + spec.topic_phase * k
        hours = [(start + spec.activity_spacing * i) % 24.0 for i in range(spec.activities_per_day)]
        pools: list[list[tuple[int, float, float, str]]] = [[] for _ in range(spec.activities_per_day)]
        for p in range(spec.pois_per_topic):
            slot = p % spec.activities_per_day
            plat = lat + float(rng.normal(0.0, 0.02))
            plon = lon + float(rng.normal(0.0, 0.02))
            pools[slot].append((next_lid, plat, plon, f"topic{k}_act{slot}"))
            next_lid += 1
        topics.append(Topic(index=k, center_lat=lat, center_lon=lon, intended_hours=hours, pools=pools))
    return topics


def generate(spec: SynthSpec, out_dir: str | Path) -> SynthResult:
    """Write ``checkins.tsv`` (user, time, lat, lon, lid, cat) and
    ``labels.json`` under ``out_dir``; deterministic under the spec seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    topics = _build_topics(spec, rng)
    weekday_topic = rng.integers(0, spec.num_topics, size=spec.num_users)
    weekend_topic = rng.integers(0, spec.num_topics, size=spec.num_users)
    # Per-user preferred venue per (topic, activity): index into the sub-pool.
    preferred = rng.integers(
        0,
        np.iinfo(np.int32).max,
        size=(spec.num_users, spec.num_topics, spec.activities_per_day),
    )

    rows = []
    event_labels = []
    sequence_labels = []
    for u in range(spec.num_users):
        for day in range(spec.days):
            weekend = day % 7 >= 5
            k = int(weekend_topic[u] if weekend else weekday_topic[u])
            topic = topics[k]
            day_start = BASE_EPOCH + day * SECONDS_PER_DAY
            events = []
            for act, intended in enumerate(topic.intended_hours):
                corrupted = bool(rng.random() < spec.noise_rate)
                if corrupted:
                    hour = float(rng.uniform(0.0, 24.0))
                else:
                    hour = (intended + float(rng.normal(0.0, spec.jitter_std_hours))) % 24.0
                pool = topic.pools[act]
                if rng.random() < spec.preferred_poi_prob:
                    lid, plat, plon, cat = pool[int(preferred[u, k, act]) % len(pool)]
                else:
                    lid, plat, plon, cat = pool[int(rng.integers(0, len(pool)))]
                t = day_start + int(round(hour * SECONDS_PER_HOUR))
                events.append((t, lid, plat, plon, cat, intended, hour, corrupted))
            events.sort(key=lambda e: e[0])
            sequence_labels.append({"user": u, "day": day, "topic": k, "weekend": weekend})
            for t, lid, plat, plon, cat, intended, hour, corrupted in events:
                rows.append((u, t, plat, plon, lid, cat))
                event_labels.append(
                    {
                        "user": u,
                        "day": day,
                        "topic": k,
                        "t": t,
                        "lid": lid,
                        "intended_hour": intended,
                        "hour": hour,
                        "corrupted": corrupted,
                    }
                )

    checkins_path = out_dir / "checkins.tsv"
    with checkins_path.open("w", encoding="utf-8") as fh:
        for u, t, lat, lon, lid, cat in rows:
            fh.write(f"{u}\t{t}\t{lat:.6f}\t{lon:.6f}\t{lid}\t{cat}\n")

    labels_path = out_dir / "labels.json"
    with labels_path.open("w", encoding="utf-8") as fh:
        json.dump(
            {
                "spec": spec.__dict__,
                "sequences": sequence_labels,
                "events": event_labels,
                "topics": [
                    {
                        "index": tp.index,
                        "center_lat": tp.center_lat,
                        "center_lon": tp.center_lon,
                        "intended_hours": tp.intended_hours,
                    }
                    for tp in topics
                ],
            },
            fh,
            sort_keys=True,
        )
        fh.write("\n")
    return SynthResult(checkins_path=checkins_path, labels_path=labels_path, topics=topics)


def sequence_topic_lookup(labels_path: str | Path) -> dict[tuple[int, int], int]:
    """(user, day) -> planted topic, for aligning ingested sequences with truth."""
    with Path(labels_path).open("r", encoding="utf-8") as fh:
        labels = json.load(fh)
    return {(s["user"], s["day"]): s["topic"] for s in labels["sequences"]}


def day_of_timestamp(t: int) -> int:
    return (t - BASE_EPOCH) // SECONDS_PER_DAY
