"""Event ingestion and trait aggregation.

Raw log records become validated :class:`Event` objects. A :class:`TraitStore`
keeps every relevant event per subject and evaluates traits at query time, so
late or out-of-order events are handled by construction and the result does not
depend on arrival order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Any, Iterable, Mapping

import numpy as np

__all__ = [
    "Event",
    "IngestError",
    "DynamicTrait",
    "StaticTrait",
    "TraitStore",
    "Column",
    "ContextSchema",
    "ingest_event",
    "read_events",
    "update_traits",
    "build_context",
    "parse_timestamp",
]

AGGREGATORS = ("count", "sum", "mean", "last")

_ALIASES = {"subject": "subject_id", "ts": "timestamp"}
_REQUIRED = ("subject_id", "kind", "timestamp")


class IngestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def parse_timestamp(value) -> datetime:
    """RFC 3339 string to an aware UTC datetime truncated to whole seconds."""
    if not isinstance(value, str):
        raise ValueError("malformed timestamp")
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise ValueError("malformed timestamp") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


@dataclass(frozen=True)
class Event:
    subject_id: str
    kind: str
    timestamp: datetime
    payload: Mapping[str, Any] = field(default_factory=dict)
    extra: Mapping[str, Any] = field(default_factory=dict)

    def sort_key(self) -> tuple:
        return (self.timestamp, self.kind, json.dumps(dict(self.payload), sort_keys=True, default=str))


def ingest_event(raw: Mapping[str, Any], line: int | None = None) -> Event:
    """Validate one decoded log record."""
    if not isinstance(raw, Mapping):
        raise IngestError("record is not an object", line)
    rec = {_ALIASES.get(k, k): v for k, v in raw.items()}
    for name in _REQUIRED:
        if name not in rec or rec[name] in (None, ""):
            raise IngestError(f"missing field: {name}", line)
    try:
        ts = parse_timestamp(rec["timestamp"])
    except ValueError as exc:
        raise IngestError(str(exc), line) from None
    payload = rec.get("payload") or {}
    if not isinstance(payload, Mapping):
        raise IngestError("payload must be an object", line)
    for key, value in payload.items():
        if not isinstance(value, (int, float, bool, str)):
            raise IngestError(f"payload value for {key!r} is not a scalar", line)
        if isinstance(value, float) and not math.isfinite(value):
            raise IngestError(f"payload value for {key!r} is not finite", line)
    extra = {k: v for k, v in rec.items() if k not in _REQUIRED and k != "payload"}
    return Event(str(rec["subject_id"]), str(rec["kind"]), ts, dict(payload), extra)


def read_events(path) -> list[Event]:
    """Parse a line-delimited JSON event log; blank lines are skipped."""
    events = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise IngestError(f"invalid JSON: {exc.msg}", lineno) from None
            events.append(ingest_event(raw, lineno))
    return events


@dataclass(frozen=True)
class DynamicTrait:
    """Windowed aggregate over events of one kind.

    ``field`` names the payload key used by ``sum``, ``mean`` and ``last``.
    """

    name: str
    kind: str
    aggregator: str
    window_days: float
    field: str | None = None

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.aggregator != "count" and not self.field:
            raise ValueError(f"aggregator {self.aggregator!r} needs a payload field")
        if self.window_days <= 0:
            raise ValueError("window must be positive")


@dataclass(frozen=True)
class StaticTrait:
    """Latest value of a payload field on events of one kind, regardless of age."""

    name: str
    kind: str
    field: str


def _numeric(value) -> float | None:
    if isinstance(value, bool):
        return float(value)
    if isinstance(value, (int, float)):
        return float(value)
    return None


class TraitStore:
    def __init__(self, dynamic: Iterable[DynamicTrait] = (), static: Iterable[StaticTrait] = ()):
        self.dynamic = {t.name: t for t in dynamic}
        self.static = {t.name: t for t in static}
        dup = set(self.dynamic) & set(self.static)
        if dup:
            raise ValueError(f"trait names used twice: {sorted(dup)}")
        self._kinds = {t.kind for t in self.dynamic.values()} | {t.kind for t in self.static.values()}
        self.events: dict[str, list[Event]] = {}
        self.last_updated: datetime | None = None

    @property
    def subjects(self) -> list[str]:
        return sorted(self.events)

    def add(self, event: Event) -> bool:
        if event.kind not in self._kinds:
            return False
        bucket = self.events.setdefault(event.subject_id, [])
        bucket.append(event)
        bucket.sort(key=Event.sort_key)
        if self.last_updated is None or event.timestamp > self.last_updated:
            self.last_updated = event.timestamp
        return True

    def static_traits(self, subject_id: str) -> dict[str, Any]:
        return {name: self.value(subject_id, name, None) for name in self.static}

    def value(self, subject_id: str, name: str, now: datetime | None):
        """Trait value at ``now``; ``None`` means missing."""
        if subject_id not in self.events:
            raise KeyError(f"unknown subject: {subject_id}")
        events = self.events[subject_id]
        if name in self.static:
            spec = self.static[name]
            hits = [e for e in events if e.kind == spec.kind and spec.field in e.payload]
            if now is not None:
                hits = [e for e in hits if e.timestamp <= now]
            return hits[-1].payload[spec.field] if hits else None
        if name not in self.dynamic:
            raise KeyError(f"unknown trait: {name}")
        spec = self.dynamic[name]
        if now is None:
            raise ValueError("dynamic traits need a query time")
        start = now - timedelta(days=spec.window_days)
        window = [e for e in events if e.kind == spec.kind and start < e.timestamp <= now]
        if spec.aggregator == "count":
            return len(window)
        values = [_numeric(e.payload.get(spec.field)) for e in window]
        if spec.aggregator == "last":
            present = [e.payload[spec.field] for e in window if spec.field in e.payload]
            return present[-1] if present else None
        values = [v for v in values if v is not None]
        if spec.aggregator == "sum":
            return float(sum(values))
        return float(np.mean(values)) if values else None


def update_traits(store: TraitStore, event: Event) -> TraitStore:
    store.add(event)
    return store


@dataclass(frozen=True)
class Column:
    """One trait in a context schema.

    Missing values are imputed as 0 after standardization; with ``indicator``
    a companion column is 1 when the value was missing.
    """

    trait: str
    mean: float = 0.0
    scale: float = 1.0
    indicator: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale for {self.trait!r} must be positive")


@dataclass(frozen=True)
class ContextSchema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.trait for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("schema trait names must be unique")

    @property
    def dim(self) -> int:
        return sum(2 if c.indicator else 1 for c in self.columns)

    @property
    def names(self) -> list[str]:
        out = []
        for c in self.columns:
            out.append(c.trait)
            if c.indicator:
                out.append(f"{c.trait}_missing")
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextSchema":
        cols = []
        for item in d["columns"]:
            if isinstance(item, str):
                cols.append(Column(item))
            else:
                cols.append(Column(**item))
        return cls(tuple(cols))


def build_context(store: TraitStore, subject_id: str, schema: ContextSchema, now: datetime) -> np.ndarray:
    if subject_id not in store.events:
        raise KeyError(f"unknown subject: {subject_id}")
    out = []
    for col in schema.columns:
        raw = store.value(subject_id, col.trait, now)
        value = _numeric(raw)
        if value is None:
            out.append(0.0)
        else:
            out.append((value - col.mean) / col.scale)
        if col.indicator:
            out.append(1.0 if value is None else 0.0)
    return np.array(out, dtype=float)
