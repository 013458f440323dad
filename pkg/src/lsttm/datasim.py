"""Synthetic multi-source interaction logs with drifting hourly hot topics.

Every user and item has a static latent vector.  A global hot-topic vector moves
hour by hour.  An internal impression of item ``i`` to user ``u`` in hour ``h``
is clicked with probability

    sigmoid(a * <u, i> + b * <hot_h, i> + base_logit + noise * N(0, 1))

External rows are clicks only, drawn over the external item set from the same
latent space without the hot-topic term, so they carry long-term preference
signal but no trend.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .graphstore import EXTERNAL, INTERNAL, ContextFeatures, EventRecord

SCHEMA_VERSION = 1
SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400
COLUMNS = ("user", "item", "ts", "source", "label", "hour", "position", "dwell")
SOURCES = (INTERNAL, EXTERNAL)

USER_FIELD_VOCAB = (8, 2, 16, 32, 64, 128)
ITEM_FIELD_VOCAB = (8, 16, 32, 64, 128, 256)


@dataclass(frozen=True)
class SimConfig:
    n_users: int = 2000
    n_internal_items: int = 500
    n_external_items: int = 1500
    days: int = 9
    internal_per_user_day: float = 40.0
    external_per_user_day: float = 60.0
    latent_dim: int = 8
    drift: float = 0.3
    pref_weight: float = 2.0
    hot_weight: float = 2.0
    base_logit: float = -1.0
    noise: float = 0.5
    n_positions: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_internal_items", "n_external_items", "days", "latent_dim", "n_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.drift <= 1.0:
            raise ValueError("drift must lie in [0, 1]")
        if self.noise < 0 or self.internal_per_user_day < 0 or self.external_per_user_day < 0:
            raise ValueError("rates and noise must be non-negative")

    @property
    def n_items(self) -> int:
        return self.n_internal_items + self.n_external_items


# ---------------------------------------------------------------------------
# key=value configs shared by every command


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(tp: Any, text: str):
    if tp in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp in (int, "int"):
        return int(text)
    if tp in (float, "float"):
        return float(text)
    if tp in ("tuple[int, ...]",):
        return tuple(int(x) for x in text.replace(",", " ").split())
    return text


def from_kv(cls, values: dict[str, str], **overrides):
    """Build dataclass ``cls`` from the subset of ``values`` naming its fields."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            kwargs[f.name] = _coerce(f.type, values[f.name])
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def to_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entity feature fields


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def entity_fields(kind: str, ids, vocab: tuple[int, ...]) -> np.ndarray:
    """Six categorical field values per entity, derived from id hashes."""
    ids = np.asarray(ids, dtype=np.uint64)
    salt = np.uint64(0x5555 if kind == "user" else 0xAAAA)
    cols = []
    for f, size in enumerate(vocab):
        with np.errstate(over="ignore"):
            key = ids * np.uint64(8) + np.uint64(f) + (salt << np.uint64(40))
        cols.append((_splitmix64(key) % np.uint64(size)).astype(np.int64))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# event log


@dataclass
class EventLog:
    """Columnar event rows sorted by timestamp, plus the vocabulary header."""

    header: dict
    user: np.ndarray
    item: np.ndarray
    ts: np.ndarray
    source: np.ndarray  # 0 internal, 1 external
    label: np.ndarray
    hour: np.ndarray
    position: np.ndarray
    dwell: np.ndarray

    def __len__(self) -> int:
        return len(self.ts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventLog) or self.header != other.header:
            return False
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in _ARRAYS)

    @classmethod
    def empty(cls, header: dict) -> EventLog:
        return cls(header, *(np.zeros(0, dtype=np.int64) for _ in _ARRAYS))

    def take(self, mask_or_index) -> EventLog:
        return EventLog(self.header, *(getattr(self, c)[mask_or_index] for c in _ARRAYS))

    @property
    def day(self) -> np.ndarray:
        return self.ts // SECONDS_PER_DAY

    @property
    def global_hour(self) -> np.ndarray:
        return self.ts // SECONDS_PER_HOUR

    def records(self) -> Iterator[EventRecord]:
        for row in zip(*(getattr(self, c).tolist() for c in _ARRAYS)):
            u, d, t, s, y, h, p, w = row
            yield EventRecord(u, d, t, SOURCES[s], bool(y), ContextFeatures(h, p), float(w))

    def __iter__(self) -> Iterator[EventRecord]:
        return self.records()


_ARRAYS = ("user", "item", "ts", "source", "label", "hour", "position", "dwell")


def make_header(config: SimConfig) -> dict:
    return {
        "n_users": config.n_users,
        "n_internal_items": config.n_internal_items,
        "n_external_items": config.n_external_items,
        "n_positions": config.n_positions,
        "user_fields": list(USER_FIELD_VOCAB),
        "item_fields": list(ITEM_FIELD_VOCAB),
    }


def from_records(records, header: dict) -> EventLog:
    rows = sorted(records, key=lambda r: r.timestamp)
    if not rows:
        return EventLog.empty(header)
    cols = list(zip(*(
        (r.user, r.item, r.timestamp, SOURCES.index(r.source), int(r.clicked), r.context.hour, r.context.position, int(r.dwell))
        for r in rows
    )))
    return EventLog(header, *(np.asarray(c, dtype=np.int64) for c in cols))


def hot_topics(config: SimConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Hot-topic vector per global hour: a stationary mean-reverting random walk."""
    rng = rng if rng is not None else np.random.default_rng([config.seed, 1])
    scale = 1.0 / np.sqrt(config.latent_dim)
    n = config.days * 24
    out = np.empty((n, config.latent_dim))
    out[0] = rng.normal(0.0, scale, config.latent_dim)
    keep = np.sqrt(1.0 - config.drift**2)
    steps = rng.normal(0.0, scale, (n, config.latent_dim))
    for h in range(1, n):
        out[h] = keep * out[h - 1] + config.drift * steps[h]
    return out


def latents(config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([config.seed, 0])
    scale = 1.0 / np.sqrt(config.latent_dim)
    users = rng.normal(0.0, scale, (config.n_users, config.latent_dim))
    items = rng.normal(0.0, scale, (config.n_items, config.latent_dim))
    return users, items


def click_logit(config: SimConfig, user_vec, item_vec, hot_vec) -> np.ndarray:
    return (
        config.pref_weight * np.einsum("...k,...k->...", user_vec, item_vec)
        + config.hot_weight * np.einsum("...k,...k->...", hot_vec, item_vec)
        + config.base_logit
    )


def generate(config: SimConfig) -> EventLog:
    """Draw an event log; a pure function of ``config``."""
    users, items = latents(config)
    hot = hot_topics(config)
    rng = np.random.default_rng([config.seed, 2])
    n_hours = config.days * 24

    def impressions(rate_per_day: float):
        counts = rng.poisson(rate_per_day / 24.0, size=(n_hours, config.n_users))
        hours = np.repeat(np.arange(n_hours), counts.sum(axis=1))
        who = np.concatenate([np.repeat(np.arange(config.n_users), c) for c in counts]) if len(hours) else hours
        return hours, who.astype(np.int64)

    ih, iu = impressions(config.internal_per_user_day)
    ii = rng.integers(0, config.n_internal_items, size=len(ih))
    logit = click_logit(config, users[iu], items[ii], hot[ih]) + config.noise * rng.normal(size=len(ih))
    iy = (rng.random(len(ih)) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)

    eh, eu = impressions(config.external_per_user_day)
    ei = config.n_internal_items + rng.integers(0, config.n_external_items, size=len(eh))
    elogit = (
        config.pref_weight * np.einsum("nk,nk->n", users[eu], items[ei])
        + config.base_logit
        + config.noise * rng.normal(size=len(eh))
    )
    keep = rng.random(len(eh)) < 1.0 / (1.0 + np.exp(-elogit))
    eh, eu, ei = eh[keep], eu[keep], ei[keep]

    hours = np.concatenate([ih, eh])
    n = len(hours)
    ts = hours * SECONDS_PER_HOUR + rng.integers(0, SECONDS_PER_HOUR, size=n)
    source = np.concatenate([np.zeros(len(ih), np.int64), np.ones(len(eh), np.int64)])
    label = np.concatenate([iy, np.ones(len(eh), np.int64)])
    position = rng.integers(0, config.n_positions, size=n)
    dwell = np.where(label == 1, 1 + rng.exponential(60.0, size=n).astype(np.int64), 0)
    user = np.concatenate([iu, eu])
    item = np.concatenate([ii, ei]).astype(np.int64)
    order = np.lexsort((item, user, ts))
    return EventLog(
        make_header(config),
        user[order],
        item[order],
        ts[order],
        source[order],
        label[order],
        (hours % 24)[order],
        position[order],
        dwell[order].astype(np.int64),
    )


# ---------------------------------------------------------------------------
# file format


class LogFormatError(ValueError):
    pass


def store(log: EventLog, path: str | os.PathLike) -> None:
    """Write ``log`` atomically; a failed write leaves no file behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    cols = [getattr(log, c).tolist() for c in _ARRAYS]
    try:
        with open(tmp, "w", encoding="ascii", newline="\n") as fh:
            fh.write(f"#lsttm-events\t{SCHEMA_VERSION}\n")
            fh.write("#vocab\t" + json.dumps(log.header, sort_keys=True) + "\n")
            fh.write("\t".join(COLUMNS) + "\n")
            for u, d, t, s, y, h, p, w in zip(*cols):
                fh.write(f"{u}\t{d}\t{t}\t{SOURCES[s]}\t{y}\t{h}\t{p}\t{w}\n")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load(path: str | os.PathLike) -> EventLog:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 3:
        raise LogFormatError(f"{path}: truncated header")
    magic = lines[0].split("\t")
    if magic[0] != "#lsttm-events" or len(magic) != 2 or magic[1] != str(SCHEMA_VERSION):
        raise LogFormatError(f"{path}:1: not an event log (schema {SCHEMA_VERSION})")
    if not lines[1].startswith("#vocab\t"):
        raise LogFormatError(f"{path}:2: missing vocabulary header")
    header = json.loads(lines[1].split("\t", 1)[1])
    if tuple(lines[2].split("\t")) != COLUMNS:
        raise LogFormatError(f"{path}:3: unexpected columns")
    body = lines[3:]
    rows = _parse_fast(body)
    if rows is not None and _valid(rows, header):
        return _from_rows(header, rows)
    return _from_rows(header, _parse_checked(body, header, path))


def _from_rows(header: dict, rows: np.ndarray) -> EventLog:
    return EventLog(header, *(np.ascontiguousarray(rows[:, j]) for j in range(len(COLUMNS))))


def _parse_fast(body: list[str]) -> np.ndarray | None:
    if not body:
        return np.zeros((0, len(COLUMNS)), dtype=np.int64)
    text = "\n".join(body).replace("\tinternal\t", "\t0\t").replace("\texternal\t", "\t1\t")
    if not text.replace("\t", "").replace("\n", "").isdigit():
        return None
    if text.count("\t") != len(body) * (len(COLUMNS) - 1):
        return None
    flat = np.array(text.split(), dtype=np.int64)
    return flat.reshape(len(body), len(COLUMNS))


def _valid(rows: np.ndarray, header: dict) -> bool:
    n_items = header["n_internal_items"] + header["n_external_items"]
    u, d, t, s, y, h, p, w = rows.T
    return bool(
        np.all((u < header["n_users"]) & (d < n_items) & (s <= 1) & (y <= 1) & (h <= 23)
               & (p < header["n_positions"]) & ((s == 0) | (y == 1)))
        and np.all(np.diff(t) >= 0)
    )


def _parse_checked(body: list[str], header: dict, path) -> np.ndarray:
    n_items = header["n_internal_items"] + header["n_external_items"]
    rows = np.empty((len(body), len(COLUMNS)), dtype=np.int64)
    for i, line in enumerate(body):
        lineno = i + 4
        parts = line.split("\t")
        if len(parts) != len(COLUMNS):
            raise LogFormatError(f"{path}:{lineno}: expected {len(COLUMNS)} columns, got {len(parts)}")
        try:
            src = SOURCES.index(parts[3])
        except ValueError:
            raise LogFormatError(f"{path}:{lineno}: unknown source tag {parts[3]!r}") from None
        try:
            u, d, t, y, h, p, w = (int(parts[j]) for j in (0, 1, 2, 4, 5, 6, 7))
        except ValueError:
            raise LogFormatError(f"{path}:{lineno}: non-integer field") from None
        if not (0 <= u < header["n_users"] and 0 <= d < n_items and t >= 0 and y in (0, 1)
                and 0 <= h <= 23 and 0 <= p < header["n_positions"] and w >= 0):
            raise LogFormatError(f"{path}:{lineno}: value out of range")
        if src == 1 and y != 1:
            raise LogFormatError(f"{path}:{lineno}: external rows must be clicks")
        if i and t < rows[i - 1, 2]:
            raise LogFormatError(f"{path}:{lineno}: rows not sorted by timestamp")
        rows[i] = (u, d, t, src, y, h, p, w)
    return rows


def split(log: EventLog, boundary_day: int) -> tuple[EventLog, EventLog]:
    """Rows before ``boundary_day`` for training; the final day's internal rows for test."""
    if len(log) == 0:
        raise ValueError("cannot split an empty log")
    day = log.day
    last = int(day.max())
    if last < boundary_day:
        raise ValueError(f"log ends on day {last}, before boundary {boundary_day}")
    train = log.take(day < boundary_day)
    test = log.take((day == last) & (log.source == 0))
    if len(train) == 0 or len(test) == 0:
        raise ValueError("split produced an empty side")
    return train, test
