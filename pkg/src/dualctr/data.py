"""Training datasets, line-delimited record files and the R6B log adapter.

Every file written here is JSON Lines. The first line is a header object
(``format``, ``version``, ``spec_hash``, ``seed``, ``fields``, ``columns``);
each following line is one record whose keys appear in ``columns`` order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .mapping import FieldSpec, SparseBatch, SparseFeature

FORMAT_VERSION = 1
LOG_FORMAT = "dualctr-log"
DATASET_FORMAT = "dualctr-dataset"
TRAJECTORY_FORMAT = "dualctr-trajectory"

LOG_COLUMNS = ["round", "context", "candidates", "displayed", "click"]
DATASET_COLUMNS = ["x", "y"]
TRAJECTORY_COLUMNS = ["round", "user", "context", "candidates", "winner", "click", "bid",
                      "true_ctr", "regret"]


class MalformedLogEntry(ValueError):
    pass


@dataclass(frozen=True)
class AdCandidate:
    ad_id: int
    features: SparseFeature
    bid: float = 1.0

    def __post_init__(self):
        if self.bid < 0:
            raise ValueError("bid must be >= 0")


def ad_candidate(ad_id, bid=1.0, ad_field="ad"):
    return AdCandidate(int(ad_id), SparseFeature({ad_field: (int(ad_id),)}), float(bid))


@dataclass
class LogEntry:
    context: SparseFeature
    candidates: list
    displayed: int
    click: int
    round: int = 0

    def __post_init__(self):
        if self.click not in (0, 1):
            raise MalformedLogEntry(f"click must be 0 or 1, got {self.click!r}")
        if not self.candidates:
            raise MalformedLogEntry("empty candidate set")
        if self.displayed not in {c.ad_id for c in self.candidates}:
            raise MalformedLogEntry(f"displayed ad {self.displayed} is not a candidate")

    def displayed_candidate(self):
        return next(c for c in self.candidates if c.ad_id == self.displayed)


class Dataset:
    """Growing list of (feature, label) pairs with a lazily rebuilt batch."""

    def __init__(self, fields):
        self.fields = list(fields)
        self.features = []
        self.labels = []
        self._batch = None
        self._built = 0

    def __len__(self):
        return len(self.labels)

    def add(self, x, y):
        self.features.append(x)
        self.labels.append(int(y))

    def batch(self):
        if self._batch is None:
            if self.features:
                self._batch = SparseBatch.from_features(self.features, self.fields)
                self._built = len(self.features)
        elif self._built < len(self.features):
            new = SparseBatch.from_features(self.features[self._built:], self.fields)
            self._batch = SparseBatch.concat([self._batch, new])
            self._built = len(self.features)
        return self._batch

    def y(self):
        return np.asarray(self.labels, dtype=np.float64)


def spec_hash(obj):
    """Short stable digest of a JSON-able description."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def header(fmt, fields, columns, seed=None, spec=None, **extra):
    h = {"format": fmt, "version": FORMAT_VERSION, "spec_hash": spec_hash(spec) if spec is not None else None,
         "seed": seed, "fields": [[f.name, f.vocab] for f in fields], "columns": list(columns)}
    h.update(extra)
    return h


def dumps(obj):
    return json.dumps(obj, separators=(",", ":"))


def write_jsonl(path, head, records):
    with open(path, "w") as fh:
        fh.write(dumps(head) + "\n")
        for r in records:
            fh.write(dumps(r) + "\n")


def read_jsonl(path, fmt=None):
    """Returns ``(header, iterator over records)``."""
    fh = open(path)
    first = fh.readline()
    try:
        head = json.loads(first)
    except json.JSONDecodeError as e:
        fh.close()
        raise MalformedLogEntry(f"{path}: bad header line") from e
    if fmt is not None and head.get("format") != fmt:
        fh.close()
        raise MalformedLogEntry(f"{path}: expected format {fmt}, got {head.get('format')}")

    def gen():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if line.strip():
                    try:
                        yield json.loads(line)
                    except json.JSONDecodeError as e:
                        raise MalformedLogEntry(f"{path}:{lineno}: {e}") from e

    return head, gen()


def header_fields(head):
    return [FieldSpec(str(n), int(v)) for n, v in head["fields"]]


def log_record(entry):
    return {"round": entry.round, "context": entry.context.to_json(),
            "candidates": [[c.ad_id, c.bid] for c in entry.candidates],
            "displayed": entry.displayed, "click": entry.click}


def parse_log_record(rec, ad_field="ad"):
    try:
        cands = [ad_candidate(i, b, ad_field) for i, b in rec["candidates"]]
        return LogEntry(SparseFeature.from_json(rec["context"]), cands, int(rec["displayed"]),
                        int(rec["click"]), int(rec.get("round", 0)))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, MalformedLogEntry):
            raise
        raise MalformedLogEntry(f"bad log record: {e}") from e


def write_log(path, entries, fields, seed=None, spec=None, ad_field="ad"):
    write_jsonl(path, header(LOG_FORMAT, fields, LOG_COLUMNS, seed, spec, ad_field=ad_field),
                (log_record(e) for e in entries))


def read_log(path):
    """Returns ``(header, iterator of LogEntry)``; the log is streamed."""
    head, recs = read_jsonl(path, LOG_FORMAT)
    ad_field = head.get("ad_field", "ad")
    return head, (parse_log_record(r, ad_field) for r in recs)


def write_dataset(path, features, labels, fields, seed=None, spec=None):
    write_jsonl(path, header(DATASET_FORMAT, fields, DATASET_COLUMNS, seed, spec),
                ({"x": x.to_json(), "y": int(y)} for x, y in zip(features, labels)))


def read_dataset(path):
    head, recs = read_jsonl(path, DATASET_FORMAT)
    feats, labels = [], []
    for r in recs:
        feats.append(SparseFeature.from_json(r["x"]))
        labels.append(int(r["y"]))
    return header_fields(head), feats, np.asarray(labels)


R6B_USER_DIM = 136


def read_r6b(lines, max_ads=1024, user_field="user", ad_field="ad"):
    """Adapter for the public R6B text format.

    Each line reads ``<timestamp> <displayed-id> <click> |user <f> <f> ... |<id> |<id> ...``
    with 1-based user feature indices in ``[1, 136]``. Article ids are mapped to
    dense indices in order of first appearance. Yields :class:`LogEntry`.
    """
    ids = {}

    def dense(tok):
        if tok not in ids:
            if len(ids) >= max_ads:
                raise MalformedLogEntry(f"more than {max_ads} distinct articles")
            ids[tok] = len(ids)
        return ids[tok]

    for lineno, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("|")]
        head = parts[0].split()
        if len(head) < 3 or len(parts) < 3:
            raise MalformedLogEntry(f"line {lineno}: expected '<ts> <id> <click> |user ... |<id> ...'")
        shown, click = head[1], int(head[2])
        user_toks = parts[1].split()
        if not user_toks or user_toks[0] != "user":
            raise MalformedLogEntry(f"line {lineno}: missing user block")
        feats = sorted({int(t) - 1 for t in user_toks[1:]})
        if any(f < 0 or f >= R6B_USER_DIM for f in feats):
            raise MalformedLogEntry(f"line {lineno}: user feature outside [1, {R6B_USER_DIM}]")
        cands = [ad_candidate(dense(p.split()[0]), 1.0, ad_field) for p in parts[2:] if p]
        ctx = SparseFeature({user_field: feats or (0,)})
        yield LogEntry(ctx, cands, dense(shown), click, lineno)


def r6b_fields(max_ads=1024):
    return [FieldSpec("user", R6B_USER_DIM), FieldSpec("ad", max_ads)]


def sanity_task(n, rng, n_users=40, n_items=20, margin=0.25):
    """Separable two-field classification task.

    Each user and item carries a latent score; the label is 1 iff their sum is
    positive. Pairs whose |sum| falls below ``margin`` are resampled so the
    classes are cleanly separated.
    """
    u_score = rng.normal(size=n_users)
    i_score = rng.normal(size=n_items)
    feats, labels = [], []
    while len(labels) < n:
        u = int(rng.integers(n_users))
        i = int(rng.integers(n_items))
        s = u_score[u] + i_score[i]
        if abs(s) < margin:
            continue
        feats.append(SparseFeature(user=(u,), item=(i,)))
        labels.append(int(s > 0))
    fields = [FieldSpec("user", n_users), FieldSpec("item", n_items)]
    return fields, feats, np.asarray(labels)
