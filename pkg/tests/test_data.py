import json

import numpy as np
import pytest

from dualctr import data as dt
from dualctr.mapping import FieldSpec, SparseFeature

FIELDS = [FieldSpec("user", 3), FieldSpec("ad", 4)]


def entry(displayed=1, click=1, rnd=0):
    return dt.LogEntry(SparseFeature(user=(0, 2)), [dt.ad_candidate(i, 1.0 + i) for i in range(3)],
                       displayed, click, rnd)


def test_log_entry_validation():
    with pytest.raises(dt.MalformedLogEntry):
        entry(displayed=7)
    with pytest.raises(dt.MalformedLogEntry):
        entry(click=2)
    with pytest.raises(dt.MalformedLogEntry):
        dt.LogEntry(SparseFeature(user=(0,)), [], 0, 0)
    with pytest.raises(ValueError):
        dt.AdCandidate(0, SparseFeature(ad=(0,)), -1.0)


def test_log_roundtrip_and_field_order(tmp_path):
    path = tmp_path / "log.jsonl"
    entries = [entry(1, 1, 0), entry(2, 0, 1)]
    dt.write_log(path, entries, FIELDS, seed=3, spec={"a": 1})
    lines = path.read_text().splitlines()
    head = json.loads(lines[0])
    assert head["format"] == dt.LOG_FORMAT and head["seed"] == 3 and head["columns"] == dt.LOG_COLUMNS
    assert list(json.loads(lines[1])) == dt.LOG_COLUMNS
    h, it = dt.read_log(path)
    back = list(it)
    assert [(e.displayed, e.click, e.round) for e in back] == [(1, 1, 0), (2, 0, 1)]
    assert back[0].context == entries[0].context and back[0].candidates == entries[0].candidates
    assert dt.header_fields(h) == FIELDS


def test_read_log_rejects_garbage(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("not json\n")
    with pytest.raises(dt.MalformedLogEntry):
        dt.read_log(p)
    dt.write_log(p, [entry()], FIELDS)
    with open(p, "a") as fh:
        fh.write('{"round": 1, "context": {"user": [0]}, "candidates": [[0, 1.0]], "displayed": 5, "click": 0}\n')
    _, it = dt.read_log(p)
    with pytest.raises(dt.MalformedLogEntry):
        list(it)
    dt.write_dataset(p, [SparseFeature(user=(0,))], [1], FIELDS)
    with pytest.raises(dt.MalformedLogEntry):
        dt.read_log(p)


def test_dataset_roundtrip(tmp_path):
    feats = [SparseFeature(user=(i % 3,), ad=(i % 4,)) for i in range(7)]
    labels = [i % 2 for i in range(7)]
    dt.write_dataset(tmp_path / "d.jsonl", feats, labels, FIELDS, seed=1)
    f, x, y = dt.read_dataset(tmp_path / "d.jsonl")
    assert f == FIELDS and x == feats and y.tolist() == labels


def test_dataset_incremental_batch():
    d = dt.Dataset(FIELDS)
    d.add(SparseFeature(user=(0,), ad=(1,)), 1)
    b1 = d.batch()
    d.add(SparseFeature(user=(1, 2), ad=(3,)), 0)
    b2 = d.batch()
    assert b1.n == 1 and b2.n == 2 and d.y().tolist() == [1.0, 0.0]
    assert b2.idx["user"].shape == (2, 2)


def test_spec_hash_stable():
    assert dt.spec_hash({"b": 1, "a": [1, 2]}) == dt.spec_hash({"a": [1, 2], "b": 1})
    assert dt.spec_hash({"a": 1}) != dt.spec_hash({"a": 2})


def test_r6b_adapter():
    lines = [
        "1317513291 id-560620 0 |user 1 9 11 13 23 16 18 17 19 15 43 14 39 30 66 50 27 104 20 |id-552077 |id-555224 |id-560620",
        "",
        "1317513292 id-555224 1 |user 1 136 |id-555224 |id-552077",
    ]
    out = list(dt.read_r6b(lines))
    assert len(out) == 2
    assert out[0].displayed == 2 and out[0].click == 0 and [c.ad_id for c in out[0].candidates] == [0, 1, 2]
    assert out[1].displayed == 1 and out[1].click == 1 and out[1].context.groups["user"] == (0, 135)
    with pytest.raises(dt.MalformedLogEntry):
        list(dt.read_r6b(["1 id-1 0 |user 137 |id-1"]))
    with pytest.raises(dt.MalformedLogEntry):
        list(dt.read_r6b(["1 id-9 0 |user 1 |id-1"]))
    with pytest.raises(dt.MalformedLogEntry):
        list(dt.read_r6b(["garbage"]))


def test_sanity_task_is_separable_and_balanced_enough():
    fields, feats, y = dt.sanity_task(500, np.random.default_rng(0))
    assert len(feats) == 500 and 0.1 < y.mean() < 0.9
    seen = {}
    for x, lab in zip(feats, y):
        seen.setdefault(x, set()).add(int(lab))
    assert all(len(v) == 1 for v in seen.values())
