"""Offline policy evaluation by replay over uniformly logged traffic.

Each log entry offers a candidate set and records the ad that a uniform
logging policy displayed. The evaluated strategy re-ranks the candidates; the
entry counts as a sample only when its choice equals the logged ad, in which
case the logged click is the strategy's feedback. Unmatched entries are
skipped entirely.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, LogEntry, MalformedLogEntry


@dataclass
class ReplayReport:
    matched: int = 0
    total: int = 0
    welfare: float = 0.0
    clicks: int = 0
    ctr_series: list = field(default_factory=list)
    matches_per_ad: Counter = field(default_factory=Counter)
    updates: int = 0
    pretrained: int = 0

    @property
    def ctr(self):
        """Replay CTR estimate: clicks per matched impression."""
        return self.clicks / self.matched if self.matched else float("nan")

    @property
    def match_rate(self):
        return self.matched / self.total if self.total else float("nan")

    def as_dict(self):
        return {"matched": self.matched, "total": self.total, "welfare": self.welfare, "clicks": self.clicks,
                "ctr": self.ctr, "updates": self.updates, "pretrained": self.pretrained,
                "ctr_series": list(self.ctr_series),
                "matches_per_ad": {str(k): v for k, v in sorted(self.matches_per_ad.items())}}


def _check(entry):
    if not isinstance(entry, LogEntry):
        raise MalformedLogEntry(f"expected LogEntry, got {type(entry).__name__}")
    return entry


def replay(entries, strategy, model=None, fields=None, update_every=800, pretrain_first=800, seed=0,
           epochs=1, pretrain_epochs=None, period=None):
    """Replays ``entries`` (any iterable, consumed once) against ``strategy``.

    The first ``pretrain_first`` entries only supply (displayed, click) pairs for
    pretraining and are not replayed. After that every consumed entry ticks the
    update counter; the model is refit on the matched samples every
    ``update_every`` entries. ``period`` sets the CTR-series bucket length in
    consumed entries and defaults to ``update_every``.
    """
    if update_every < 1:
        raise ValueError("update_every must be >= 1")
    if pretrain_first < 0:
        raise ValueError("pretrain_first must be >= 0")
    period = period or update_every
    ss = np.random.SeedSequence(seed)
    decide_rng, train_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    if model is not None:
        fields = fields or model.fields
    data = Dataset(fields) if model is not None else None
    report = ReplayReport()
    it = iter(entries)

    warm = Dataset(fields) if model is not None else None
    for _ in range(pretrain_first):
        e = next(it, None)
        if e is None:
            break
        e = _check(e)
        report.pretrained += 1
        if warm is not None:
            warm.add(e.context + e.displayed_candidate().features, e.click)
    if model is not None and len(warm):
        model.fit(warm.batch(), warm.y(), train_rng, pretrain_epochs if pretrain_epochs is not None else epochs)
        report.updates += 1
        # pretraining pairs stay in the training set for later refits
        data = warm

    consumed = 0
    p_clicks = p_matched = 0
    for e in it:
        e = _check(e)
        consumed += 1
        report.total += 1
        dec = strategy.decide(e.candidates, e.context, model, decide_rng)
        if dec.winner == e.displayed:
            cand = e.displayed_candidate()
            report.matched += 1
            report.clicks += e.click
            report.welfare += e.click * cand.bid
            report.matches_per_ad[e.displayed] += 1
            p_clicks += e.click
            p_matched += 1
            if data is not None:
                data.add(e.context + cand.features, e.click)
        if consumed % period == 0:
            report.ctr_series.append(p_clicks / p_matched if p_matched else float("nan"))
            p_clicks = p_matched = 0
        if model is not None and consumed % update_every == 0 and len(data):
            model.fit(data.batch(), data.y(), train_rng, epochs)
            report.updates += 1
    if consumed % period:
        report.ctr_series.append(p_clicks / p_matched if p_matched else float("nan"))
    return report
