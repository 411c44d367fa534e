"""Synthetic advertising environments with known click-through rates.

An environment draws a context per round, offers the ads that are live at
that round, and answers a displayed ad with a Bernoulli click. True CTRs are
a (context x ad) table; parametric scenarios fill that table from latent
user/ad vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import AdCandidate, Dataset, LogEntry
from .mapping import FieldSpec, SparseFeature


class UnknownAd(KeyError):
    pass


@dataclass
class Ad:
    ad_id: int
    features: SparseFeature
    bid: float = 1.0
    arrival: int = 0
    departure: int | None = None

    def live(self, t):
        return self.arrival <= t and (self.departure is None or t < self.departure)

    def candidate(self):
        return AdCandidate(self.ad_id, self.features, self.bid)


@dataclass
class EnvironmentSpec:
    """Contexts, catalog, true CTR table and traffic shape.

    ``ctr[i, j]`` is the click probability of ad ``j`` shown in context ``i``;
    ad ids equal their catalog position. ``history`` lists seeded
    ``(context_index, ad_id, click)`` samples available before round 0.
    """

    name: str
    fields: list
    contexts: list
    context_probs: np.ndarray
    ads: list
    ctr: np.ndarray
    horizon: int
    candidate_size: int | None = None
    candidate_spread: int = 0
    history: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ctr = np.asarray(self.ctr, dtype=np.float64)
        self.context_probs = np.asarray(self.context_probs, dtype=np.float64)
        if self.ctr.shape != (len(self.contexts), len(self.ads)):
            raise ValueError("ctr table must be (contexts x ads)")
        if np.any(self.ctr < 0) or np.any(self.ctr > 1):
            raise ValueError("true CTRs must lie in [0, 1]")
        if any(a.ad_id != j for j, a in enumerate(self.ads)):
            raise ValueError("ad ids must equal catalog positions")
        if abs(self.context_probs.sum() - 1.0) > 1e-9 or len(self.context_probs) != len(self.contexts):
            raise ValueError("context_probs must be a distribution over contexts")
        self._index = {c: i for i, c in enumerate(self.contexts)}

    def context_index(self, context):
        return self._index[context]

    def true_ctr(self, context, ad_id):
        """CTR lookup by context feature; the signature the oracle strategy expects."""
        return float(self.ctr[self._index[context], ad_id])

    def describe(self):
        return {"name": self.name, "params": self.params, "horizon": self.horizon}


def sample_context(spec, rng, t=0):
    """Returns ``(context_index, context_feature, candidates)`` for round ``t``."""
    i = int(rng.choice(len(spec.contexts), p=spec.context_probs)) if len(spec.contexts) > 1 else 0
    live = [a for a in spec.ads if a.live(t)]
    k = spec.candidate_size
    if k is not None:
        if spec.candidate_spread:
            k = int(rng.integers(k - spec.candidate_spread, k + spec.candidate_spread + 1))
        k = max(1, k)
    if k is not None and k < len(live):
        pick = np.sort(rng.choice(len(live), size=k, replace=False))
        live = [live[j] for j in pick]
    return i, spec.contexts[i], [a.candidate() for a in live]


def feedback(winner, context_index, spec, rng):
    if not 0 <= winner < len(spec.ads):
        raise UnknownAd(winner)
    return int(rng.random() < spec.ctr[context_index, winner])


@dataclass
class Schedule:
    """Refit cadence and budget.

    Each refit runs ``epochs`` passes over the collected data, raised when
    needed so that at least ``min_steps`` mini-batch steps are taken.
    """

    update_every: int = 80
    epochs: int = 1
    pretrain_epochs: int = 20
    min_steps: int = 0

    def __post_init__(self):
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0 or self.min_steps < 0:
            raise ValueError("epochs, pretrain_epochs and min_steps must be >= 0")

    def refit_epochs(self, n, batch_size):
        per_epoch = -(-n // batch_size)
        return max(self.epochs, -(-self.min_steps // per_epoch))


@dataclass
class Trajectory:
    records: list
    welfare: np.ndarray
    regret: np.ndarray
    period_ctr: np.ndarray
    impressions: np.ndarray
    updates: int

    @property
    def total_welfare(self):
        return float(self.welfare[-1]) if len(self.welfare) else 0.0


def streams(seed):
    """Independent generators for traffic, clicks, decisions and training."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def run_loop(spec, strategy, model=None, schedule=None, seed=0, keep_records=True):
    """Play ``spec.horizon`` rounds of decide, observe, and periodic refit.

    Traffic and clicks come from their own streams so different strategies run
    with the same seed see the same contexts and the same click uniforms.
    """
    schedule = schedule or Schedule()
    traffic, clicks, decide_rng, train_rng = streams(seed)
    data = Dataset(spec.fields)
    for ci, ad_id, y in spec.history:
        data.add(spec.contexts[ci] + spec.ads[ad_id].features, y)
    updates = 0
    if model is not None and len(data):
        model.fit(data.batch(), data.y(), train_rng, schedule.pretrain_epochs)
        updates += 1

    T = spec.horizon
    gained = np.zeros(T)
    lost = np.zeros(T)
    impressions = np.zeros(len(spec.ads), dtype=np.int64)
    records = []
    period_clicks, period_n, period_ctr = 0, 0, []
    for t in range(T):
        ci, ctx, cands = sample_context(spec, traffic, t)
        dec = strategy.decide(cands, ctx, model, decide_rng)
        y = feedback(dec.winner, ci, spec, clicks)
        ad = spec.ads[dec.winner]
        ecpm = np.array([spec.ctr[ci, c.ad_id] * c.bid for c in cands])
        regret = float(ecpm.max() - spec.ctr[ci, dec.winner] * ad.bid)
        gained[t] = y * ad.bid
        lost[t] = regret
        impressions[dec.winner] += 1
        period_clicks += y
        period_n += 1
        if keep_records:
            records.append({"round": t, "user": ci, "context": ctx.to_json(),
                            "candidates": [[c.ad_id, c.bid] for c in cands], "winner": dec.winner,
                            "click": y, "bid": ad.bid, "true_ctr": float(spec.ctr[ci, dec.winner]),
                            "regret": regret})
        if model is not None:
            data.add(ctx + ad.features, y)
        if (t + 1) % schedule.update_every == 0:
            period_ctr.append(period_clicks / period_n)
            period_clicks, period_n = 0, 0
            if model is not None:
                epochs = schedule.refit_epochs(len(data), model.config.batch_size)
                model.fit(data.batch(), data.y(), train_rng, epochs)
                updates += 1
    if period_n:
        period_ctr.append(period_clicks / period_n)
    return Trajectory(records, np.cumsum(gained), np.cumsum(lost), np.array(period_ctr), impressions, updates)


def _one_hot_contexts(n, name="user"):
    return [SparseFeature({name: (i,)}) for i in range(n)]


def _ads(n, arrivals=None, bids=None, name="ad"):
    arrivals = arrivals if arrivals is not None else [0] * n
    bids = bids if bids is not None else [1.0] * n
    return [Ad(j, SparseFeature({name: (j,)}), float(bids[j]), int(arrivals[j])) for j in range(n)]


def fig2_scenario(ctrs=(0.3, 0.5, 0.4), horizon=500, misleading=True):
    """Three equally bid ads, one fixed context, and a single negative sample
    for the best ad seeded into the history."""
    ctrs = np.asarray(ctrs, dtype=np.float64)
    best = int(np.argmax(ctrs))
    return EnvironmentSpec(
        name="fig2",
        fields=[FieldSpec("user", 1), FieldSpec("ad", len(ctrs))],
        contexts=_one_hot_contexts(1),
        context_probs=np.ones(1),
        ads=_ads(len(ctrs)),
        ctr=ctrs[None, :],
        horizon=horizon,
        history=[(0, best, 0)] if misleading else [],
        params={"ctrs": ctrs.tolist(), "misleading": misleading},
    )


def cold_start_scenario(rng, n_ads=10, n_users=1, horizon=5000, initial_ads=3, arrive_until=0.5,
                        base_logit=-2.0, ad_scale=1.2, interaction_scale=0.5, latent_dim=2, misleading=2):
    """Several users, ads arriving over time, and a misleading seeded history.

    The first ``initial_ads`` ads are live from round 0; the rest arrive at
    evenly spaced rounds before ``arrive_until * horizon``. The true CTR is
    ``sigmoid(base + b_j + u_i . w_j)`` with a per-ad effect ``b_j`` and a
    low-rank user/ad interaction. Before round 0 each user has ``misleading``
    unclicked impressions of its best initial ad, as in :func:`fig2_scenario`.
    """
    b = rng.normal(scale=ad_scale, size=n_ads)
    U = rng.normal(scale=np.sqrt(interaction_scale), size=(n_users, latent_dim))
    W = rng.normal(scale=np.sqrt(interaction_scale), size=(n_ads, latent_dim))
    ctr = expit(base_logit + b[None, :] + U @ W.T)
    late = n_ads - initial_ads
    arrivals = [0] * initial_ads + [int(round((k + 1) * arrive_until * horizon / (late + 1))) for k in range(late)]
    best = ctr[:, :initial_ads].argmax(axis=1)
    history = [(i, int(best[i]), 0) for i in range(n_users) for _ in range(misleading)]
    return EnvironmentSpec(
        name="cold_start",
        fields=[FieldSpec("user", n_users), FieldSpec("ad", n_ads)],
        contexts=_one_hot_contexts(n_users),
        context_probs=np.full(n_users, 1.0 / n_users),
        ads=_ads(n_ads, arrivals),
        ctr=ctr,
        horizon=horizon,
        history=history,
        params={"n_ads": n_ads, "n_users": n_users, "initial_ads": initial_ads, "arrive_until": arrive_until,
                "base_logit": base_logit, "ad_scale": ad_scale, "interaction_scale": interaction_scale,
                "latent_dim": latent_dim, "misleading": misleading},
    )


def r6b_scenario(rng, n_users=400, n_ads=60, user_dim=136, active_features=6, n_clusters=5,
                 latent_dim=4, candidate_size=38, candidate_spread=0, horizon=20000, base_logit=-2.5):
    """R6B-shaped environment: multi-hot users, many articles, large candidate sets.

    Users belong to latent clusters that decide which feature block they draw
    from; the true CTR is ``sigmoid(base + u_c . w_j + b_j)``.
    """
    if candidate_size > n_ads:
        raise ValueError("candidate_size exceeds the catalog")
    cluster = rng.integers(n_clusters, size=n_users)
    block = user_dim // n_clusters
    contexts, seen = [], set()
    for u in range(n_users):
        while True:
            lo = cluster[u] * block
            own = rng.choice(np.arange(lo, lo + block), size=active_features - 1, replace=False)
            extra = rng.integers(user_dim)
            feats = tuple(sorted({*own.tolist(), int(extra)}))
            if (int(cluster[u]), feats) not in seen:
                seen.add((int(cluster[u]), feats))
                break
        contexts.append(SparseFeature(user=feats))
    U = rng.normal(size=(n_clusters, latent_dim))
    W = rng.normal(scale=0.6, size=(n_ads, latent_dim))
    b = rng.normal(scale=0.5, size=n_ads)
    ctr = expit(base_logit + U[cluster] @ W.T + b)
    uniq = {}
    for i, c in enumerate(contexts):
        uniq.setdefault(c, i)
    keep = sorted(uniq.values())
    contexts = [contexts[i] for i in keep]
    ctr = ctr[keep]
    return EnvironmentSpec(
        name="r6b_synth",
        fields=[FieldSpec("user", user_dim), FieldSpec("ad", n_ads)],
        contexts=contexts,
        context_probs=np.full(len(contexts), 1.0 / len(contexts)),
        ads=_ads(n_ads),
        ctr=ctr,
        horizon=horizon,
        candidate_size=candidate_size,
        candidate_spread=candidate_spread,
        params={"n_users": n_users, "n_ads": n_ads, "user_dim": user_dim, "n_clusters": n_clusters,
                "candidate_size": candidate_size, "base_logit": base_logit},
    )


def synth_r6b_generator(spec, n_entries, seed=0):
    """Uniform-random logging over each candidate set. Yields :class:`LogEntry`."""
    traffic, clicks, pick, _ = streams(seed)
    for t in range(n_entries):
        ci, ctx, cands = sample_context(spec, traffic, t)
        shown = cands[int(pick.integers(len(cands)))].ad_id
        yield LogEntry(ctx, cands, shown, feedback(shown, ci, spec, clicks), t)


def expected_ctr(spec, strategy, model=None, n=20000, seed=0):
    """Monte Carlo of a fixed strategy's true CTR: the average true CTR of the
    displayed ad over ``n`` fresh contexts (no click noise)."""
    traffic, _, decide_rng, _ = streams(seed)
    tot = 0.0
    for t in range(n):
        ci, ctx, cands = sample_context(spec, traffic, t)
        tot += spec.ctr[ci, strategy.decide(cands, ctx, model, decide_rng).winner]
    return tot / n
