"""Ad-ranking strategies: score every candidate, display the argmax.

A model is anything with ``fields`` and ``posterior(batch) -> (mu, sigma2)``
over logits. :class:`~dualctr.dnn.LogitModel` reports zero variance, so the
greedy rule over it is plain predicted-eCPM ranking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import AdCandidate  # noqa: F401  (re-exported)
from .mapping import SparseBatch


class EmptyCandidateSet(ValueError):
    pass


@dataclass
class RankingDecision:
    winner: int
    scores: np.ndarray
    strategy: str
    rng_draws: int = 0


def score_dual_greedy(mu, bid):
    return expit(mu) * bid


def score_dual_ucb(mu, sigma2, bid, kappa=1.0):
    if np.any(np.asarray(kappa) < 0):
        raise ValueError("kappa must be >= 0")
    return expit(mu + kappa * np.sqrt(np.maximum(sigma2, 0.0))) * bid


def score_dual_ts(mu, sigma2, bid, rng):
    """One independent posterior draw per candidate."""
    mu = np.asarray(mu, dtype=np.float64)
    f = mu + np.sqrt(np.maximum(sigma2, 0.0)) * rng.standard_normal(mu.shape)
    return expit(f) * bid


def argmax_lowest_id(scores, ids):
    """Index of the best score; ties go to the lowest ad id."""
    scores = np.asarray(scores)
    best = scores.max()
    tied = np.flatnonzero(scores == best)
    if len(tied) == 1:
        return int(tied[0])
    return int(tied[np.argmin(np.asarray(ids)[tied])])


def candidate_batch(candidates, context, fields):
    return SparseBatch.from_features([context + c.features for c in candidates], fields)


class Strategy:
    name = "base"

    def scores(self, candidates, context, model, rng):
        """Returns ``(scores, rng_draws)``."""
        raise NotImplementedError

    def decide(self, candidates, context, model, rng):
        if not candidates:
            raise EmptyCandidateSet("no candidates to rank")
        s, draws = self.scores(candidates, context, model, rng)
        i = argmax_lowest_id(s, [c.ad_id for c in candidates])
        return RankingDecision(candidates[i].ad_id, s, self.name, draws)

    __call__ = decide


def _posterior(candidates, context, model):
    return model.posterior(candidate_batch(candidates, context, model.fields))


def _bids(candidates):
    return np.array([c.bid for c in candidates])


class Greedy(Strategy):
    name = "greedy"

    def scores(self, candidates, context, model, rng):
        mu, _ = _posterior(candidates, context, model)
        return score_dual_greedy(mu, _bids(candidates)), 0


class Ucb(Strategy):
    name = "ucb"

    def __init__(self, kappa=1.0):
        if kappa < 0:
            raise ValueError("kappa must be >= 0")
        self.kappa = kappa

    def scores(self, candidates, context, model, rng):
        mu, var = _posterior(candidates, context, model)
        return score_dual_ucb(mu, var, _bids(candidates), self.kappa), 0


class Thompson(Strategy):
    name = "ts"

    def scores(self, candidates, context, model, rng):
        mu, var = _posterior(candidates, context, model)
        return score_dual_ts(mu, var, _bids(candidates), rng), len(candidates)


class Random(Strategy):
    """Uniformly random ranking, realized as i.i.d. uniform scores."""

    name = "random"

    def scores(self, candidates, context, model, rng):
        return rng.random(len(candidates)), len(candidates)


class EpsilonGreedy(Strategy):
    def __init__(self, inner, epsilon):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        self.inner = inner
        self.epsilon = epsilon
        self.name = f"{inner.name}-eps"

    def scores(self, candidates, context, model, rng):
        if self.epsilon > 0 and rng.random() < self.epsilon:
            return rng.random(len(candidates)), 1 + len(candidates)
        s, draws = self.inner.scores(candidates, context, model, rng)
        return s, draws + (1 if self.epsilon > 0 else 0)


def epsilon_greedy_wrap(inner, epsilon):
    return EpsilonGreedy(inner, epsilon)


def random_strategy(candidates, rng):
    return Random().decide(candidates, None, None, rng)


class Oracle(Strategy):
    """Ranks by true eCPM; ``true_ctr(context, ad_id)`` comes from the environment."""

    name = "oracle"

    def __init__(self, true_ctr):
        self.true_ctr = true_ctr

    def scores(self, candidates, context, model, rng):
        return np.array([self.true_ctr(context, c.ad_id) * c.bid for c in candidates]), 0


class Fixed(Strategy):
    """Deterministic preference over (context, ad) independent of any model."""

    name = "fixed"

    def __init__(self, preference):
        self.preference = preference

    def scores(self, candidates, context, model, rng):
        return np.array([self.preference(context, c.ad_id) for c in candidates], dtype=float), 0


def rank(candidates, context, model, strategy, rng):
    return strategy.decide(candidates, context, model, rng)


# name -> (model family, strategy factory)
STRATEGIES = {
    "dual-greedy": ("dual", lambda cfg: Greedy()),
    "dual-greedy-prior": ("dual-prior", lambda cfg: Greedy()),
    "dual-ucb": ("dual", lambda cfg: Ucb(cfg.get("kappa", 1.0))),
    "dual-ts": ("dual", lambda cfg: Thompson()),
    "dnn-greedy": ("dnn", lambda cfg: Greedy()),
    "dnn-epsilon-greedy": ("dnn", lambda cfg: EpsilonGreedy(Greedy(), cfg.get("epsilon", 0.1))),
    "random": (None, lambda cfg: Random()),
}


def make_strategy(name, cfg=None):
    """Returns ``(model_family, strategy)`` for a strategy name."""
    cfg = cfg or {}
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}")
    family, factory = STRATEGIES[name]
    s = factory(cfg)
    s.name = name
    return family, s
