"""Plain deep CTR baseline: the same mapping with a single-logit head, trained
by minimizing Bernoulli log-loss. Used for the DNN-Greedy family."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, log_expit

from . import mapping as mp
from .numkit import Adam


@dataclass
class DnnConfig:
    embed_dim: int = 6
    embed_init: float = 0.05
    hidden: tuple = (16, 8)
    lr: float = 0.02
    batch_size: int = 128
    epochs: int = 1

    def validate(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


def logloss_terms(batch, y, params):
    logit, tape = mp.forward(batch, params)
    logit = logit[:, 0]
    s = 2.0 * y - 1.0
    loss = -log_expit(s * logit).mean()
    up = (-s * expit(-s * logit) / len(y))[:, None]
    return float(loss), mp.backward(tape, up, params)


class LogitModel:
    """Mapping whose last (identity) layer is the logit head."""

    def __init__(self, fields, config=None, rng=None, params=None):
        self.config = config or DnnConfig()
        self.config.validate()
        self.fields = [f if isinstance(f, mp.FieldSpec) else mp.FieldSpec(*f) for f in fields]
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.config
        self.params = params or mp.init_mapping(self.fields, c.embed_dim, c.hidden, 1, rng, embed_init=c.embed_init)
        self.opt = Adam(lr=c.lr)

    def logit(self, batch):
        return mp.forward(batch, self.params)[0][:, 0]

    def fit(self, batch, y, rng, epochs=None):
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        y = np.asarray(y, dtype=np.float64)
        n = len(y)
        if n == 0:
            raise ValueError("empty dataset")
        arrs = self.params.arrays()
        losses = []
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, c.batch_size):
                rows = order[start:start + c.batch_size]
                loss, grads = logloss_terms(batch.take(rows), y[rows], self.params)
                self.opt.step(arrs, grads)
                losses.append(loss)
        return losses

    def posterior(self, batch):
        """Point estimate as a zero-variance posterior."""
        mu = self.logit(batch)
        return mu, np.zeros_like(mu)

    def predict_ctr(self, batch):
        return expit(self.logit(batch))


CHECKPOINT_KIND = "dnn"


def save_checkpoint(model, path):
    arrs = mp.save_mapping(model.params, "map/")
    arrs["kind"] = np.array(CHECKPOINT_KIND)
    with open(path, "wb") as fh:
        np.savez(fh, **arrs)


def load_checkpoint(path, config=None):
    with np.load(path, allow_pickle=False) as z:
        arrs = {k: z[k] for k in z.files}
    if str(arrs.get("kind", "")) != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a DNN checkpoint")
    params = mp.load_mapping(arrs, "map/")
    cfg = replace(config) if config is not None else DnnConfig()
    cfg.embed_dim = params.embed_dim
    cfg.hidden = tuple(W.shape[1] for W in params.weights[:-1])
    return LogitModel(params.fields, cfg, params=params)
