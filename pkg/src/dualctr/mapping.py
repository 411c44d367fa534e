"""Deep feature mapping: per-field embedding sum-pooling followed by a small MLP.

A :class:`SparseFeature` holds the active indices of each categorical field.
User, ad and environment parts are separate features that are concatenated
with ``+`` before being mapped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import ShapeMismatch

CHECKPOINT_VERSION = 1


class IndexOutOfVocabulary(IndexError):
    pass


class TapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vocab: int


class SparseFeature:
    """Multi-hot indices per named field."""

    __slots__ = ("groups",)

    def __init__(self, groups=None, **kw):
        g = dict(groups or {})
        g.update(kw)
        self.groups = {k: tuple(int(i) for i in v) for k, v in g.items()}

    def __add__(self, other):
        overlap = self.groups.keys() & other.groups.keys()
        if overlap:
            raise ValueError(f"fields given twice: {sorted(overlap)}")
        return SparseFeature({**self.groups, **other.groups})

    def __eq__(self, other):
        return isinstance(other, SparseFeature) and self.groups == other.groups

    def __hash__(self):
        return hash(tuple(sorted(self.groups.items())))

    def __repr__(self):
        return f"SparseFeature({self.groups!r})"

    def to_json(self):
        return {k: list(v) for k, v in self.groups.items()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj)


class SparseBatch:
    """Padded per-field index matrices for a batch of features.

    ``idx[name]`` is (n, width) int64, ``mask[name]`` is the matching 0/1
    float matrix. Padding slots point at row 0 with mask 0.
    """

    def __init__(self, idx, mask, n):
        self.idx = idx
        self.mask = mask
        self.n = n

    @classmethod
    def from_features(cls, features, fields):
        features = list(features)
        n = len(features)
        idx, mask = {}, {}
        for f in fields:
            rows = [x.groups.get(f.name, ()) for x in features]
            width = max((len(r) for r in rows), default=0) or 1
            I = np.zeros((n, width), dtype=np.int64)
            Mk = np.zeros((n, width))
            for i, r in enumerate(rows):
                if r:
                    I[i, :len(r)] = r
                    Mk[i, :len(r)] = 1.0
            if I.size and (I.max() >= f.vocab or I.min() < 0):
                raise IndexOutOfVocabulary(f"field {f.name!r} index out of [0, {f.vocab})")
            idx[f.name] = I
            mask[f.name] = Mk
        for x in features:
            unknown = x.groups.keys() - idx.keys()
            if unknown:
                raise IndexOutOfVocabulary(f"unknown fields {sorted(unknown)}")
            if not any(x.groups.values()):
                raise ValueError("feature has no active index")
        return cls(idx, mask, n)

    def take(self, rows):
        rows = np.asarray(rows)
        return SparseBatch({k: v[rows] for k, v in self.idx.items()},
                           {k: v[rows] for k, v in self.mask.items()}, len(rows))

    @classmethod
    def concat(cls, batches):
        batches = [b for b in batches if b.n]
        names = batches[0].idx.keys()
        idx, mask = {}, {}
        for k in names:
            w = max(b.idx[k].shape[1] for b in batches)
            idx[k] = np.concatenate([np.pad(b.idx[k], ((0, 0), (0, w - b.idx[k].shape[1]))) for b in batches])
            mask[k] = np.concatenate([np.pad(b.mask[k], ((0, 0), (0, w - b.mask[k].shape[1]))) for b in batches])
        return cls(idx, mask, sum(b.n for b in batches))


def embed_pool(indices, table):
    """Sum of the selected rows of ``table``; repeated indices count twice."""
    table = np.asarray(table)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexOutOfVocabulary(f"index out of [0, {table.shape[0]})")
    return table[indices].sum(axis=0)


_ACT = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "identity": (lambda z: z, lambda y: np.ones_like(y)),
}


@dataclass
class MappingParams:
    fields: list
    embed_dim: int
    tables: dict
    weights: list
    biases: list
    activations: list

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @property
    def in_dim(self):
        return self.embed_dim * len(self.fields)

    def arrays(self):
        """Flat name -> array view of every trainable tensor."""
        out = {f"emb/{k}": v for k, v in self.tables.items()}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def copy(self):
        return MappingParams(list(self.fields), self.embed_dim,
                             {k: v.copy() for k, v in self.tables.items()},
                             [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                             list(self.activations))

    def check(self):
        dim = self.in_dim
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != dim or b.shape != (W.shape[1],):
                raise ShapeMismatch("layer shapes do not chain")
            dim = W.shape[1]
        for f in self.fields:
            if self.tables[f.name].shape != (f.vocab, self.embed_dim):
                raise ShapeMismatch(f"table {f.name} has shape {self.tables[f.name].shape}")


def init_mapping(fields, embed_dim, hidden, out_dim, rng, hidden_act="tanh", out_act="identity",
                 embed_init=0.05):
    """Random parameters: embeddings ~ U(-embed_init, embed_init), dense weights ~ N(0, 1/fan_in)."""
    fields = [f if isinstance(f, FieldSpec) else FieldSpec(*f) for f in fields]
    tables = {f.name: rng.uniform(-embed_init, embed_init, size=(f.vocab, embed_dim)) for f in fields}
    sizes = [embed_dim * len(fields), *hidden, out_dim]
    weights = [rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    acts = [hidden_act] * len(hidden) + [out_act]
    return MappingParams(fields, embed_dim, tables, weights, biases, acts)


@dataclass
class Tape:
    batch: SparseBatch
    pooled: np.ndarray
    outputs: list = field(default_factory=list)
    params_id: int = 0


def forward(batch, params):
    """Map a :class:`SparseBatch` to (n, d') hidden vectors.

    Returns ``(hidden, tape)``; the tape feeds :func:`backward`.
    """
    parts = []
    for f in params.fields:
        I, Mk = batch.idx[f.name], batch.mask[f.name]
        parts.append(np.einsum("nw,nwe->ne", Mk, params.tables[f.name][I]))
    h = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    tape = Tape(batch, h, [], id(params))
    for W, b, act in zip(params.weights, params.biases, params.activations):
        h = _ACT[act][0](h @ W + b)
        tape.outputs.append(h)
    return h, tape


def forward_one(x, params):
    h, _ = forward(SparseBatch.from_features([x], params.fields), params)
    return h[0]


def backward(tape, upstream, params):
    """Reverse-mode gradients of ``sum(upstream * hidden)`` w.r.t. all
    parameters, keyed like :meth:`MappingParams.arrays`."""
    if tape.params_id != id(params):
        raise TapeMismatch("tape was recorded with different parameters")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.outputs[-1].shape:
        raise TapeMismatch(f"upstream {upstream.shape} vs output {tape.outputs[-1].shape}")
    grads = {}
    g = upstream
    n_layers = len(params.weights)
    for i in range(n_layers - 1, -1, -1):
        y = tape.outputs[i]
        g = g * _ACT[params.activations[i]][1](y)
        x = tape.outputs[i - 1] if i > 0 else tape.pooled
        grads[f"W{i}"] = x.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params.weights[i].T
    e = params.embed_dim
    for j, f in enumerate(params.fields):
        gf = g[:, j * e:(j + 1) * e]
        I, Mk = tape.batch.idx[f.name], tape.batch.mask[f.name]
        sel = Mk > 0
        rows = np.broadcast_to(np.arange(I.shape[0])[:, None], I.shape)[sel]
        contrib = gf[rows] * Mk[sel][:, None]
        vocab = params.tables[f.name].shape[0]
        grads[f"emb/{f.name}"] = np.stack(
            [np.bincount(I[sel], weights=contrib[:, k], minlength=vocab) for k in range(e)], axis=1)
    return grads


def save_mapping(params, prefix=""):
    """Arrays dict for ``np.savez``; :func:`load_mapping` inverts it."""
    out = {
        f"{prefix}version": np.array(CHECKPOINT_VERSION),
        f"{prefix}field_names": np.array([f.name for f in params.fields]),
        f"{prefix}field_vocab": np.array([f.vocab for f in params.fields], dtype=np.int64),
        f"{prefix}embed_dim": np.array(params.embed_dim),
        f"{prefix}activations": np.array(params.activations),
    }
    for k, v in params.arrays().items():
        out[prefix + k] = v
    return out


def load_mapping(arrs, prefix=""):
    version = int(arrs[f"{prefix}version"])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    names = [str(s) for s in arrs[f"{prefix}field_names"]]
    vocab = [int(v) for v in arrs[f"{prefix}field_vocab"]]
    fields = [FieldSpec(n, v) for n, v in zip(names, vocab)]
    acts = [str(a) for a in arrs[f"{prefix}activations"]]
    tables = {n: np.array(arrs[f"{prefix}emb/{n}"]) for n in names}
    weights = [np.array(arrs[f"{prefix}W{i}"]) for i in range(len(acts))]
    biases = [np.array(arrs[f"{prefix}b{i}"]) for i in range(len(acts))]
    p = MappingParams(fields, int(arrs[f"{prefix}embed_dim"]), tables, weights, biases, acts)
    p.check()
    return p
