"""Sparse variational GP classifier over a learned hidden space.

Inducing points live directly in the hidden space of the mapping, q(u) has
a diagonal covariance ``S = diag(exp(s_log))`` and the Bernoulli likelihood
expectation is taken with Gauss-Hermite quadrature. Gradients are derived by
hand; see :func:`total_loss`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.cluster.vq import kmeans2
from scipy.special import expit

from . import mapping as mp
from .kernel import RbfParams, kernel_matrix, kernel_matrix_backward
from .numkit import Adam, chol_solve, cholesky_with_jitter, tri_solve

SQRT_PI = np.sqrt(np.pi)


class StaleCache(RuntimeError):
    pass


@dataclass
class VariationalState:
    Z: np.ndarray
    v: np.ndarray
    s_log: np.ndarray
    version: int = 0

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=np.float64))
        self.v = np.asarray(self.v, dtype=np.float64).ravel()
        self.s_log = np.asarray(self.s_log, dtype=np.float64).ravel()
        M = self.Z.shape[0]
        if M < 1 or self.v.shape != (M,) or self.s_log.shape != (M,):
            raise ValueError("Z, v and s_log must agree on M >= 1")

    @property
    def M(self):
        return self.Z.shape[0]

    @property
    def S(self):
        return np.exp(self.s_log)

    def touch(self):
        """Mark the state as changed; outstanding caches become stale."""
        self.version += 1

    def copy(self):
        return VariationalState(self.Z.copy(), self.v.copy(), self.s_log.copy(), self.version)


@dataclass(frozen=True)
class PosteriorGaussian:
    mu: float
    sigma2: float


@dataclass
class ClampCounter:
    events: int = 0

    def clamp(self, var):
        neg = var < 0
        n = int(np.count_nonzero(neg))
        if n:
            self.events += n
            var = np.where(neg, 0.0, var)
        return var


CLAMPS = ClampCounter()


def _kuu(state, kern, jitter):
    K = kernel_matrix(state.Z, state.Z, kern)
    L, used = cholesky_with_jitter(K, jitter)
    return K, L, used


def predict_batch(H, state, kern, mean_c=0.0, jitter=1e-8):
    """Unclamped posterior mean and variance of the logit at hidden points ``H``."""
    H = np.atleast_2d(H)
    _, L, _ = _kuu(state, kern, jitter)
    Kfu = kernel_matrix(H, state.Z, kern)
    B = tri_solve(L, Kfu.T)
    A = tri_solve(L, B, transposed=True)
    mu = mean_c + A.T @ (state.v - mean_c)
    # k^T Kuu^-1 k as a sum of squares: no cancellation when Kuu is ill-conditioned
    var = kern.variance - (B * B).sum(axis=0) + (A * A).T @ state.S
    return mu, var


def predict(h_star, state, kern, mean_c=0.0, jitter=1e-8):
    mu, var = predict_batch(np.atleast_2d(h_star), state, kern, mean_c, jitter)
    return PosteriorGaussian(float(mu[0]), float(CLAMPS.clamp(var)[0]))


@dataclass
class InferenceCache:
    """Query-independent terms of the predictive equations.

    ``alpha1 = Kuu^-1 (v - m(Z))`` and ``alpha2 = Kuu^-1 (Kuu - S) Kuu^-1``.
    Queries use ``P = [L^-1; S^1/2 Kuu^-1]``, with ``alpha2 = P1^T P1 - P2^T P2``,
    so the quadratic form is a difference of two sums of squares.
    """

    alpha1: np.ndarray
    alpha2: np.ndarray
    P: np.ndarray
    Z: np.ndarray
    kern: RbfParams
    mean_c: float
    version: int


def build_cache(state, kern, mean_c=0.0, jitter=1e-8):
    K, L, used = _kuu(state, kern, jitter)
    K = K + used * np.eye(state.M)
    alpha1 = chol_solve(L, state.v - mean_c)
    Li = tri_solve(L, np.eye(state.M))
    Kinv = Li.T @ Li
    Q = np.sqrt(state.S)[:, None] * Kinv
    alpha2 = Kinv - Q.T @ Q
    alpha2 = 0.5 * (alpha2 + alpha2.T)
    P = np.vstack([Li, Q])
    return InferenceCache(alpha1, alpha2, P, state.Z.copy(), replace(kern), float(mean_c), state.version)


def cached_predict_batch(H, cache, state=None):
    """Posterior at many points from a cache: O(M d' + M^2) per point, no factorization."""
    if state is not None and state.version != cache.version:
        raise StaleCache(f"cache built at version {cache.version}, state is at {state.version}")
    beta = kernel_matrix(np.atleast_2d(H), cache.Z, cache.kern)
    mu = cache.mean_c + beta @ cache.alpha1
    G = beta @ cache.P.T
    M = len(cache.alpha1)
    var = cache.kern.variance - (G[:, :M] ** 2).sum(axis=1) + (G[:, M:] ** 2).sum(axis=1)
    return mu, var


def cached_predict(h_star, cache, state=None):
    mu, var = cached_predict_batch(np.atleast_2d(h_star), cache, state)
    return PosteriorGaussian(float(mu[0]), float(CLAMPS.clamp(var)[0]))


def _kl_terms(state, K, L, mean_c):
    M = state.M
    r = state.v - mean_c
    Kinv = chol_solve(L, np.eye(M))
    alpha = Kinv @ r
    S = state.S
    logdet = 2.0 * np.log(np.diag(L)).sum()
    kl = 0.5 * (np.dot(np.diag(Kinv), S) + r @ alpha - M + logdet - state.s_log.sum())
    return kl, Kinv, alpha


def kl_q_p(state, kern, mean_c=0.0, jitter=1e-8):
    """KL[N(v, S) || N(m(Z), Kuu)] in closed form."""
    K, L, _ = _kuu(state, kern, jitter)
    return float(_kl_terms(state, K, L, mean_c)[0])


_GH_CACHE = {}


def _gh(n):
    if n not in _GH_CACHE:
        x, w = hermgauss(n)
        _GH_CACHE[n] = (x, w / SQRT_PI)
    return _GH_CACHE[n]


def ell_terms(y, mu, var, n_nodes=20):
    """Gauss-Hermite estimate of E_{N(mu, var)}[log Ber(y; sigmoid(f))] and its
    exact partials w.r.t. ``mu`` and ``var`` (vectorized)."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    var = np.maximum(np.asarray(var, dtype=np.float64), 0.0)
    x, w = _gh(n_nodes)
    sgn = (2.0 * y - 1.0)[..., None]
    sd = np.sqrt(2.0 * var)[..., None]
    z = sgn * (mu[..., None] + sd * x)
    # log sigmoid(z) and sigmoid(-z) from a single exp, both stable for large |z|
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    val = (np.minimum(z, 0.0) - np.log1p(e)) @ w
    g1 = sgn * np.where(z >= 0, e * r, r)
    dmu = g1 @ w
    tiny = sd[..., 0] < 1e-7
    with np.errstate(divide="ignore", invalid="ignore"):
        dvar = np.where(tiny, 0.0, (g1 * x) @ w / np.where(tiny, 1.0, sd[..., 0]))
    if np.any(tiny):
        p = expit(mu)
        dvar = np.where(tiny, -0.5 * p * (1.0 - p), dvar)
    return val, dmu, dvar


def expected_log_lik(y, post, n_nodes=20):
    return float(ell_terms(y, post.mu, post.sigma2, n_nodes)[0])


def clustering_reg(H, Z):
    """Mean squared distance from each hidden point to its nearest inducing point
    (ties go to the lowest index)."""
    return float(_cluster_terms(np.atleast_2d(H), np.atleast_2d(Z))[0])


def _cluster_terms(H, Z):
    d = H[:, None, :] - Z[None, :, :]
    D = np.einsum("bmd,bmd->bm", d, d)
    c = D.argmin(axis=1)
    diff = H - Z[c]
    val = (diff * diff).sum(1).mean()
    dH = 2.0 * diff / len(H)
    dZ = np.stack([-np.bincount(c, weights=dH[:, k], minlength=len(Z)) for k in range(Z.shape[1])], axis=1)
    return val, dH, dZ


def elbo_batch(batch, y, state, params, kern, tau, mean_c=0.0, jitter=1e-8, n_nodes=20):
    """Mini-batch estimate of ``mean_i E_q[log p(y_i|f_i)] - tau * KL[q(u)||p(u)]``."""
    H, _ = mp.forward(batch, params)
    mu, var = predict_batch(H, state, kern, mean_c, jitter)
    val = ell_terms(y, mu, np.maximum(var, 0.0), n_nodes)[0]
    return float(val.mean() - tau * kl_q_p(state, kern, mean_c, jitter))


def total_loss(batch, y, state, params, kern, tau, lam, mean_c=0.0, jitter=1e-8,
               n_nodes=20, train_kernel=False):
    """Training objective ``-elbo_batch + lam * clustering_reg`` and its gradients.

    Returns ``(loss, grads)``; ``grads`` is keyed by the mapping array names plus
    ``Z``, ``v``, ``s_log`` and, when ``train_kernel``, ``kern`` = (d/dlog a, d/dlog l).
    """
    y = np.asarray(y, dtype=np.float64)
    B = len(y)
    H, tape = mp.forward(batch, params)
    Z, v = state.Z, state.v
    S = state.S
    M = state.M

    Kuu, L, used = _kuu(state, kern, jitter)
    Kfu = kernel_matrix(H, Z, kern)
    # one explicit inverse per step is cheaper than repeated solves at small M
    kl, Kinv, alpha = _kl_terms(state, Kuu + used * np.eye(M), L, mean_c)
    A = Kinv @ Kfu.T
    r = v - mean_c
    mu = mean_c + A.T @ r
    var = kern.variance - np.einsum("bm,mb->b", Kfu, A) + (A * A).T @ S
    clamped = var < 0
    val, dmu, dvar = ell_terms(y, mu, np.where(clamped, 0.0, var), n_nodes)
    dvar = np.where(clamped, 0.0, dvar)

    reg, dH_reg, dZ_reg = _cluster_terms(H, Z) if lam > 0 else (0.0, 0.0, 0.0)
    loss = -val.mean() + tau * kl + lam * reg

    gmu = -dmu / B
    gvar = -dvar / B
    g_v = A @ gmu + tau * alpha
    g_s = (A * A) @ gvar + tau * 0.5 * (np.diag(Kinv) - 1.0 / S)
    g_slog = g_s * S
    G_A = np.outer(r, gmu) + (2.0 * S[:, None] * A - Kfu.T) * gvar[None, :]
    W = Kinv @ G_A
    G_Kfu = W.T - A.T * gvar[:, None]
    KinvS = Kinv * S
    G_Kuu = -W @ A.T + tau * 0.5 * (Kinv - KinvS @ Kinv - np.outer(alpha, alpha))

    dH, dZ1, da1, dl1 = kernel_matrix_backward(G_Kfu, Kfu, H, Z, kern)
    dZa, dZb, da2, dl2 = kernel_matrix_backward(G_Kuu, Kuu, Z, Z, kern)
    g_Z = dZ1 + dZa + dZb
    if lam > 0:
        dH = dH + lam * dH_reg
        g_Z = g_Z + lam * dZ_reg

    grads = mp.backward(tape, dH, params)
    grads["Z"] = g_Z
    grads["v"] = g_v
    grads["s_log"] = g_slog
    if train_kernel:
        g_loga = da1 + da2 + 2.0 * kern.variance * gvar.sum()
        grads["kern"] = np.array([g_loga, dl1 + dl2])
    return float(loss), grads


@dataclass
class DualConfig:
    embed_dim: int = 6
    embed_init: float = 0.05
    hidden: tuple = (16,)
    out_dim: int = 2
    M: int = 8
    a: float = 1.0
    l: float = 1.5
    train_kernel: bool = True
    mean_c: float = 0.0
    tau: float | None = None
    lam: float = 0.1
    lr: float = 0.02
    batch_size: int = 128
    epochs: int = 1
    jitter: float = 1e-8
    quad_nodes: int = 20

    def validate(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.tau is not None and self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.a <= 0 or self.l <= 0:
            raise ValueError("a and l must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


def init_inducing(H, M, lengthscale, rng):
    """k-means centers of the hidden points.

    Points closer than a tenth of the lengthscale count as one; when fewer than
    ``M`` such groups exist the remaining centers are copies perturbed by half a
    lengthscale, which keeps ``Kuu`` well conditioned.
    """
    H = np.atleast_2d(H)
    grid = 0.1 * lengthscale
    uniq = np.unique(np.round(H / grid), axis=0) * grid
    if len(uniq) > M:
        Z, _ = kmeans2(H, M, minit="++", seed=rng)
        if len(np.unique(np.round(Z / grid), axis=0)) == M:
            return Z
        uniq = np.unique(np.round(Z / grid), axis=0) * grid
    extra = M - len(uniq)
    pick = rng.integers(0, len(uniq), size=extra)
    noise = rng.normal(0.0, 0.5 * lengthscale, size=(extra, H.shape[1]))
    return np.concatenate([uniq[:M], uniq[pick] + noise])[:M]


class DualModel:
    """Mapping + variational GP, trained jointly with Adam."""

    def __init__(self, fields, config=None, rng=None, params=None):
        self.config = config or DualConfig()
        self.config.validate()
        self.fields = [f if isinstance(f, mp.FieldSpec) else mp.FieldSpec(*f) for f in fields]
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.config
        self.params = params or mp.init_mapping(self.fields, c.embed_dim, c.hidden, c.out_dim, rng, embed_init=c.embed_init)
        self.kern = RbfParams.from_values(c.a, c.l)
        self.state = None
        self.opt = Adam(lr=c.lr)
        self._cache = None
        self.clamps = ClampCounter()

    @property
    def mean_c(self):
        return self.config.mean_c

    def initialize(self, batch, rng):
        H, _ = mp.forward(batch, self.params)
        c = self.config
        Z = init_inducing(H, c.M, self.kern.l, rng)
        s_log = np.full(c.M, np.log(0.5 * self.kern.variance))
        self.state = VariationalState(Z, np.full(c.M, c.mean_c), s_log)
        self._cache = None

    def hidden(self, batch):
        return mp.forward(batch, self.params)[0]

    def _arrays(self):
        arrs = dict(self.params.arrays())
        arrs["Z"] = self.state.Z
        arrs["v"] = self.state.v
        arrs["s_log"] = self.state.s_log
        return arrs

    def fit(self, batch, y, rng, epochs=None):
        """Shuffled mini-batch Adam on :func:`total_loss`; returns per-step losses."""
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        y = np.asarray(y, dtype=np.float64)
        n = len(y)
        if n == 0:
            raise ValueError("empty dataset")
        if epochs == 0:
            return []
        if self.state is None:
            first = rng.permutation(n)[:c.batch_size]
            self.initialize(batch.take(first), rng)
        tau = 1.0 / n if c.tau is None else c.tau
        arrs = self._arrays()
        if c.train_kernel:
            arrs["kern"] = np.array([self.kern.log_a, self.kern.log_l])
        losses = []
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, c.batch_size):
                rows = order[start:start + c.batch_size]
                loss, grads = total_loss(batch.take(rows), y[rows], self.state, self.params, self.kern,
                                         tau, c.lam, c.mean_c, c.jitter, c.quad_nodes, c.train_kernel)
                self.opt.step(arrs, grads)
                if c.train_kernel:
                    self.kern = RbfParams(float(arrs["kern"][0]), float(arrs["kern"][1]))
                losses.append(loss)
        self.state.touch()
        self._cache = None
        return losses

    def cache(self):
        if self._cache is None or self._cache.version != self.state.version:
            self._cache = build_cache(self.state, self.kern, self.mean_c, self.config.jitter)
        return self._cache

    def posterior(self, batch):
        """Clamped (mu, sigma2) arrays of the logit, through the inference cache."""
        if self.state is None:
            n = batch.n
            return np.full(n, self.mean_c), np.full(n, self.kern.variance)
        mu, var = cached_predict_batch(self.hidden(batch), self.cache(), self.state)
        return mu, self.clamps.clamp(var)

    def predict_ctr(self, batch, n_nodes=20):
        """Predictive mean CTR, E[sigmoid(f)] under the posterior."""
        mu, var = self.posterior(batch)
        x, w = _gh(n_nodes)
        return expit(mu[:, None] + np.sqrt(2.0 * var)[:, None] * x) @ w


def fit(features, labels, fields, config=None, seed=0, epochs=None):
    """Build and train a :class:`DualModel` from raw features; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    model = DualModel(fields, config, rng)
    batch = mp.SparseBatch.from_features(features, model.fields)
    model.fit(batch, labels, rng, epochs)
    return model


CHECKPOINT_KIND = "dual"


def save_checkpoint(model, path):
    arrs = mp.save_mapping(model.params, "map/")
    arrs["kind"] = np.array(CHECKPOINT_KIND)
    arrs["kern"] = np.array([model.kern.log_a, model.kern.log_l])
    arrs["mean_c"] = np.array(model.mean_c)
    arrs["jitter"] = np.array(model.config.jitter)
    if model.state is not None:
        arrs["Z"] = model.state.Z
        arrs["v"] = model.state.v
        arrs["s_log"] = model.state.s_log
        arrs["state_version"] = np.array(model.state.version)
    with open(path, "wb") as fh:
        np.savez(fh, **arrs)


def load_checkpoint(path, config=None):
    with np.load(path, allow_pickle=False) as z:
        arrs = {k: z[k] for k in z.files}
    if str(arrs.get("kind", "")) != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a DUAL checkpoint")
    params = mp.load_mapping(arrs, "map/")
    cfg = replace(config) if config is not None else DualConfig()
    cfg.embed_dim = params.embed_dim
    cfg.out_dim = params.out_dim
    cfg.hidden = tuple(W.shape[1] for W in params.weights[:-1])
    cfg.mean_c = float(arrs["mean_c"])
    cfg.jitter = float(arrs["jitter"])
    model = DualModel(params.fields, cfg, params=params)
    model.kern = RbfParams(float(arrs["kern"][0]), float(arrs["kern"][1]))
    if "Z" in arrs:
        model.state = VariationalState(arrs["Z"], arrs["v"], arrs["s_log"], int(arrs["state_version"]))
        model.config.M = model.state.M
    return model
