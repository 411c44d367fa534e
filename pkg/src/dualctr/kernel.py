"""RBF base kernel on hidden-space vectors, with analytic gradients.

The deep kernel is ``rbf(phi(x), phi(x'))``; composition with the mapping
happens in :mod:`dualctr.svgp`, this module only sees hidden vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionMismatch(ValueError):
    pass


@dataclass
class RbfParams:
    """Amplitude ``a`` and lengthscale ``l``, stored as logs."""

    log_a: float = np.log(0.3)
    log_l: float = np.log(2.0)

    @classmethod
    def from_values(cls, a, l):
        if a <= 0 or l <= 0:
            raise ValueError("amplitude and lengthscale must be positive")
        return cls(float(np.log(a)), float(np.log(l)))

    @property
    def a(self):
        return float(np.exp(self.log_a))

    @property
    def l(self):
        return float(np.exp(self.log_l))

    @property
    def variance(self):
        return float(np.exp(2.0 * self.log_a))


def _check(h1, h2):
    if h1.shape[-1] != h2.shape[-1]:
        raise DimensionMismatch(f"dims {h1.shape[-1]} and {h2.shape[-1]}")


def rbf(h1, h2, p):
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    _check(h1, h2)
    d = h1 - h2
    return p.variance * np.exp(-0.5 * float(d @ d) / p.l ** 2)


def sqdist(H1, H2):
    d = H1[:, None, :] - H2[None, :, :]
    return np.einsum("nmd,nmd->nm", d, d)


def kernel_matrix(H1, H2, p):
    H1 = np.atleast_2d(np.asarray(H1, dtype=np.float64))
    H2 = np.atleast_2d(np.asarray(H2, dtype=np.float64))
    _check(H1, H2)
    D = sqdist(H1, H2)
    return p.variance * np.exp(-0.5 * D / p.l ** 2)


def rbf_grads(h1, h2, p):
    """Partials of ``rbf(h1, h2)`` w.r.t. ``h1``, ``h2``, ``log a`` and ``log l``."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    _check(h1, h2)
    d = h1 - h2
    r2 = float(d @ d)
    l2 = p.l ** 2
    k = p.variance * np.exp(-0.5 * r2 / l2)
    g1 = -k * d / l2
    return g1, -g1, 2.0 * k, k * r2 / l2


def kernel_matrix_backward(G, K, H1, H2, p):
    """Pull an upstream gradient ``G = dL/dK`` through ``K = kernel_matrix(H1, H2)``.

    Returns ``(dH1, dH2, dlog_a, dlog_l)``. For a Gram matrix ``K(Z, Z)`` add
    ``dH1 + dH2``.
    """
    l2 = p.l ** 2
    GK = G * K
    dH1 = -(GK.sum(1)[:, None] * H1 - GK @ H2) / l2
    dH2 = -(GK.sum(0)[:, None] * H2 - GK.T @ H1) / l2
    dlog_a = 2.0 * GK.sum()
    D = sqdist(H1, H2)
    dlog_l = float((GK * D).sum() / l2)
    return dH1, dH2, dlog_a, dlog_l
