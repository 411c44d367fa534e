"""Dense linear algebra and Adam, shared by the numerical modules.

All arrays are float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

JITTER_START = 1e-8
JITTER_MAX = 1e-4


class NumericalError(ArithmeticError):
    """Base class for numerical failures."""


class NotPositiveDefinite(NumericalError):
    pass


class SingularTriangular(NumericalError):
    pass


class ShapeMismatch(ValueError):
    pass


def cholesky(A, jitter=0.0, escalate=True):
    """Lower Cholesky factor of ``A + jitter*I``.

    If the factorization fails the jitter is raised, starting at 1e-8 and
    growing by 10x up to 1e-4, before giving up.

    Returns ``L`` only; use :func:`cholesky_with_jitter` to learn which
    jitter was finally applied.
    """
    return cholesky_with_jitter(A, jitter, escalate)[0]


def cholesky_with_jitter(A, jitter=0.0, escalate=True):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"cholesky needs a square matrix, got {A.shape}")
    scale = max(np.abs(A).max(initial=0.0), 1.0)
    if np.abs(A - A.T).max(initial=0.0) > 1e-9 * scale:
        raise ValueError("cholesky needs a symmetric matrix")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    eye = np.eye(A.shape[0])
    tried = [jitter]
    if escalate:
        j = max(JITTER_START, jitter * 10.0) if jitter > 0 else JITTER_START
        while j <= JITTER_MAX * (1 + 1e-12):
            tried.append(j)
            j *= 10.0
    for j in tried:
        try:
            L = np.linalg.cholesky(A + j * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            return L, j
    raise NotPositiveDefinite(f"not positive definite with jitter up to {tried[-1]:g}")


def tri_solve(L, b, transposed=False):
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular ``L``.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    L = np.asarray(L, dtype=np.float64)
    if np.any(np.diag(L) == 0):
        raise SingularTriangular("zero on the diagonal")
    return solve_triangular(L, b, lower=True, trans=1 if transposed else 0, check_finite=False)


def chol_solve(L, b):
    """Solve ``(L L^T) x = b`` given the lower factor."""
    return tri_solve(L, tri_solve(L, b), transposed=True)


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         None if self.m is None else self.m.copy(),
                         None if self.v is None else self.v.copy())


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns the new parameter vector and
    advances ``state`` in place."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeMismatch(f"params {params.shape} vs grads {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ShapeMismatch(f"state {state.m.shape} vs params {params.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    return params - state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class Adam:
    """Adam over a dict of named arrays, updated in place.

    Moments are kept per name so parameter groups can be frozen by simply
    leaving them out of ``grads``.
    """

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, params, grads):
        for name, g in grads.items():
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState(self.lr, self.beta1, self.beta2, self.eps)
            params[name][...] = adam_step(params[name], g, st)
