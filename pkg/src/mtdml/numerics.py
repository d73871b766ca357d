"""Dense float64 helpers shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; the RNG is a
``numpy.random.Generator`` (PCG64), whose stream depends only on the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-12


class NonFiniteError(ValueError):
    """Raised when an input matrix holds NaN or Inf entries."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def check_finite(x: np.ndarray, what: str = "matrix") -> None:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteError(f"{what} has a non-finite entry at {tuple(int(i) for i in bad)}")


def pairwise_euclidean(X) -> np.ndarray:
    """All-pairs Euclidean distances between the rows of ``X``.

    Computed from explicit differences (no Gram-matrix shortcut), one row at
    a time in a fixed order, so the result is exactly symmetric with an
    exact zero diagonal.
    """
    X = as_matrix(X)
    n, d = X.shape
    if n < 1 or d < 1:
        raise ValueError("pairwise_euclidean needs n >= 1 and d >= 1")
    check_finite(X, "embedding matrix")
    D = np.zeros((n, n))
    for i in range(n - 1):
        diff = X[i + 1:] - X[i]
        row = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        D[i, i + 1:] = row
        D[i + 1:, i] = row
    return D


def l2_normalize_rows(X) -> np.ndarray:
    X = as_matrix(X)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    return X / (norms + NORM_EPS)[:, None]


def l2_normalize_backward(row, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`l2_normalize_rows`.

    Works on a single vector or row-wise on matrices. Computes
    ``(I - u u^T) g / (|x| + eps)`` where ``u`` is the normalized row.
    """
    x = np.asarray(row, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"shape mismatch: row {x.shape} vs upstream {g.shape}")
    single = x.ndim == 1
    x2, g2 = as_matrix(x), as_matrix(g)
    denom = np.sqrt(np.einsum("ij,ij->i", x2, x2)) + NORM_EPS
    u = x2 / denom[:, None]
    radial = np.einsum("ij,ij->i", u, g2)
    out = (g2 - u * radial[:, None]) / denom[:, None]
    return out[0] if single else out


@dataclass
class AdamState:
    """Moment estimates for a single parameter array."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param, dtype=np.float64),
                   v=np.zeros_like(param, dtype=np.float64), **hyper)


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam step. Mutates ``state`` and returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    """Adam over a dict of named parameter arrays, one :class:`AdamState` each."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name in sorted(params):
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(
                    params[name], lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            params[name] = adam_update(params[name], grads[name], self.states[name])
