"""Dense-vector math, the optimizer, and the finite-difference gradient oracle.

Vectors are plain 1-D float64 numpy arrays of a fixed dimension; all public
operations validate dimensions and keep every intermediate in 64-bit
arithmetic. Everything here is a pure function: optimizer state is a value
that is replaced, never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    NonFiniteEvaluation,
    ZeroNormVector,
)

ZERO_NORM_THRESHOLD = 1e-12


def as_vector(values) -> np.ndarray:
    """Coerce to a 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {v.shape}")
    return v


def cosine(u, v) -> float:
    """Cosine similarity u.v / (|u||v|).

    Zero-norm inputs are a hard error rather than a silent 0: a zero
    similarity would corrupt any contrastive sum built on top of this.
    """
    u = as_vector(u)
    v = as_vector(v)
    if u.shape[0] != v.shape[0]:
        raise DimensionMismatch(f"dim {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < ZERO_NORM_THRESHOLD or nv < ZERO_NORM_THRESHOLD:
        raise ZeroNormVector(f"norms ({nu:g}, {nv:g}) below {ZERO_NORM_THRESHOLD:g}")
    return float(np.dot(u, v) / (nu * nv))


def set_similarity(r, members: Sequence) -> float:
    """Sum of cosine similarities between ``r`` and each member of a set.

    The empty set contributes 0, so an exponentiated empty similarity is
    exactly 1 in a contrastive denominator.
    """
    r = as_vector(r)
    total = 0.0
    for v in members:
        total += cosine(r, v)
    return total


def normalized_rows(m: np.ndarray, what: str = "representation") -> tuple[np.ndarray, np.ndarray]:
    """Rows scaled to unit norm, plus the original norms.

    Norms come from per-row scalar calls, not the vectorized axis reduction:
    the two differ in the last bit, and downstream code promises bitwise
    agreement with the scalar cosine on one-element inputs.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"{what} must be a 2-D matrix of row vectors, got {m.shape}")
    norms = np.array([np.linalg.norm(row) for row in m], dtype=np.float64)
    bad = np.nonzero(norms < ZERO_NORM_THRESHOLD)[0]
    if bad.size:
        raise ZeroNormVector(f"{what} row {bad[0]} has norm below {ZERO_NORM_THRESHOLD:g}")
    return m / norms[:, None], norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All pairwise cosines between rows of ``a`` and rows of ``b``.

    Raw dot products over an outer product of scalar norms, so a 1x1 result
    agrees bit for bit with ``cosine`` on the same vectors.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"incompatible matrix shapes {a.shape} and {b.shape}")
    _, a_norms = normalized_rows(a, "left rows")
    _, b_norms = normalized_rows(b, "right rows")
    return (a @ b.T) / np.outer(a_norms, b_norms)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax via max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise EmptyInput("softmax of empty logits")
    z = z - np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise EmptyInput("log_softmax of empty logits")
    z = z - np.max(z)
    return z - np.log(np.sum(np.exp(z)))


@dataclass(frozen=True)
class OptimHyper:
    """AdamW hyperparameters with decoupled weight decay."""

    learning_rate: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class OptimState:
    """Moment accumulators, parameter-shaped. Replaced on every step."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, num_params: int) -> "OptimState":
        return cls(
            first_moment=np.zeros(num_params, dtype=np.float64),
            second_moment=np.zeros(num_params, dtype=np.float64),
            step_count=0,
        )


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: OptimState,
    hyper: OptimHyper,
) -> tuple[np.ndarray, OptimState]:
    """One AdamW update with bias correction and decoupled decay.

    params' = params - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * params
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise DimensionMismatch(
            f"params {params.shape}, grads {grads.shape}, "
            f"state {state.first_moment.shape}"
        )
    t = state.step_count + 1
    m = hyper.beta1 * state.first_moment + (1.0 - hyper.beta1) * grads
    v = hyper.beta2 * state.second_moment + (1.0 - hyper.beta2) * grads * grads
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    update = hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    new_params = params - update - hyper.learning_rate * hyper.weight_decay * params
    return new_params, OptimState(first_moment=m, second_moment=v, step_count=t)


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Independent oracle for every analytic gradient in the package; eps
    defaults to 1e-5, balancing truncation against rounding in float64.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    for i in range(params.shape[0]):
        shifted = params.copy()
        shifted[i] = params[i] + eps
        f_plus = float(f(shifted))
        shifted[i] = params[i] - eps
        f_minus = float(f(shifted))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteEvaluation(
                f"f evaluated to ({f_plus}, {f_minus}) at coordinate {i}"
            )
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
