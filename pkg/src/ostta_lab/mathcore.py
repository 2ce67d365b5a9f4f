"""Numerically stable scalar/vector primitives shared by every other module.

All functions accept array-likes, work in double precision, and either
return fully finite values or raise. Probability-vector arguments are
validated against the simplex (sum 1 within 1e-9, entries in [0, 1]).
"""

import numpy as np

_SIMPLEX_TOL = 1e-9


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateInputError(ValueError):
    """Input on which the operation is undefined (zero norms, all-identical values)."""


class ContractError(ValueError):
    """Caller violated a shape, length, or precondition contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """Invalid or unsatisfiable configuration."""


def require_finite(arr, name="input"):
    arr = np.asarray(arr, dtype=float)
    if arr.size and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite (no NaN/Inf)")
    return arr


def softmax(logits):
    """Softmax over the last axis, stabilised by max-subtraction.

    Invariant under adding a constant to all logits; safe for logits of
    any finite magnitude.
    """
    logits = require_finite(logits, "logits")
    if logits.size == 0:
        raise DomainError("softmax needs a non-empty input")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_sum_exp(v):
    """log(sum(exp(v))) over the last axis without overflow."""
    v = require_finite(v, "log_sum_exp input")
    if v.size == 0:
        raise DomainError("log_sum_exp needs a non-empty input")
    m = v.max(axis=-1, keepdims=True)
    out = m.squeeze(-1) + np.log(np.exp(v - m).sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def _validate_simplex(p):
    if p.shape[-1] < 2:
        raise DomainError("probability vectors need length >= 2")
    if np.any(p < -_SIMPLEX_TOL) or np.any(p > 1.0 + _SIMPLEX_TOL):
        raise DomainError("probability entries must lie in [0, 1]")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > _SIMPLEX_TOL):
        raise DomainError("probability entries must sum to 1")


def entropy(p):
    """Shannon entropy in nats over the last axis, with 0*log(0) := 0."""
    p = require_finite(p, "probabilities")
    _validate_simplex(p)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    out = -plogp.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def cosine_similarity(u, v):
    u = require_finite(u, "u")
    v = require_finite(v, "v")
    if u.shape != v.shape or u.ndim != 1:
        raise ContractError("cosine_similarity needs two equal-length vectors")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine_similarity is undefined for zero-norm vectors")
    return float(np.dot(u, v) / (nu * nv))


def l1_norm(v):
    v = require_finite(v, "v")
    return float(np.abs(v).sum())


def l2_norm(v):
    v = require_finite(v, "v")
    return float(np.sqrt((v * v).sum()))
