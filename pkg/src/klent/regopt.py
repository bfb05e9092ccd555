"""Closed-form KL + entropy regularized policy improvement.

Given action values ``q``, a prior policy and weights (alpha, beta), the
maximiser of

    E_{a~p}[q(a)] - beta * KL(p || prior) + alpha * H(p)

over the legal simplex is ``p(a) ~ exp((q(a) + beta * log prior(a)) / (alpha + beta))``.
Illegal actions are outside the optimisation domain and always get probability 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRIOR_FLOOR = 1e-12


@dataclass(frozen=True)
class RegWeights:
    alpha: float  # entropy weight
    beta: float  # reverse-KL weight

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ValueError(f"regularization weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be positive")


def _legal(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n:
        raise ValueError(f"mask length {mask.shape[-1]} does not match {n} actions")
    return mask


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax restricted to legal entries; illegal entries are -inf."""
    logits = np.asarray(logits, dtype=np.float64)
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.exp(masked_log_softmax(logits, mask))


def floored_log_prior(log_prior: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Clamp legal prior probabilities to >= PRIOR_FLOOR, renormalise, return logs."""
    p = np.where(mask, np.maximum(np.exp(log_prior), PRIOR_FLOOR), 0.0)
    p /= p.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return np.where(mask, np.log(p), -np.inf)


def improved_policy_batch(q: np.ndarray, log_prior: np.ndarray, mask: np.ndarray, w: RegWeights) -> np.ndarray:
    """Vectorised improved policy over rows of ``q`` / ``log_prior`` / ``mask``.

    ``log_prior`` may be unnormalised logits; it is masked, normalised and floored here.
    """
    mask = np.asarray(mask, dtype=bool)
    logp = floored_log_prior(masked_log_softmax(log_prior, mask), mask)
    qm = np.where(mask, np.asarray(q, dtype=np.float64), 0.0)
    if w.beta == 0.0:
        z = np.where(mask, qm / (w.alpha + w.beta), -np.inf)
    else:
        z = np.where(mask, (qm + w.beta * logp) / (w.alpha + w.beta), -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def improved_policy(q, prior, w: RegWeights, mask=None) -> np.ndarray:
    """Closed-form maximiser of the regularized objective for one state.

    >>> improved_policy(np.array([1.0, 0.0]), np.array([0.5, 0.5]), RegWeights(1.0, 0.0)).round(4)
    array([0.7311, 0.2689])
    """
    q = np.asarray(q, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if q.shape != prior.shape:
        raise ValueError(f"q and prior shapes differ: {q.shape} vs {prior.shape}")
    mask = _legal(mask, q.shape[-1])
    if not mask.any():
        raise ValueError("no legal actions")
    with np.errstate(divide="ignore"):
        log_prior = np.where(mask, np.log(np.maximum(prior, 0.0)), -np.inf)
    return improved_policy_batch(q, log_prior, mask, w)


def entropy(p, mask=None) -> float:
    p = np.asarray(p, dtype=np.float64)
    mask = _legal(mask, p.shape[-1])
    pl = p[mask]
    nz = pl > 0
    return float(-np.sum(pl[nz] * np.log(pl[nz])))


def kl_divergence(p, q, mask=None) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = _legal(mask, p.shape[-1])
    pl, ql = p[mask], q[mask]
    nz = pl > 0
    if np.any(ql[nz] <= 0):
        raise ValueError("KL undefined: reference has zero mass where p is positive")
    return float(max(np.sum(pl[nz] * (np.log(pl[nz]) - np.log(ql[nz]))), 0.0))


def objective(candidate, q, prior, w: RegWeights, mask=None) -> float:
    candidate = np.asarray(candidate, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = _legal(mask, candidate.shape[-1])
    expected = float(np.dot(candidate[mask], q[mask]))
    kl = kl_divergence(candidate, prior, mask) if w.beta > 0 else 0.0
    return expected - w.beta * kl + w.alpha * entropy(candidate, mask)
