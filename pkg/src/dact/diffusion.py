"""Absorbing-mask forward corruption and the masked cross-entropy objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import ActionChunk
from .errors import DomainError, ValidationError

PROB_FLOOR = 1e-12


@dataclass
class CorruptionOutcome:
    corrupted: ActionChunk
    masked_set: np.ndarray  # ascending position indices
    gamma_used: float

    def mask_vector(self) -> np.ndarray:
        m = np.zeros(self.corrupted.length, dtype=bool)
        m[self.masked_set] = True
        return m


def _require_clean(chunk: ActionChunk) -> None:
    if chunk.has_mask():
        raise ValidationError("input chunk already contains MASK tokens")


def _apply_mask(chunk: ActionChunk, positions: np.ndarray, gamma_used: float) -> CorruptionOutcome:
    tokens = chunk.tokens.copy()
    positions = np.sort(np.asarray(positions, dtype=np.int64))
    tokens[positions] = chunk.mask_id
    corrupted = ActionChunk(tokens, horizon=chunk.horizon, dims=chunk.dims, mask_id=chunk.mask_id)
    return CorruptionOutcome(corrupted, positions, float(gamma_used))


def mask_count(gamma: float, L: int) -> int:
    # round-half-to-even as in Python's round()
    return int(round(gamma * L))


def corrupt_fixed_count(chunk: ActionChunk, gamma: float, rng: np.random.Generator) -> CorruptionOutcome:
    """Mask exactly ``round(gamma * L)`` positions chosen uniformly without replacement."""
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma={gamma} outside (0, 1]")
    _require_clean(chunk)
    n = mask_count(gamma, chunk.length)
    positions = rng.permutation(chunk.length)[:n]
    return _apply_mask(chunk, positions, gamma)


def corrupt_bernoulli(chunk: ActionChunk, beta_bar: float, rng: np.random.Generator) -> CorruptionOutcome:
    """Mask each position independently with probability ``beta_bar``."""
    if not 0.0 <= beta_bar <= 1.0:
        raise DomainError(f"beta_bar={beta_bar} outside [0, 1]")
    _require_clean(chunk)
    hit = rng.random(chunk.length) < beta_bar
    return _apply_mask(chunk, np.flatnonzero(hit), beta_bar)


def cumulative_beta(betas: Sequence[float]) -> float:
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(betas < 0) or np.any(betas > 1):
        raise DomainError("every beta must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - betas))


def forward_marginal(token: int, betas: Sequence[float], vocab_size: int) -> np.ndarray:
    """Closed-form distribution over ``vocab_size`` symbols after the given steps.

    The mask symbol is the last id. A masked input stays masked.
    """
    mask_id = vocab_size - 1
    if not 0 <= token < vocab_size:
        raise ValidationError(f"token {token} outside vocabulary of size {vocab_size}")
    bbar = cumulative_beta(betas)
    out = np.zeros(vocab_size)
    out[token] += 1.0 - bbar
    out[mask_id] += bbar
    return out


def masked_ce(posteriors: np.ndarray, targets, masked_set) -> float:
    """Summed negative log-likelihood of the targets at the masked positions.

    ``posteriors`` is ``(L, K)``; probabilities are floored at ``PROB_FLOOR``
    before the log.
    """
    P = np.asarray(posteriors, dtype=np.float64)
    tgt = targets.tokens if isinstance(targets, ActionChunk) else np.asarray(targets, dtype=np.int64)
    idx = np.asarray(masked_set, dtype=np.int64)
    if P.ndim != 2 or P.shape[0] != tgt.shape[0]:
        raise ValidationError("posteriors must be (L, K) matching the targets")
    if idx.size == 0:
        raise ValidationError("masked set is empty")
    if np.any(tgt[idx] >= P.shape[1]):
        raise ValidationError("targets at masked positions must be real action tokens")
    p = P[idx, tgt[idx]]
    return float(-np.sum(np.log(np.maximum(p, PROB_FLOOR))))


__all__ = [
    "CorruptionOutcome",
    "PROB_FLOOR",
    "mask_count",
    "corrupt_fixed_count",
    "corrupt_bernoulli",
    "cumulative_beta",
    "forward_marginal",
    "masked_ce",
]
