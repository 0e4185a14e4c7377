"""Brute-force references used to cross-check the fast paths.

Nothing in here imports the decoder or the closed-form marginal: the checks
are only meaningful if the two sides are written separately.
"""
from __future__ import annotations

import itertools
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import ActionChunk
from .errors import ConfigError, CoverageError, ValidationError

TABLE_FORMAT = "dact-tabulated"
TABLE_VERSION = 1


# ---------------------------------------------------------------------------
# forward marginals by dense matrix products


def transition_matrix(beta: float, vocab_size: int) -> np.ndarray:
    """Column-stochastic ``V x V`` absorbing-mask kernel; column ``a`` is ``Q e_a``."""
    if not 0.0 <= beta <= 1.0:
        raise ValidationError("beta outside [0, 1]")
    M = vocab_size - 1
    Q = np.zeros((vocab_size, vocab_size))
    for a in range(vocab_size):
        Q[a, a] += 1.0 - beta
        Q[M, a] += beta
    return Q


def enumerate_forward_marginal(token: int, betas: Sequence[float], vocab_size: int) -> np.ndarray:
    if vocab_size > 300:
        raise ValidationError("dense oracle limited to vocab_size <= 300")
    Qbar = np.eye(vocab_size)
    for beta in betas:
        Qbar = transition_matrix(float(beta), vocab_size) @ Qbar
    e = np.zeros(vocab_size)
    e[token] = 1.0
    return Qbar @ e


# ---------------------------------------------------------------------------
# tabulated posterior model


class TabulatedModel:
    """Posterior lookup table over every token state of a tiny chunk.

    Keys are ``(context_id, state)`` where ``state`` is a tuple of ``L`` ids in
    ``0..K`` (``K`` is MASK). Contexts are passed as a 1-element sequence or int.
    """

    def __init__(self, L: int, num_classes: int, table: dict, n_contexts: int = 1):
        if L > 4 or num_classes > 3:
            raise ValidationError("tabulated models are limited to L <= 4, K <= 3")
        self.L = L
        self.num_classes = num_classes
        self.mask_id = num_classes
        self.n_contexts = n_contexts
        self.table = table

    @classmethod
    def random(cls, L: int, num_classes: int, rng, n_contexts: int = 1, concentration: float = 1.0):
        rng = np.random.default_rng(rng)
        table = {}
        for c in range(n_contexts):
            for state in itertools.product(range(num_classes + 1), repeat=L):
                table[(c, state)] = rng.dirichlet(np.full(num_classes, concentration), size=L)
        return cls(L, num_classes, table, n_contexts)

    def states(self):
        return list(self.table)

    def lookup(self, context_id: int, state: tuple) -> np.ndarray:
        try:
            return self.table[(context_id, tuple(int(s) for s in state))]
        except KeyError:
            raise CoverageError(f"no table entry for context {context_id}, state {tuple(state)}") from None

    def forward(self, context, tokens) -> np.ndarray:
        cid = int(np.asarray(context).reshape(-1)[0]) if np.ndim(context) else int(context)
        return self.lookup(cid, tuple(np.asarray(tokens).tolist())).copy()

    __call__ = forward

    def to_dict(self) -> dict:
        return {
            "format": TABLE_FORMAT,
            "version": TABLE_VERSION,
            "L": self.L,
            "K": self.num_classes,
            "n_contexts": self.n_contexts,
            "entries": [
                {"context": c, "state": list(state), "posteriors": post.tolist()}
                for (c, state), post in sorted(self.table.items())
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabulatedModel":
        if data.get("format") != TABLE_FORMAT or data.get("version") != TABLE_VERSION:
            raise ValidationError("not a tabulated-model fixture")
        table = {
            (e["context"], tuple(e["state"])): np.asarray(e["posteriors"], dtype=np.float64)
            for e in data["entries"]
        }
        return cls(data["L"], data["K"], table, data.get("n_contexts", 1))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "TabulatedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# step-by-step decode replay


def _ratio(kind: str, t: float) -> float:
    if kind == "cosine":
        return math.cos(math.pi / 2 * t)
    return 1.0 - t


def exhaustive_decode(tab: TabulatedModel, config, context=0) -> ActionChunk:
    """Replay hard-mode decoding with no re-masking, one rule at a time.

    Round r of T: look up the posteriors of the current state; the number of
    committed positions must reach ceil((1 - ratio((r+1)/T)) * L) (at least 1,
    all of them in the last round); the masked positions with the best score
    (lowest position on ties) take their most likely token (lowest id on ties).
    """
    scoring = getattr(config.scoring, "value", config.scoring)
    temp = getattr(config.temperature_mode, "value", config.temperature_mode)
    kind = getattr(config.schedule_kind, "value", config.schedule_kind)
    if temp != "hard" and scoring != "one_shot_parallel":
        raise ConfigError("the replay oracle only covers hard (argmax) decoding")
    if config.remask_threshold or config.remask_drop:
        raise ConfigError("the replay oracle does not model re-masking")
    if scoring not in ("max_confidence", "confidence_gap", "one_shot_parallel"):
        raise ConfigError(f"the replay oracle has no rule for {scoring}")

    L, K, MASK = tab.L, tab.num_classes, tab.mask_id
    T = 1 if scoring == "one_shot_parallel" else config.total_rounds
    cid = int(np.asarray(context).reshape(-1)[0]) if np.ndim(context) else int(context)
    state = [MASK] * L
    for r in range(T):
        post = tab.lookup(cid, tuple(state)).tolist()
        if r == T - 1:
            target = L
        else:
            want = math.ceil((1.0 - _ratio(kind, (r + 1) / T)) * L - 1e-9)
            target = min(max(want, 1), L)

        def score(i):
            ranked = sorted(post[i], reverse=True)
            if scoring == "confidence_gap":
                return ranked[0] - ranked[1]
            return ranked[0]

        masked = [i for i in range(L) if state[i] == MASK]
        need = target - (L - len(masked))
        for i in sorted(masked, key=lambda i: (-score(i), i))[: max(need, 0)]:
            row = post[i]
            state[i] = max(range(K), key=lambda k: (row[k], -k))
    return ActionChunk(np.array(state), horizon=L, dims=1, mask_id=MASK)


# ---------------------------------------------------------------------------
# left-to-right baseline


def ar_baseline_decode(model, context) -> tuple[ActionChunk, int]:
    """Greedy strictly left-to-right decode, one forward per position."""
    cfg = model.config
    L, mask_id = cfg.L, cfg.mask_id
    tokens = np.full(L, mask_id, dtype=np.int64)
    nfe = 0
    for i in range(L):
        P = model.forward(context, tokens)
        nfe += 1
        tokens[i] = int(np.argmax(P[i]))
    return ActionChunk(tokens, horizon=L, dims=1, mask_id=mask_id), nfe


def suffix_corruption():
    """AR-emulation masking: hide a random suffix, score only its first position."""

    def corrupt(chunk: ActionChunk, rng):
        j = int(rng.integers(0, chunk.length))
        tokens = chunk.tokens.copy()
        tokens[j:] = chunk.mask_id
        scored = np.zeros(chunk.length, dtype=bool)
        scored[j] = True
        return tokens, scored

    return corrupt


__all__ = [
    "transition_matrix",
    "enumerate_forward_marginal",
    "TabulatedModel",
    "exhaustive_decode",
    "ar_baseline_decode",
    "suffix_corruption",
]
