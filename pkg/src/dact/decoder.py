"""Iterative parallel refinement decoder.

Decoding starts from an all-MASK chunk and runs exactly ``T`` rounds, each with
one model forward. In round ``r`` (time ``t = r/T``) the masked positions are
ranked by a confidence score, the best ones are committed by tempered Gumbel
sampling until ``keep_count((r+1)/T)`` positions are committed in total, and
previously committed positions may be sent back to MASK by the threshold and
residual-drop checks. The last round commits everything that is left.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

import numpy as np

from . import kernels
from .codec import ActionChunk
from .errors import ConfigError, InvariantViolation, ModelContractError
from .schedules import (
    MaskSchedule,
    ScheduleKind,
    TemperatureMode,
    ThresholdSchedule,
    eta_abs,
    gamma,
    keep_count_for_round,
    tau,
)

TRACE_SCHEMA = "dact-trace/1"
ROW_SUM_TOL = 1e-6


class Scoring(str, Enum):
    MAX_CONFIDENCE = "max_confidence"
    CONFIDENCE_GAP = "confidence_gap"
    RANDOM_ORDER = "random_order"
    ONE_SHOT_PARALLEL = "one_shot_parallel"


@dataclass(frozen=True)
class DecodeConfig:
    total_rounds: int = 12
    scoring: Scoring = Scoring.MAX_CONFIDENCE
    temperature_mode: TemperatureMode = TemperatureMode.DECAY
    fixed_temperature: float = 1.0
    remask_threshold: bool = False
    remask_drop: bool = False
    threshold_schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    schedule_kind: ScheduleKind = ScheduleKind.COSINE
    early_exit: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scoring", Scoring(self.scoring))
        object.__setattr__(self, "temperature_mode", TemperatureMode(self.temperature_mode))
        object.__setattr__(self, "schedule_kind", ScheduleKind(self.schedule_kind))
        if isinstance(self.threshold_schedule, dict):
            object.__setattr__(self, "threshold_schedule", ThresholdSchedule(**self.threshold_schedule))
        if self.scoring is Scoring.ONE_SHOT_PARALLEL:
            object.__setattr__(self, "total_rounds", 1)
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("scoring", "temperature_mode", "schedule_kind"):
            d[k] = getattr(self, k).value
        return d

    def with_seed(self, seed: int) -> "DecodeConfig":
        return replace(self, seed=int(seed))


@dataclass
class RoundRecord:
    round: int
    t: float
    gamma: float
    tau: float
    keep_target: int
    tokens_before: np.ndarray
    posteriors: np.ndarray
    confidence: np.ndarray  # max-confidence s per position
    scores: np.ndarray  # ranking metric m per position
    keep_set: np.ndarray
    committed_tokens: np.ndarray
    remask_abs: np.ndarray
    remask_drop: np.ndarray
    tokens_after: np.ndarray
    s_ref: np.ndarray
    first_commit: np.ndarray

    @property
    def remask_set(self) -> np.ndarray:
        return np.union1d(self.remask_abs, self.remask_drop).astype(np.int64)

    def to_json(self, mask_id: int, include_posteriors: bool = False) -> dict[str, Any]:
        rec = {
            "schema": TRACE_SCHEMA,
            "round": self.round,
            "t": self.t,
            "gamma": self.gamma,
            "tau": self.tau,
            "keep_target": self.keep_target,
            "masked_before": np.flatnonzero(self.tokens_before == mask_id).tolist(),
            "masked_after": np.flatnonzero(self.tokens_after == mask_id).tolist(),
            "tokens_after": self.tokens_after.tolist(),
            "confidence": self.confidence.tolist(),
            "scores": self.scores.tolist(),
            "keep_set": self.keep_set.tolist(),
            "committed_tokens": self.committed_tokens.tolist(),
            "remask_abs": self.remask_abs.tolist(),
            "remask_drop": self.remask_drop.tolist(),
            "s_ref": [None if np.isnan(v) else float(v) for v in self.s_ref],
            "first_commit": self.first_commit.tolist(),
        }
        if include_posteriors:
            rec["posteriors"] = self.posteriors.tolist()
        return rec


@dataclass
class DecodeTrace:
    rounds: list[RoundRecord] = field(default_factory=list)
    nfe: int = 0
    mask_id: int = 0

    def to_jsonl(self, include_posteriors: bool = False) -> str:
        lines = []
        for r in self.rounds:
            rec = r.to_json(self.mask_id, include_posteriors)
            rec["nfe"] = self.nfe
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path, include_posteriors: bool = False) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl(include_posteriors))


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    for r in recs:
        if r.get("schema") != TRACE_SCHEMA:
            raise ConfigError(f"unsupported trace schema {r.get('schema')!r}")
    return recs


# ---------------------------------------------------------------------------
# per-round operations


def score_positions(posteriors: np.ndarray, mode: Scoring | str, rng: np.random.Generator | None = None) -> np.ndarray:
    mode = Scoring(mode)
    P = np.asarray(posteriors, dtype=np.float64)
    if mode is Scoring.RANDOM_ORDER:
        if rng is None:
            raise ConfigError("random_order scoring needs a generator")
        return rng.random(P.shape[0])
    if mode is Scoring.CONFIDENCE_GAP and P.shape[1] < 2:
        raise ConfigError("confidence_gap needs at least 2 classes")
    s, g = kernels.max_and_gap(P)
    return g if mode is Scoring.CONFIDENCE_GAP else s


def select_keep_set(scores: np.ndarray, currently_masked, keep_target: int) -> np.ndarray:
    """Masked positions to commit so that ``keep_target`` positions are committed in total.

    ``currently_masked`` is a boolean vector or an index set. Ties go to the
    lower index. Returns an empty set if the target is already met.
    """
    scores = np.asarray(scores, dtype=np.float64)
    masked = np.zeros(scores.shape[0], dtype=bool)
    cm = np.asarray(currently_masked)
    if cm.dtype == bool:
        masked[:] = cm
    else:
        masked[cm.astype(np.int64)] = True
    already = scores.shape[0] - int(masked.sum())
    return kernels.select_top(scores, masked, keep_target - already)


def gumbel_commit(posteriors: np.ndarray, positions, tau_value: float, rng: np.random.Generator | None) -> np.ndarray:
    """Draw a token per position from ``softmax(log p / tau)`` via Gumbel-max.

    ``tau == 0`` is exact argmax (lowest token id on ties) and draws no noise.
    """
    if tau_value < 0:
        raise ConfigError("temperature must be >= 0")
    positions = np.asarray(positions, dtype=np.int64)
    P = np.asarray(posteriors, dtype=np.float64)[positions]
    with np.errstate(divide="ignore"):
        logp = np.log(P)
    if tau_value == 0.0 or positions.size == 0:
        noise = np.zeros_like(logp)
    else:
        noise = rng.gumbel(size=logp.shape)
    return kernels.gumbel_argmax(logp, noise, tau_value)


@dataclass
class RemaskState:
    committed: np.ndarray  # bool, committed before the current round
    s_ref: np.ndarray  # NaN where no reference is cached


def secondary_remask(state: RemaskState, confidence: np.ndarray, round_index: int,
                     config: DecodeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Threshold and residual-drop checks over positions committed before this round.

    Returns ``(R_abs, R_drop)`` as ascending index arrays.
    """
    empty = np.empty(0, dtype=np.int64)
    cand = np.asarray(state.committed, dtype=bool)
    r_abs, r_drop = empty, empty
    sched = config.threshold_schedule
    if config.remask_threshold:
        thr = eta_abs(round_index, config.total_rounds, sched)
        r_abs = np.flatnonzero(cand & (confidence < thr))
    if config.remask_drop:
        delta = state.s_ref - confidence
        valid = cand & ~np.isnan(state.s_ref)
        if sched.top_q is None:
            r_drop = np.flatnonzero(valid & (delta > sched.eta_drop))
        else:
            degraded = valid & (delta > 0)
            r_drop = kernels.select_top(np.where(degraded, delta, 0.0), degraded, sched.top_q)
    return r_abs.astype(np.int64), r_drop.astype(np.int64)


# ---------------------------------------------------------------------------
# driver


def model_shape(model) -> tuple[int, int, int]:
    """``(L, K, mask_id)`` of a model or tabulated model."""
    cfg = getattr(model, "config", None)
    if cfg is not None and hasattr(cfg, "num_classes"):
        return cfg.L, cfg.num_classes, cfg.mask_id
    return model.L, model.num_classes, model.mask_id


def _check_posteriors(P: np.ndarray, L: int, K: int) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.shape != (L, K):
        raise ModelContractError(f"posteriors have shape {P.shape}, expected {(L, K)}")
    if not np.all(np.isfinite(P)) or np.any(P < 0):
        raise ModelContractError("posteriors must be finite and non-negative")
    if np.max(np.abs(P.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
        raise ModelContractError("posterior rows must sum to 1")
    return P


def decode(model, context, config: DecodeConfig, dims: int = 1) -> tuple[ActionChunk, DecodeTrace]:
    L, K, mask_id = model_shape(model)
    if L % dims:
        raise ConfigError(f"chunk length {L} not divisible by dims={dims}")
    T = config.total_rounds
    schedule = MaskSchedule(config.schedule_kind, T, L)
    one_shot = config.scoring is Scoring.ONE_SHOT_PARALLEL
    rng = np.random.default_rng(config.seed)

    tokens = np.full(L, mask_id, dtype=np.int64)
    s_ref = np.full(L, np.nan)
    first_commit = np.full(L, -1, dtype=np.int64)
    trace = DecodeTrace(mask_id=mask_id)
    empty = np.empty(0, dtype=np.int64)

    for r in range(T):
        t = schedule.t(r)
        masked = tokens == mask_id
        if config.early_exit and not masked.any():
            break
        before = tokens.copy()
        P = _check_posteriors(model.forward(context, tokens), L, K)
        trace.nfe += 1

        conf, _ = kernels.max_and_gap(P)
        if one_shot:
            scores = conf
            tau_r = 0.0
        else:
            scores = score_positions(P, config.scoring, rng)
            tau_r = tau(t, config.temperature_mode, config.fixed_temperature, config.schedule_kind)
        target = keep_count_for_round(r, schedule)
        keep = select_keep_set(scores, masked, target)
        new_tokens = gumbel_commit(P, keep, tau_r, rng)

        last = r == T - 1
        if not last and (config.remask_threshold or config.remask_drop):
            r_abs, r_drop = secondary_remask(RemaskState(~masked, s_ref), conf, r, config)
        else:
            r_abs, r_drop = empty, empty

        tokens[keep] = new_tokens
        s_ref[keep] = conf[keep]
        first_commit[keep] = r
        remask = np.union1d(r_abs, r_drop).astype(np.int64)
        if remask.size:
            if np.any(before[remask] == mask_id):
                raise InvariantViolation("re-mask soundness", f"round {r} re-masked an uncommitted position")
            tokens[remask] = mask_id
            s_ref[remask] = np.nan
            first_commit[remask] = -1

        trace.rounds.append(
            RoundRecord(
                round=r, t=t, gamma=gamma(t, schedule), tau=tau_r, keep_target=target,
                tokens_before=before, posteriors=P, confidence=conf, scores=np.asarray(scores),
                keep_set=keep, committed_tokens=new_tokens, remask_abs=r_abs, remask_drop=r_drop,
                tokens_after=tokens.copy(), s_ref=s_ref.copy(), first_commit=first_commit.copy(),
            )
        )

    if np.any(tokens == mask_id):
        raise InvariantViolation("coverage", "MASK remains after the final round")
    if trace.nfe != len(trace.rounds):
        raise InvariantViolation("NFE accounting", f"{trace.nfe} forwards vs {len(trace.rounds)} rounds")
    chunk = ActionChunk(tokens, horizon=L // dims, dims=dims, mask_id=mask_id)
    return chunk, trace


class CountingModel:
    """Wraps a model and counts forward calls."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self.model, name)

    def forward(self, context, tokens):
        self.calls += 1
        return self.model.forward(context, tokens)


def check_trace_invariants(trace: DecodeTrace, chunk: ActionChunk, config: DecodeConfig, L: int) -> list[str]:
    """Names of the decoder invariants the trace violates (empty when all hold)."""
    bad = []
    mask_id = trace.mask_id
    if trace.nfe != config.total_rounds and not config.early_exit:
        bad.append("nfe")
    if chunk.has_mask():
        bad.append("coverage")
    schedule = MaskSchedule(config.schedule_kind, config.total_rounds, L)
    for i, rec in enumerate(trace.rounds):
        committed_before = rec.tokens_before != mask_id
        # persistence: committed tokens survive unless re-masked
        if i > 0:
            prev = trace.rounds[i - 1].tokens_after
            if not np.array_equal(prev, rec.tokens_before):
                bad.append("round chaining")
        rm = rec.remask_set
        if rm.size and not np.all(committed_before[rm]):
            bad.append("remask soundness")
        if np.intersect1d(rm, rec.keep_set).size:
            bad.append("commit and re-mask in the same round")
        stay = committed_before.copy()
        stay[rm] = False
        if not np.array_equal(rec.tokens_after[stay], rec.tokens_before[stay]):
            bad.append("commit persistence")
        if not np.all(rec.tokens_before[rec.keep_set] == mask_id):
            bad.append("keep set selects committed position")
        if rm.size == 0 and all(r.remask_set.size == 0 for r in trace.rounds[: i + 1]):
            if int(np.sum(rec.tokens_after != mask_id)) != keep_count_for_round(rec.round, schedule):
                bad.append("monotone committed count")
    return sorted(set(bad))


def decode_many(model, contexts: Iterable, config: DecodeConfig, seeds: Iterable[int], dims: int = 1):
    for ctx, seed in zip(contexts, seeds):
        yield decode(model, ctx, config.with_seed(seed), dims=dims)


__all__ = [
    "Scoring",
    "DecodeConfig",
    "RoundRecord",
    "DecodeTrace",
    "RemaskState",
    "score_positions",
    "select_keep_set",
    "gumbel_commit",
    "secondary_remask",
    "decode",
    "model_shape",
    "read_trace",
    "CountingModel",
    "check_trace_invariants",
    "decode_many",
]
