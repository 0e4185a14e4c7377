"""Self-check suites run by ``dact verify``.

Each suite returns a :class:`SuiteResult`; none of them needs a dataset or a
trained model. The decode suites drive the production decoder against the
independent replay in :mod:`dact.oracles`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .codec import ActionChunk, detokenize_chunk, fit_bins, tokenize_chunk, tokenize_values
from .decoder import CountingModel, DecodeConfig, Scoring, check_trace_invariants, decode
from .diffusion import forward_marginal, masked_ce
from .model import ModelConfig, PolicyModel, grad_check
from .oracles import TabulatedModel, ar_baseline_decode, enumerate_forward_marginal, exhaustive_decode
from .schedules import MaskSchedule, ThresholdSchedule, eta_abs, gamma, keep_count_for_round, tau
from .seeding import Stream, stream_rng


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0
    metrics: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22} {self.detail}  ({self.seconds:.2f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str, dict]]) -> SuiteResult:
    t0 = time.perf_counter()
    passed, detail, metrics = fn()
    return SuiteResult(name, bool(passed), detail, time.perf_counter() - t0, metrics)


# ---------------------------------------------------------------------------


def schedule_exactness() -> tuple[bool, str, dict]:
    errs = [abs(gamma(0.0) - 1.0), abs(gamma(0.5) - math.cos(math.pi / 4)), abs(gamma(2 / 3) - 0.5)]
    worst = max(errs)
    return worst < 1e-12, f"max |err| {worst:.2e}", {"max_err": worst}


def schedule_properties(seed: int = 0, cases: int = 200) -> tuple[bool, str, dict]:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        T = int(rng.integers(1, 30))
        L = int(rng.integers(1, 80))
        kind = ("cosine", "linear")[int(rng.integers(2))]
        sch = MaskSchedule(kind, T, L)
        counts = [keep_count_for_round(r, sch) for r in range(T)]
        if counts[-1] != L or any(b < a for a, b in zip(counts, counts[1:])) or counts[0] < 1:
            bad += 1
        g = [gamma(r / T, kind) for r in range(T)]
        if any(b > a for a, b in zip(g, g[1:])) or abs(g[0] - 1.0) > 0:
            bad += 1
        taus = [tau(r / T, "decay") for r in range(T)]
        if any(b > a for a, b in zip(taus, taus[1:])):
            bad += 1
        ts = ThresholdSchedule(eta_abs_start=float(rng.random() * 0.5), eta_abs_end=0.9)
        etas = [eta_abs(r, T, ts) for r in range(T)]
        if any(b < a for a, b in zip(etas, etas[1:])):
            bad += 1
    return bad == 0, f"{cases} random schedules, {bad} violations", {"violations": bad}


def forward_marginal_oracle(seed: int = 0, cases: int = 100) -> tuple[bool, str, dict]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        V = int(rng.integers(2, 40))
        token = int(rng.integers(0, V - 1))
        betas = rng.random(int(rng.integers(1, 25))) * rng.random()
        dev = np.max(np.abs(forward_marginal(token, betas, V) - enumerate_forward_marginal(token, betas, V)))
        worst = max(worst, float(dev))
    return worst < 1e-12, f"{cases} cases, max |dev| {worst:.2e}", {"max_dev": worst}


def masked_ce_values(seed: int = 0) -> tuple[bool, str, dict]:
    rng = np.random.default_rng(seed)
    worst_uniform = 0.0
    worst_perfect = 0.0
    for _ in range(20):
        L = int(rng.integers(1, 60))
        K = int(rng.integers(2, 300))
        targets = rng.integers(0, K, size=L)
        masked = np.flatnonzero(rng.random(L) < 0.5)
        if masked.size == 0:
            masked = np.array([0])
        uniform = np.full((L, K), 1.0 / K)
        worst_uniform = max(worst_uniform, abs(masked_ce(uniform, targets, masked) - masked.size * math.log(K)))
        perfect = np.zeros((L, K))
        perfect[np.arange(L), targets] = 1.0
        worst_perfect = max(worst_perfect, abs(masked_ce(perfect, targets, masked)))
    ok = worst_uniform < 1e-9 and worst_perfect == 0.0
    return ok, f"uniform |err| {worst_uniform:.2e}, perfect loss {worst_perfect:.1e}", {
        "uniform_err": worst_uniform, "perfect_loss": worst_perfect}


def tiny_model(seed: int = 0) -> PolicyModel:
    cfg = ModelConfig(vocab_size=6, context_vocab=4, L=6, context_len=2, embed_dim=8, layers=2, heads=2,
                      ff_dim=16, init_std=0.3, head_init_std=0.3)
    return PolicyModel(cfg, rng=stream_rng(seed, Stream.INIT))


def gradient_check(seed: int = 0) -> tuple[bool, str, dict]:
    model = tiny_model(seed)
    rng = np.random.default_rng(seed)
    L, K = model.config.L, model.config.num_classes
    B = 3
    ctx = rng.integers(0, model.config.context_vocab, size=(B, model.config.context_len))
    targets = rng.integers(0, K, size=(B, L))
    loss_mask = rng.random((B, L)) < 0.6
    loss_mask[:, 0] = True
    corrupted = np.where(loss_mask, model.config.mask_id, targets)
    err = grad_check(model, (ctx, corrupted, targets, loss_mask), epsilon=1e-4)
    return err < 1e-4, f"max rel err {err:.2e}", {"max_rel_err": err}


def decode_oracle(seed: int = 0, models: int = 50) -> tuple[bool, str, dict]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    runs = 0
    for m in range(models):
        L = int(rng.integers(1, 5))
        K = int(rng.integers(2, 4))
        tab = TabulatedModel.random(L, K, rng, concentration=float(rng.choice([0.3, 1.0, 5.0])))
        for scoring in (Scoring.MAX_CONFIDENCE, Scoring.CONFIDENCE_GAP, Scoring.ONE_SHOT_PARALLEL):
            for T in (1, 2, 3, 5, 12):
                for kind in ("cosine", "linear"):
                    cfg = DecodeConfig(total_rounds=T, scoring=scoring, temperature_mode="hard",
                                       schedule_kind=kind, seed=m)
                    got, _ = decode(tab, 0, cfg)
                    runs += 1
                    if got != exhaustive_decode(tab, cfg):
                        mismatches += 1
    return mismatches == 0, f"{models} tables, {runs} decodes, {mismatches} mismatches", {
        "runs": runs, "mismatches": mismatches}


def nfe_claim(seed: int = 0) -> tuple[bool, str, dict]:
    from .taskbench import CONTEXT_LEN, D_ACT, DEFAULT_HORIZON, DEFAULT_LEVELS

    L = DEFAULT_HORIZON * D_ACT
    cfg = ModelConfig(vocab_size=257, context_vocab=DEFAULT_LEVELS, L=L, context_len=CONTEXT_LEN,
                      embed_dim=16, layers=1, heads=2, ff_dim=16)
    model = CountingModel(PolicyModel(cfg, rng=stream_rng(seed, Stream.INIT)))
    ctx = np.zeros(CONTEXT_LEN, dtype=np.int64)
    _, trace = decode(model, ctx, DecodeConfig(total_rounds=12, seed=seed), dims=D_ACT)
    diffusion_nfe = model.calls
    model.calls = 0
    _, ar_nfe = ar_baseline_decode(model, ctx)
    ar_calls = model.calls
    ratio = ar_calls / diffusion_nfe
    ok = diffusion_nfe == 12 == trace.nfe and ar_calls == ar_nfe == 56 and round(ratio, 1) == 4.7
    return ok, f"diffusion {diffusion_nfe}, autoregressive {ar_calls}, ratio {ratio:.3f}", {
        "diffusion_nfe": diffusion_nfe, "ar_nfe": ar_calls, "ratio": ratio}


class _RandomPosteriorModel:
    """Posteriors that depend on the whole token state, drawn afresh per call from a state hash."""

    def __init__(self, L: int, num_classes: int, seed: int, sharpness: float):
        self.L = L
        self.num_classes = num_classes
        self.mask_id = num_classes
        self.seed = seed
        self.sharpness = sharpness

    def forward(self, context, tokens):
        key = [self.seed, int(np.asarray(context).sum()), *np.asarray(tokens).tolist()]
        rng = np.random.default_rng(key)
        logits = rng.normal(size=(self.L, self.num_classes)) * self.sharpness
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def decoder_invariants(seed: int = 0, episodes: int = 1000) -> tuple[bool, str, dict]:
    rng = np.random.default_rng(seed)
    violations: dict[str, int] = {}
    for ep in range(episodes):
        L = int(rng.integers(1, 24))
        K = int(rng.integers(2, 9))
        model = _RandomPosteriorModel(L, K, int(rng.integers(1 << 30)), float(rng.choice([0.5, 2.0, 6.0])))
        cfg = DecodeConfig(
            total_rounds=int(rng.integers(1, 16)),
            scoring=rng.choice([s.value for s in Scoring]),
            temperature_mode=rng.choice(["decay", "fixed", "hard", "gamma"]),
            fixed_temperature=float(rng.uniform(0.2, 2.0)),
            remask_threshold=bool(rng.random() < 0.5),
            remask_drop=bool(rng.random() < 0.5),
            threshold_schedule=ThresholdSchedule(
                eta_abs_start=0.0, eta_abs_end=float(rng.uniform(0.3, 0.99)),
                eta_drop=float(rng.uniform(0.0, 0.4)),
                top_q=None if rng.random() < 0.5 else int(rng.integers(0, 4)),
            ),
            schedule_kind=rng.choice(["cosine", "linear"]),
            seed=int(rng.integers(1 << 31)),
        )
        ctx = np.array([ep])
        chunk, trace = decode(model, ctx, cfg)
        found = check_trace_invariants(trace, chunk, cfg, L)
        again, _ = decode(model, ctx, cfg)
        if again != chunk:
            found.append("determinism")
        for name in found:
            violations[name] = violations.get(name, 0) + 1
    total = sum(violations.values())
    detail = f"{episodes} episodes, {total} violations"
    if violations:
        detail += " " + ", ".join(f"{k}={v}" for k, v in sorted(violations.items()))
    return total == 0, detail, {"violations": violations}


def tokenizer_properties(seed: int = 0, n_values: int = 100_000) -> tuple[bool, str, dict]:
    rng = np.random.default_rng(seed)
    data = np.column_stack([rng.normal(size=(5000, 6)), (rng.random(5000) > 0.5).astype(float)])
    spec = fit_bins(data, num_bins=256)
    problems = []
    for d in range(6):
        v = rng.normal(size=n_values) * 1.5
        lo, hi = spec.edges[d][0], spec.edges[d][-1]
        inside = v[(v >= lo) & (v < hi)]
        b = tokenize_values(inside, spec, d)
        rec = spec.centers[d][b]
        if np.any(np.abs(rec - inside) > spec.bin_widths(d)[b]):
            problems.append(f"round-trip dim {d}")
        order = np.argsort(v, kind="stable")
        if np.any(np.diff(tokenize_values(v[order], spec, d)) < 0):
            problems.append(f"monotonicity dim {d}")
        once = tokenize_values(v, spec, d)
        if not np.array_equal(tokenize_values(spec.centers[d][once], spec, d), once):
            problems.append(f"idempotence dim {d}")
    g = rng.random(n_values) * 3 - 1
    gb = tokenize_values(g, spec, 6)
    if not np.array_equal(gb, (g >= 0.5).astype(np.int64)):
        problems.append("gripper binarization")
    if not np.array_equal(spec.centers[6][gb], (g >= 0.5).astype(float)):
        problems.append("gripper centers")
    chunk = np.column_stack([rng.normal(size=(8, 6)) * 0.5, (rng.random(8) > 0.5).astype(float)])
    tok = tokenize_chunk(chunk, spec)
    if not np.array_equal(tokenize_chunk(detokenize_chunk(tok, spec), spec).tokens, tok.tokens):
        problems.append("chunk idempotence")
    return not problems, (", ".join(problems) or f"{n_values} values x 6 dims, gripper exact"), {
        "problems": problems}


SUITES: dict[str, Callable[[], tuple[bool, str, dict]]] = {
    "schedule_exactness": schedule_exactness,
    "schedule_properties": schedule_properties,
    "forward_marginal": forward_marginal_oracle,
    "masked_ce": masked_ce_values,
    "grad_check": gradient_check,
    "decode_oracle": decode_oracle,
    "nfe": nfe_claim,
    "decoder_invariants": decoder_invariants,
    "tokenizer": tokenizer_properties,
}


def run_suites(names=None) -> list[SuiteResult]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suites: {unknown}")
    return [_timed(n, SUITES[n]) for n in names]


__all__ = ["SuiteResult", "SUITES", "run_suites", "tiny_model"]
