"""Synthetic 2-D point-mass reaching benchmark.

A task is a start and a target in the unit square whose per-axis displacement
is at most ``MAX_DISPLACEMENT``. The scripted expert moves in ``H`` equal
straight-line steps. Actions keep the 7-dimensional layout
(3 translation, 3 rotation, 1 gripper); only the first two translation
dimensions move the point, the rest stay at zero.

Context tokens (all in ``0..levels-1``):
``[start_x, start_y, target_x, target_y, disp_x, disp_y]`` where positions are
quantised over [0, 1] and the displacement over
[-MAX_DISPLACEMENT, MAX_DISPLACEMENT].
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import ActionChunk, TokenizerSpec, detokenize_chunk, fit_bins, tokenize_chunk
from .decoder import DecodeConfig, Scoring, decode
from .errors import ChecksumError, ConfigError, ValidationError
from .schedules import TemperatureMode
from .seeding import Stream, sub_seed

D_ACT = 7
GRIPPER_DIM = 6
MOVING_DIMS = (0, 1)
DEFAULT_HORIZON = 8
DEFAULT_LEVELS = 64
CONTEXT_LEN = 6
SUCCESS_RADIUS = 0.05
WORKSPACE = ((0.0, 1.0), (0.0, 1.0))
# displacement is drawn uniformly from this box, so step sizes are uniform too
# and the 1st/99th-percentile bin clipping costs the expert almost nothing
MAX_DISPLACEMENT = 0.5
HELD_OUT_MODULUS = 10  # task_id % 10 == 9 is held out

DATASET_MAGIC = b"DACTDATA\n"
DATASET_VERSION = 1

ABLATION_COLUMNS = (
    "strategy",
    "temperature",
    "episodes",
    "successes",
    "success_rate",
    "mean_nfe",
    "wall_ms_per_decode",
    "rounds",
    "seed",
    "config_fingerprint",
    "task_digest",
)


@dataclass(frozen=True)
class TaskSpec:
    start: tuple[float, float]
    target: tuple[float, float]
    horizon: int = DEFAULT_HORIZON
    success_radius: float = SUCCESS_RADIUS
    task_id: int = 0
    levels: int = DEFAULT_LEVELS

    def __post_init__(self):
        for p in (self.start, self.target):
            for v, (lo, hi) in zip(p, WORKSPACE):
                if not lo <= v <= hi:
                    raise ValidationError("start and target must lie inside the workspace")
        if self.success_radius <= 0:
            raise ValidationError("success radius must be positive")

    @property
    def context(self) -> np.ndarray:
        return encode_context(np.array(self.start), np.array(self.target), self.levels)


def _quantise(v, lo, hi, levels):
    q = np.floor((np.asarray(v, dtype=np.float64) - lo) / (hi - lo) * levels).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def encode_context(start: np.ndarray, target: np.ndarray, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    pos = _quantise(np.concatenate([start, target]), 0.0, 1.0, levels)
    disp = _quantise(target - start, -MAX_DISPLACEMENT, MAX_DISPLACEMENT, levels)
    return np.concatenate([pos, disp])


def expert_chunk(task: TaskSpec) -> np.ndarray:
    step = (np.asarray(task.target) - np.asarray(task.start)) / task.horizon
    chunk = np.zeros((task.horizon, D_ACT))
    chunk[:, MOVING_DIMS[0]] = step[0]
    chunk[:, MOVING_DIMS[1]] = step[1]
    return chunk


def rollout(start, continuous_chunk: np.ndarray) -> np.ndarray:
    """Final position after applying every translation delta in order."""
    pos = np.array(start, dtype=np.float64)
    for row in continuous_chunk:
        pos = pos + row[list(MOVING_DIMS)]
    return pos


def is_success(task: TaskSpec, continuous_chunk: np.ndarray) -> bool:
    final = rollout(task.start, continuous_chunk)
    return bool(np.linalg.norm(final - np.asarray(task.target)) <= task.success_radius)


@dataclass
class EpisodeRecord:
    task: TaskSpec
    context: np.ndarray
    expert: np.ndarray
    seed: int

    @property
    def task_id(self) -> int:
        return self.task.task_id

    @property
    def held_out(self) -> bool:
        return self.task.task_id % HELD_OUT_MODULUS == HELD_OUT_MODULUS - 1


@dataclass
class Dataset:
    episodes: list[EpisodeRecord]
    tokenizer: TokenizerSpec
    seed: int
    horizon: int = DEFAULT_HORIZON
    levels: int = DEFAULT_LEVELS

    def split(self) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
        train = [e for e in self.episodes if not e.held_out]
        held = [e for e in self.episodes if e.held_out]
        return train, held

    def token_arrays(self, episodes: Sequence[EpisodeRecord] | None = None):
        eps = self.episodes if episodes is None else episodes
        ctx = np.stack([e.context for e in eps])
        tgt = np.stack([tokenize_chunk(e.expert, self.tokenizer).tokens for e in eps])
        return ctx, tgt

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        n = len(self.episodes)
        starts = np.array([e.task.start for e in self.episodes], dtype="<f8").reshape(n, 2)
        targets = np.array([e.task.target for e in self.episodes], dtype="<f8").reshape(n, 2)
        ids = np.array([e.task_id for e in self.episodes], dtype="<i8")
        seeds = np.array([e.seed for e in self.episodes], dtype="<u8")
        ctx = np.stack([e.context for e in self.episodes]).astype("<i8")
        experts = np.stack([e.expert for e in self.episodes]).astype("<f8")
        radius = {e.task.success_radius for e in self.episodes}
        blobs = [("starts", starts), ("targets", targets), ("task_ids", ids), ("seeds", seeds),
                 ("contexts", ctx), ("experts", experts)]
        header = {
            "format": "dact-dataset",
            "version": DATASET_VERSION,
            "episodes": n,
            "horizon": self.horizon,
            "d_act": D_ACT,
            "levels": self.levels,
            "seed": self.seed,
            "success_radius": radius.pop() if len(radius) == 1 else None,
            "tokenizer_checksum": self.tokenizer.checksum(),
            "tokenizer": self.tokenizer.to_dict(),
            "arrays": [{"name": k, "dtype": a.dtype.str, "shape": list(a.shape)} for k, a in blobs],
        }
        body = b"".join(a.tobytes() for _, a in blobs)
        header["body_sha256"] = hashlib.sha256(body).hexdigest()
        head = json.dumps(header, sort_keys=True).encode()
        return DATASET_MAGIC + head + b"\n" + body

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        if not data.startswith(DATASET_MAGIC):
            raise ValidationError("not a dataset file")
        rest = data[len(DATASET_MAGIC):]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        if header.get("version") != DATASET_VERSION:
            raise ValidationError(f"unsupported dataset version {header.get('version')}")
        tok = TokenizerSpec.from_dict(header["tokenizer"])
        if tok.checksum() != header["tokenizer_checksum"]:
            raise ValidationError("dataset tokenizer checksum mismatch")
        body = rest[nl + 1:]
        if hashlib.sha256(body).hexdigest() != header.get("body_sha256"):
            raise ChecksumError("dataset body checksum mismatch")
        arrays, off = {}, 0
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            nbytes = count * dt.itemsize
            if off + nbytes > len(body):
                raise ValidationError("dataset body shorter than its header declares")
            arrays[spec["name"]] = np.frombuffer(body[off:off + nbytes], dtype=dt).reshape(spec["shape"])
            off += nbytes
        if off != len(body):
            raise ValidationError("dataset body length does not match its header")
        radius = header.get("success_radius") or SUCCESS_RADIUS
        episodes = []
        for i in range(header["episodes"]):
            task = TaskSpec(
                start=tuple(float(v) for v in arrays["starts"][i]),
                target=tuple(float(v) for v in arrays["targets"][i]),
                horizon=header["horizon"],
                success_radius=radius,
                task_id=int(arrays["task_ids"][i]),
                levels=header["levels"],
            )
            episodes.append(EpisodeRecord(task, arrays["contexts"][i].astype(np.int64),
                                          arrays["experts"][i].astype(np.float64), int(arrays["seeds"][i])))
        return cls(episodes, tok, header["seed"], header["horizon"], header["levels"])

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def sample_task(rng: np.random.Generator, task_id: int, horizon: int = DEFAULT_HORIZON,
                levels: int = DEFAULT_LEVELS, success_radius: float = SUCCESS_RADIUS) -> TaskSpec:
    lo = np.array([b[0] for b in WORKSPACE])
    hi = np.array([b[1] for b in WORKSPACE])
    disp = MAX_DISPLACEMENT * (2.0 * rng.random(2) - 1.0)
    # start uniform over the positions that keep the target inside the workspace
    s_lo = np.maximum(lo, lo - disp)
    s_hi = np.minimum(hi, hi - disp)
    start = s_lo + (s_hi - s_lo) * rng.random(2)
    target = np.clip(start + disp, lo, hi)
    return TaskSpec(tuple(start.tolist()), tuple(target.tolist()), horizon, success_radius, task_id, levels)


def generate_dataset(n_tasks: int, seed: int, horizon: int = DEFAULT_HORIZON, levels: int = DEFAULT_LEVELS,
                     num_bins: int = 256) -> Dataset:
    """Sample tasks, script expert chunks and fit the tokenizer on them."""
    if n_tasks < 1:
        raise ValidationError("n_tasks must be >= 1")
    episodes = []
    for i in range(n_tasks):
        ep_seed = sub_seed(seed, Stream.DATA, i)
        task = sample_task(np.random.default_rng(ep_seed), i, horizon, levels)
        episodes.append(EpisodeRecord(task, task.context, expert_chunk(task), ep_seed))
    actions = np.concatenate([e.expert for e in episodes])
    # constant controls get fixed uniform bins; quantiles would be degenerate
    fixed = {d: (-1.0, 1.0) for d in range(D_ACT) if d not in MOVING_DIMS and d != GRIPPER_DIM}
    tok = fit_bins(actions, num_bins=num_bins, gripper_dim_index=GRIPPER_DIM, fixed_ranges=fixed)
    return Dataset(episodes, tok, seed, horizon, levels)


def evaluation_tasks(n_episodes: int, seed: int, horizon: int = DEFAULT_HORIZON,
                     levels: int = DEFAULT_LEVELS) -> list[TaskSpec]:
    """Fresh tasks drawn from the evaluation stream (disjoint from the data stream)."""
    return [sample_task(np.random.default_rng(sub_seed(seed, Stream.EVAL, i)), i, horizon, levels)
            for i in range(n_episodes)]


def task_digest(tasks: Iterable[TaskSpec]) -> str:
    h = hashlib.sha256()
    for t in tasks:
        h.update(np.array([t.task_id], dtype="<i8").tobytes())
        h.update(np.array(t.start + t.target, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# policies


class DiffusionPolicy:
    def __init__(self, model, config: DecodeConfig):
        self.model = model
        self.config = config

    def act(self, task: TaskSpec, seed: int):
        chunk, trace = decode(self.model, task.context, self.config.with_seed(seed), dims=D_ACT)
        return chunk, trace.nfe


class ExpertPolicy:
    """Emits the tokenized expert chunk: the upper bound for a given tokenizer."""

    def __init__(self, tokenizer: TokenizerSpec):
        self.tokenizer = tokenizer

    def act(self, task: TaskSpec, seed: int):
        return tokenize_chunk(expert_chunk(task), self.tokenizer), 0


class RandomPolicy:
    """Uniformly random action tokens: the chance floor."""

    def __init__(self, tokenizer: TokenizerSpec):
        self.tokenizer = tokenizer

    def act(self, task: TaskSpec, seed: int):
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, self.tokenizer.num_bins, size=task.horizon * D_ACT)
        return ActionChunk(tokens, task.horizon, D_ACT, self.tokenizer.mask_id), 0


@dataclass
class EvalReport:
    label: str
    strategy: str
    temperature: str
    episodes: int
    successes: int
    success_rate: float
    mean_nfe: float
    wall_ms_per_decode: float
    rounds: int
    seed: int
    config_fingerprint: str
    task_digest: str
    nfe_per_episode: list[int] = field(default_factory=list, repr=False)
    successes_per_episode: list[bool] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ABLATION_COLUMNS}


def config_fingerprint(config: DecodeConfig | None, extra: dict | None = None) -> str:
    payload = {"decode": None if config is None else {k: v for k, v in config.to_dict().items() if k != "seed"}}
    payload.update(extra or {})
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate(model, tokenizer: TokenizerSpec, decode_config: DecodeConfig | None = None,
             n_episodes: int | None = None, seed: int = 0, tasks: Sequence[TaskSpec] | None = None,
             label: str = "") -> EvalReport:
    """Roll out a policy on each task and count successes.

    ``model`` is a :class:`~dact.model.PolicyModel` (decoded with
    ``decode_config``) or any object with ``act(task, seed) -> (chunk, nfe)``.
    Tasks default to ``n_episodes`` fresh evaluation tasks from ``seed``.
    """
    if hasattr(model, "act"):
        policy = model
    else:
        if decode_config is None:
            raise ConfigError("decode_config is required to evaluate a model")
        cfg = model.config
        if cfg.vocab_size != tokenizer.vocab_size:
            raise ConfigError(
                f"model vocabulary {cfg.vocab_size} does not match tokenizer vocabulary {tokenizer.vocab_size}"
            )
        policy = DiffusionPolicy(model, decode_config)
    if tasks is None:
        if n_episodes is None:
            raise ValidationError("give either tasks or n_episodes")
        tasks = evaluation_tasks(n_episodes, seed)
    tasks = list(tasks)
    nfes, wins = [], []
    t0 = time.perf_counter()
    for task in tasks:
        chunk, nfe = policy.act(task, sub_seed(seed, Stream.DECODE, task.task_id))
        wins.append(is_success(task, detokenize_chunk(chunk, tokenizer)))
        nfes.append(int(nfe))
    wall = (time.perf_counter() - t0) / max(len(tasks), 1) * 1e3
    successes = int(sum(wins))
    dc = decode_config if not hasattr(model, "act") else getattr(policy, "config", None)
    return EvalReport(
        label=label or (type(policy).__name__ if dc is None else f"{dc.scoring.value}/{dc.temperature_mode.value}"),
        strategy="" if dc is None else dc.scoring.value,
        temperature="" if dc is None else dc.temperature_mode.value,
        episodes=len(tasks),
        successes=successes,
        success_rate=successes / len(tasks) if tasks else 0.0,
        mean_nfe=float(np.mean(nfes)) if nfes else 0.0,
        wall_ms_per_decode=wall,
        rounds=0 if dc is None else dc.total_rounds,
        seed=seed,
        config_fingerprint=config_fingerprint(dc, {"tokenizer": tokenizer.checksum()}),
        task_digest=task_digest(tasks),
        nfe_per_episode=nfes,
        successes_per_episode=wins,
    )


STRATEGIES = (Scoring.ONE_SHOT_PARALLEL, Scoring.RANDOM_ORDER, Scoring.CONFIDENCE_GAP, Scoring.MAX_CONFIDENCE)
TEMPERATURES = (TemperatureMode.HARD, TemperatureMode.FIXED, TemperatureMode.DECAY)


def ablation_grid(base: DecodeConfig | None = None) -> list[DecodeConfig]:
    """Every decoding strategy crossed with every choice temperature (4 x 3)."""
    base = base or DecodeConfig()
    grid = []
    for s in STRATEGIES:
        for temp in TEMPERATURES:
            rounds = 1 if s is Scoring.ONE_SHOT_PARALLEL else base.total_rounds
            grid.append(DecodeConfig(
                total_rounds=rounds, scoring=s, temperature_mode=temp,
                fixed_temperature=base.fixed_temperature, remask_threshold=base.remask_threshold,
                remask_drop=base.remask_drop, threshold_schedule=base.threshold_schedule,
                schedule_kind=base.schedule_kind, early_exit=base.early_exit, seed=base.seed,
            ))
    return grid


def run_ablation(model, tokenizer: TokenizerSpec, grid: Sequence[DecodeConfig] | None = None,
                 n_episodes: int = 100, seed: int = 0, tasks: Sequence[TaskSpec] | None = None) -> list[EvalReport]:
    """Evaluate every grid cell on the same task instances and decode seeds."""
    grid = list(grid) if grid is not None else ablation_grid()
    tasks = list(tasks) if tasks is not None else evaluation_tasks(n_episodes, seed)
    return [evaluate(model, tokenizer, cfg, seed=seed, tasks=tasks) for cfg in grid]


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(ABLATION_COLUMNS), lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.row()
        row["success_rate"] = f"{r.success_rate:.6f}"
        row["mean_nfe"] = f"{r.mean_nfe:.3f}"
        row["wall_ms_per_decode"] = f"{r.wall_ms_per_decode:.3f}"
        w.writerow(row)
    return buf.getvalue()


def ablation_table(reports: Sequence[EvalReport]) -> str:
    """Strategy x temperature success-rate grid as fixed-width text."""
    temps = [t.value for t in TEMPERATURES]
    cell = {(r.strategy, r.temperature): r.success_rate for r in reports}
    lines = ["strategy".ljust(20) + "".join(t.rjust(10) for t in temps)]
    for s in STRATEGIES:
        vals = [cell.get((s.value, t)) for t in temps]
        lines.append(s.value.ljust(20) + "".join(("-" if v is None else f"{v:.3f}").rjust(10) for v in vals))
    return "\n".join(lines)


__all__ = [
    "D_ACT",
    "TaskSpec",
    "EpisodeRecord",
    "Dataset",
    "EvalReport",
    "encode_context",
    "MAX_DISPLACEMENT",
    "expert_chunk",
    "rollout",
    "is_success",
    "sample_task",
    "generate_dataset",
    "evaluation_tasks",
    "task_digest",
    "DiffusionPolicy",
    "ExpertPolicy",
    "RandomPolicy",
    "evaluate",
    "ablation_grid",
    "run_ablation",
    "reports_to_csv",
    "ablation_table",
]
