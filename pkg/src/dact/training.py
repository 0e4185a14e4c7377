"""Training loop over a task-bench dataset."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, Optimizer, PolicyModel, cosine_gamma_sampler, iterate_minibatches, train_step
from .oracles import suffix_corruption
from .seeding import Stream, stream_rng
from .taskbench import CONTEXT_LEN, Dataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    optimizer: str = "momentum"
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    weight_decay: float = 0.0
    warmup_steps: int = 100
    lr_decay: str = "cosine"  # or "none"
    normalize: str = "mask_count"
    mask_schedule: str = "cosine"
    objective: str = "diffusion"  # or "ar" for the left-to-right baseline
    log_every: int = 100

    def __post_init__(self):
        if self.objective not in ("diffusion", "ar"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: PolicyModel
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def model_config_for(dataset: Dataset, **overrides) -> ModelConfig:
    L = dataset.horizon * dataset.tokenizer.dims
    return ModelConfig(
        vocab_size=dataset.tokenizer.vocab_size,
        context_vocab=dataset.levels,
        L=L,
        context_len=CONTEXT_LEN,
        **overrides,
    )


def _lr_at(step: int, cfg: TrainConfig) -> float:
    lr = cfg.lr
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_decay == "cosine":
        span = max(cfg.steps - cfg.warmup_steps, 1)
        frac = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
        return lr * 0.5 * (1.0 + np.cos(np.pi * frac))
    return lr


def train(dataset: Dataset, train_cfg: TrainConfig, seed: int, model: PolicyModel | None = None,
          model_overrides: dict | None = None, episodes=None) -> TrainResult:
    """Fit a policy on the training split (or on ``episodes`` when given)."""
    if model is None:
        model = PolicyModel(model_config_for(dataset, **(model_overrides or {})), rng=stream_rng(seed, Stream.INIT))
    if episodes is None:
        episodes, _ = dataset.split()
    ctx, tgt = dataset.token_arrays(episodes)
    opt = Optimizer(lr=train_cfg.lr, momentum=train_cfg.momentum, kind=train_cfg.optimizer,
                    clip_norm=train_cfg.clip_norm, weight_decay=train_cfg.weight_decay)
    rng = stream_rng(seed, Stream.CORRUPTION)
    sampler = cosine_gamma_sampler(train_cfg.mask_schedule)
    corruption = suffix_corruption() if train_cfg.objective == "ar" else None
    batches = iterate_minibatches(len(ctx), min(train_cfg.batch_size, len(ctx)), rng)
    result = TrainResult(model)
    t0 = time.perf_counter()
    for step in range(train_cfg.steps):
        opt.lr = _lr_at(step, train_cfg)
        idx = next(batches)
        loss = train_step(model, (ctx[idx], tgt[idx]), sampler, opt, rng,
                          normalize=train_cfg.normalize, corruption=corruption)
        result.losses.append(loss)
        if train_cfg.log_every and (step + 1) % train_cfg.log_every == 0:
            recent = float(np.mean(result.losses[-train_cfg.log_every:]))
            log.info("step %d  loss %.4f  lr %.4g", step + 1, recent, opt.lr)
    result.seconds = time.perf_counter() - t0
    return result
