"""Tiny bidirectional transformer policy with a hand-written backward pass.

Input layout is ``[context tokens ; action tokens]`` with learned absolute
position embeddings and no causal mask. Only action positions are read out,
through a shared ``K``-way head (the mask symbol is an input-only token).
Everything is float64 numpy; layer norm and softmax go through
:mod:`dact.kernels`.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .codec import ActionChunk
from .diffusion import PROB_FLOOR, corrupt_fixed_count
from .errors import ChecksumError, ConfigError, TrainingDivergenceError, ValidationError
from .schedules import ScheduleKind, gamma

CHECKPOINT_FORMAT = "dact-checkpoint"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_vocab: int
    L: int
    context_len: int
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    init_std: float = 0.02
    head_init_std: float = 1e-3

    def __post_init__(self):
        for name in ("vocab_size", "context_vocab", "L", "context_len", "embed_dim", "layers", "heads", "ff_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must include at least one action token and MASK")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")

    @property
    def num_classes(self) -> int:
        return self.vocab_size - 1

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def seq_len(self) -> int:
        return self.context_len + self.L


def _outer_sum(a, b):
    """``sum over (batch, seq)`` of ``a[..., :, None] * b[..., None, :]``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


class PolicyModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, rng=None):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(rng))
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        expected = self.param_shapes()
        if set(self.params) != set(expected):
            raise ValidationError("parameter names do not match the config")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValidationError(f"{k}: shape {self.params[k].shape} != {shape}")

    # ------------------------------------------------------------------ params

    def param_shapes(self) -> dict[str, tuple]:
        c = self.config
        d, f = c.embed_dim, c.ff_dim
        shapes = {
            "ctx_emb": (c.context_vocab, d),
            "act_emb": (c.vocab_size, d),
            "pos_emb": (c.seq_len, d),
        }
        for l in range(c.layers):
            shapes.update(
                {
                    f"l{l}.ln1_g": (d,),
                    f"l{l}.ln1_b": (d,),
                    f"l{l}.w_qkv": (d, 3 * d),
                    f"l{l}.b_qkv": (3 * d,),
                    f"l{l}.w_o": (d, d),
                    f"l{l}.b_o": (d,),
                    f"l{l}.ln2_g": (d,),
                    f"l{l}.ln2_b": (d,),
                    f"l{l}.w_1": (d, f),
                    f"l{l}.b_1": (f,),
                    f"l{l}.w_2": (f, d),
                    f"l{l}.b_2": (d,),
                }
            )
        shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head_w": (d, c.num_classes), "head_b": (c.num_classes,)})
        return shapes

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        out = {}
        for name, shape in self.param_shapes().items():
            base = name.split(".")[-1]
            if base.endswith("_g"):
                out[name] = np.ones(shape)
            elif base.startswith("b_") or base.endswith("_b"):
                out[name] = np.zeros(shape)
            elif name == "head_w":
                out[name] = rng.normal(0.0, c.head_init_std, shape)
            else:
                std = c.init_std
                if base in ("w_o", "w_2"):
                    std = c.init_std / math.sqrt(2 * c.layers)
                out[name] = rng.normal(0.0, std, shape)
        return out

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # ----------------------------------------------------------------- forward

    def _check_inputs(self, context, actions):
        c = self.config
        ctx = np.asarray(context, dtype=np.int64)
        act = actions.tokens if isinstance(actions, ActionChunk) else np.asarray(actions, dtype=np.int64)
        single = act.ndim == 1
        if single:
            ctx, act = ctx[None], act[None]
        if ctx.ndim != 2 or act.ndim != 2 or ctx.shape[0] != act.shape[0]:
            raise ValidationError("context and actions must be 1-D sequences or matching batches")
        if ctx.shape[1] != c.context_len:
            raise ValidationError(f"context length {ctx.shape[1]} != {c.context_len}")
        if act.shape[1] != c.L:
            raise ValidationError(f"action length {act.shape[1]} != {c.L}")
        if ctx.min() < 0 or ctx.max() >= c.context_vocab:
            raise ValidationError("context token outside context vocabulary")
        if act.min() < 0 or act.max() >= c.vocab_size:
            raise ValidationError("action token outside vocabulary")
        return ctx, act, single

    def _forward(self, ctx, act, pos_ids=None, keep_cache=False):
        c = self.config
        p = self.params
        B = ctx.shape[0]
        S, d, nh = c.seq_len, c.embed_dim, c.heads
        dh = d // nh
        if pos_ids is None:
            pos_ids = np.arange(S)
        x = np.concatenate([p["ctx_emb"][ctx], p["act_emb"][act]], axis=1) + p["pos_emb"][pos_ids]
        caches = []
        scale = 1.0 / math.sqrt(dh)
        for l in range(c.layers):
            pre = f"l{l}."
            h1, xh1, rs1 = kernels.layernorm_fwd(x, p[pre + "ln1_g"], p[pre + "ln1_b"], LN_EPS)
            qkv = h1 @ p[pre + "w_qkv"] + p[pre + "b_qkv"]
            qkv = qkv.reshape(B, S, 3, nh, dh).transpose(2, 0, 3, 1, 4)  # (3, B, nh, S, dh)
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = kernels.softmax_rows((q @ k.transpose(0, 1, 3, 2)) * scale)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
            x = x + o @ p[pre + "w_o"] + p[pre + "b_o"]
            h2, xh2, rs2 = kernels.layernorm_fwd(x, p[pre + "ln2_g"], p[pre + "ln2_b"], LN_EPS)
            u = h2 @ p[pre + "w_1"] + p[pre + "b_1"]
            a, th = kernels.gelu_fwd(u)
            x = x + a @ p[pre + "w_2"] + p[pre + "b_2"]
            if keep_cache:
                caches.append((h1, xh1, rs1, q, k, v, att, o, h2, xh2, rs2, u, a, th))
        xa = x[:, c.context_len :]
        hf, xhf, rsf = kernels.layernorm_fwd(xa, p["lnf_g"], p["lnf_b"], LN_EPS)
        logits = hf @ p["head_w"] + p["head_b"]
        probs = kernels.softmax_rows(logits)
        cache = (ctx, act, pos_ids, caches, hf, xhf, rsf) if keep_cache else None
        return probs, cache

    def forward(self, context, actions, pos_ids=None) -> np.ndarray:
        """Per-position ``K``-way posteriors, ``(L, K)`` or ``(B, L, K)`` for batches."""
        ctx, act, single = self._check_inputs(context, actions)
        if pos_ids is not None:
            pos_ids = np.asarray(pos_ids, dtype=np.int64)
            if sorted(pos_ids.tolist()) != list(range(self.config.seq_len)):
                raise ValidationError("pos_ids must be a permutation of the sequence positions")
        probs, _ = self._forward(ctx, act, pos_ids)
        return probs[0] if single else probs

    __call__ = forward

    # ---------------------------------------------------------------- backward

    def _backward(self, cache, dlogits):
        c = self.config
        p = self.params
        ctx, act, pos_ids, caches, hf, xhf, rsf = cache
        B = ctx.shape[0]
        S, d, nh = c.seq_len, c.embed_dim, c.heads
        dh = d // nh
        scale = 1.0 / math.sqrt(dh)
        g = {}
        g["head_w"] = _outer_sum(hf, dlogits)
        g["head_b"] = dlogits.sum(axis=(0, 1))
        dhf = dlogits @ p["head_w"].T
        dxa, g["lnf_g"], g["lnf_b"] = kernels.layernorm_bwd(dhf, xhf, rsf, p["lnf_g"])
        dx = np.zeros((B, S, d))
        dx[:, c.context_len :] = dxa
        for l in reversed(range(c.layers)):
            pre = f"l{l}."
            h1, xh1, rs1, q, k, v, att, o, h2, xh2, rs2, u, a, th = caches[l]
            # feed-forward branch
            g[pre + "w_2"] = _outer_sum(a, dx)
            g[pre + "b_2"] = dx.sum(axis=(0, 1))
            da = dx @ p[pre + "w_2"].T
            du = kernels.gelu_bwd(da, u, th)
            g[pre + "w_1"] = _outer_sum(h2, du)
            g[pre + "b_1"] = du.sum(axis=(0, 1))
            dh2 = du @ p[pre + "w_1"].T
            dln2, g[pre + "ln2_g"], g[pre + "ln2_b"] = kernels.layernorm_bwd(dh2, xh2, rs2, p[pre + "ln2_g"])
            dx = dx + dln2
            # attention branch
            g[pre + "w_o"] = _outer_sum(o, dx)
            g[pre + "b_o"] = dx.sum(axis=(0, 1))
            do = (dx @ p[pre + "w_o"].T).reshape(B, S, nh, dh).transpose(0, 2, 1, 3)
            datt = do @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ do
            dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
            dq = dscores @ k
            dk = dscores.transpose(0, 1, 3, 2) @ q
            dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, S, 3 * d)
            g[pre + "w_qkv"] = _outer_sum(h1, dqkv)
            g[pre + "b_qkv"] = dqkv.sum(axis=(0, 1))
            dh1 = dqkv @ p[pre + "w_qkv"].T
            dln1, g[pre + "ln1_g"], g[pre + "ln1_b"] = kernels.layernorm_bwd(dh1, xh1, rs1, p[pre + "ln1_g"])
            dx = dx + dln1
        g["pos_emb"] = np.zeros_like(p["pos_emb"])
        np.add.at(g["pos_emb"], pos_ids, dx.sum(axis=0))
        g["ctx_emb"] = np.zeros_like(p["ctx_emb"])
        np.add.at(g["ctx_emb"], ctx.reshape(-1), dx[:, : c.context_len].reshape(-1, d))
        g["act_emb"] = np.zeros_like(p["act_emb"])
        np.add.at(g["act_emb"], act.reshape(-1), dx[:, c.context_len :].reshape(-1, d))
        return g

    def loss(self, context, corrupted, targets, loss_mask, weights=None) -> float:
        """Forward-only version of :meth:`loss_and_grads`."""
        return self._loss(context, corrupted, targets, loss_mask, weights, need_grads=False)[0]

    def loss_and_grads(self, context, corrupted, targets, loss_mask, weights=None):
        """Masked cross-entropy and its gradient.

        ``loss_mask`` is a boolean ``(B, L)`` (or ``(L,)``) selecting the scored
        positions; ``weights`` optionally scales each batch item's sum. The
        returned loss is ``sum_b weights[b] * sum_{i in mask_b} -log p``.
        The gradient is the plain softmax cross-entropy gradient; it ignores the
        probability floor.
        """
        return self._loss(context, corrupted, targets, loss_mask, weights, need_grads=True)

    def _loss(self, context, corrupted, targets, loss_mask, weights, need_grads):
        ctx, act, single = self._check_inputs(context, corrupted)
        tgt = targets.tokens if isinstance(targets, ActionChunk) else np.asarray(targets, dtype=np.int64)
        lm = np.asarray(loss_mask, dtype=bool)
        if single:
            tgt, lm = tgt[None], lm[None]
        B = ctx.shape[0]
        w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
        probs, cache = self._forward(ctx, act, keep_cache=need_grads)
        K = self.config.num_classes
        safe_tgt = np.where(lm, tgt, 0)
        if np.any(safe_tgt >= K):
            raise ValidationError("targets at scored positions must be action tokens, not MASK")
        picked = np.take_along_axis(probs, safe_tgt[..., None], axis=-1)[..., 0]
        nll = -np.log(np.maximum(picked, PROB_FLOOR))
        loss = float(np.sum(w[:, None] * lm * nll))
        if not need_grads:
            return loss, None
        dlogits = probs.copy()
        np.put_along_axis(dlogits, safe_tgt[..., None], np.take_along_axis(dlogits, safe_tgt[..., None], -1) - 1.0, -1)
        dlogits *= (w[:, None] * lm)[..., None]
        return loss, self._backward(cache, dlogits)

    # ------------------------------------------------------------- checkpoints

    def save(self, path) -> Path:
        """Write ``<path>.bin`` (raw little-endian float64) and ``<path>.manifest.json``."""
        path = Path(path)
        bin_path = path.with_suffix(".bin")
        tensors, offset, blobs = [], 0, []
        for name in sorted(self.params):
            raw = np.ascontiguousarray(self.params[name], dtype="<f8").tobytes()
            tensors.append(
                {
                    "name": name,
                    "shape": list(self.params[name].shape),
                    "offset": offset,
                    "nbytes": len(raw),
                    "sha256": hashlib.sha256(raw).hexdigest(),
                }
            )
            offset += len(raw)
            blobs.append(raw)
        data = b"".join(blobs)
        bin_path.write_bytes(data)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dtype": "<f8",
            "config": asdict(self.config),
            "tensors": tensors,
            "file_sha256": hashlib.sha256(data).hexdigest(),
        }
        man_path = path.with_suffix(".manifest.json")
        man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return man_path

    @classmethod
    def load(cls, path) -> "PolicyModel":
        path = Path(path)
        if path.name.endswith(".manifest.json"):
            path = path.with_name(path.name[: -len(".manifest.json")])
        man_path = path.with_suffix(".manifest.json")
        manifest = json.loads(man_path.read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"{man_path}: not a supported checkpoint manifest")
        data = path.with_suffix(".bin").read_bytes()
        if hashlib.sha256(data).hexdigest() != manifest["file_sha256"]:
            raise ChecksumError(f"{path.with_suffix('.bin')}: file checksum mismatch")
        config = ModelConfig(**manifest["config"])
        params = {}
        for t in manifest["tensors"]:
            raw = data[t["offset"] : t["offset"] + t["nbytes"]]
            if hashlib.sha256(raw).hexdigest() != t["sha256"]:
                raise ChecksumError(f"tensor {t['name']}: checksum mismatch")
            params[t["name"]] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
        model = cls(config, params)
        return model


# ---------------------------------------------------------------------------
# optimisation


class Optimizer:
    """Gradient descent with momentum (default) or Adam, plus optional global-norm clipping."""

    def __init__(self, lr: float = 0.05, momentum: float = 0.9, kind: str = "momentum",
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None,
                 weight_decay: float = 0.0):
        if kind not in ("momentum", "adam"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.lr = lr
        self.momentum = momentum
        self.kind = kind
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.steps = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.steps += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            g = g * scale
            if self.weight_decay and params[name].ndim > 1:
                g = g + self.weight_decay * params[name]
            st = self.state.setdefault(name, {})
            if self.kind == "momentum":
                v = st.get("v")
                v = g.copy() if v is None else self.momentum * v + g
                st["v"] = v
                params[name] -= self.lr * v
            else:
                m = st.get("m", np.zeros_like(g))
                s = st.get("s", np.zeros_like(g))
                m = b1 * m + (1 - b1) * g
                s = b2 * s + (1 - b2) * g * g
                st["m"], st["s"] = m, s
                mhat = m / (1 - b1**self.steps)
                shat = s / (1 - b2**self.steps)
                params[name] -= self.lr * mhat / (np.sqrt(shat) + self.eps)
        return norm


def cosine_gamma_sampler(kind: ScheduleKind | str = ScheduleKind.COSINE) -> Callable[[np.random.Generator], float]:
    """Training mask ratio: ``gamma(u)`` with ``u ~ U[0, 1)``."""

    def sample(rng: np.random.Generator) -> float:
        return gamma(float(rng.random()), kind)

    return sample


def _as_batch(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        ctx, tgt = batch
        return np.atleast_2d(np.asarray(ctx, dtype=np.int64)), np.atleast_2d(np.asarray(tgt, dtype=np.int64))
    items = list(batch)
    if not items:
        raise ValidationError("empty batch")
    ctx = np.stack([np.asarray(c, dtype=np.int64) for c, _ in items])
    tgt = np.stack([t.tokens if isinstance(t, ActionChunk) else np.asarray(t, dtype=np.int64) for _, t in items])
    return ctx, tgt


def diffusion_corruption(gamma_sampler):
    """Per-item fixed-count masking; every masked position is scored."""

    def corrupt(chunk: ActionChunk, rng):
        out = corrupt_fixed_count(chunk, gamma_sampler(rng), rng)
        return out.corrupted.tokens, out.mask_vector()

    return corrupt


def train_step(
    model: PolicyModel,
    batch,
    gamma_sampler,
    optimizer: Optimizer,
    rng: np.random.Generator,
    normalize: str = "mask_count",
    corruption=None,
) -> float:
    """One corruption + loss + update step; returns the pre-update loss.

    ``normalize`` is ``"sum"`` (plain summed loss per item, averaged over the
    batch) or ``"mask_count"`` (each item's sum divided by its mask count).
    ``corruption`` overrides how items are masked and which positions are scored.
    """
    ctx, tgt = _as_batch(batch)
    if ctx.shape[0] == 0:
        raise ValidationError("empty batch")
    c = model.config
    if np.any(tgt >= c.mask_id):
        raise ValidationError("training targets must not contain MASK")
    corrupt = corruption or diffusion_corruption(gamma_sampler)
    B = ctx.shape[0]
    corrupted = np.empty_like(tgt)
    scored = np.zeros(tgt.shape, dtype=bool)
    for b in range(B):
        chunk = ActionChunk(tgt[b], horizon=c.L, dims=1, mask_id=c.mask_id)
        corrupted[b], scored[b] = corrupt(chunk, rng)
    counts = scored.sum(axis=1)
    if normalize == "mask_count":
        weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / B
    elif normalize == "sum":
        weights = np.full(B, 1.0 / B)
    else:
        raise ConfigError(f"unknown normalisation {normalize!r}")
    loss, grads = model.loss_and_grads(ctx, corrupted, tgt, scored, weights)
    if not math.isfinite(loss):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise TrainingDivergenceError(
            f"non-finite loss {loss} at optimizer step {optimizer.steps}; "
            f"non-finite grads in {bad[:5]}; mask counts {counts.tolist()}"
        )
    optimizer.step(model.params, grads)
    return loss


def grad_check(model, example, epsilon: float = 1e-4, n_samples: int | None = None,
               rng=None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model`` needs ``params`` and ``loss_and_grads(*example)`` (a forward-only
    ``loss(*example)`` is used for the perturbed evaluations when present).
    The relative error of an entry is ``|a - n| / max(|a| + |n|, floor)``, so
    entries whose true gradient is structurally zero (e.g. attention key biases)
    are judged on an absolute scale instead of amplifying rounding noise.
    """
    _, analytic = model.loss_and_grads(*example)
    evaluate = getattr(model, "loss", None) or (lambda *a: model.loss_and_grads(*a)[0])
    rng = np.random.default_rng(rng)
    worst = 0.0
    entries = [(name, i) for name, p in model.params.items() for i in range(p.size)]
    if n_samples is not None and n_samples < len(entries):
        pick = rng.choice(len(entries), size=n_samples, replace=False)
        entries = [entries[j] for j in pick]
    for name, i in entries:
        flat = model.params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = evaluate(*example)
        flat[i] = orig - epsilon
        f_minus = evaluate(*example)
        flat[i] = orig
        num = (f_plus - f_minus) / (2 * epsilon)
        a = analytic[name].reshape(-1)[i]
        err = abs(a - num) / max(abs(a) + abs(num), floor)
        worst = max(worst, err)
    return worst


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    while True:
        order = rng.permutation(n)
        for s in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[s : s + batch_size]


__all__ = [
    "ModelConfig",
    "PolicyModel",
    "Optimizer",
    "cosine_gamma_sampler",
    "diffusion_corruption",
    "train_step",
    "grad_check",
    "iterate_minibatches",
]
