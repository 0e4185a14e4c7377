"""Continuous <-> discrete action conversion.

Each continuous control dimension is split into ``num_bins`` quantile bins
anchored at the 1st and 99th percentiles of the fitting data. The gripper is a
binary dimension with a fixed 0.5 threshold. A chunk of ``H`` timesteps is laid
out row-major as ``L = H * dims`` tokens; the id ``num_bins`` is reserved for
the mask symbol, so the vocabulary has ``num_bins + 1`` entries.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import ChecksumError, DegenerateDataError, IncompleteChunkError, ValidationError

TOKENIZER_FORMAT = "dact-tokenizer"
TOKENIZER_VERSION = 1

LOW_PERCENTILE = 1.0
HIGH_PERCENTILE = 99.0
GRIPPER_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class TokenizerSpec:
    num_bins: int
    dims: int
    edges: tuple
    centers: tuple
    gripper_dim_index: int | None = None
    fit_scope: str = "per-dataset"

    def __post_init__(self):
        if len(self.edges) != self.dims or len(self.centers) != self.dims:
            raise ValidationError("edges/centers must have one entry per dimension")
        edges = tuple(np.asarray(e, dtype=np.float64) for e in self.edges)
        centers = tuple(np.asarray(c, dtype=np.float64) for c in self.centers)
        for d, (e, c) in enumerate(zip(edges, centers)):
            e.setflags(write=False)
            c.setflags(write=False)
            if e.shape != (c.shape[0] + 1,):
                raise ValidationError(f"dim {d}: need len(edges) == len(centers) + 1")
            if not np.all(np.diff(e) > 0):
                raise ValidationError(f"dim {d}: edges must be strictly increasing")
            if not (np.all(c > e[:-1]) and np.all(c < e[1:])):
                raise ValidationError(f"dim {d}: centers must lie strictly inside their bins")
            if d == self.gripper_dim_index:
                if c.shape[0] != 2 or e[1] != GRIPPER_THRESHOLD:
                    raise ValidationError("gripper dimension must have 2 bins split at 0.5")
            elif c.shape[0] > self.num_bins:
                raise ValidationError(f"dim {d}: more bins than num_bins")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "centers", centers)

    @property
    def mask_id(self) -> int:
        return self.num_bins

    @property
    def vocab_size(self) -> int:
        return self.num_bins + 1

    def bins_in_dim(self, d: int) -> int:
        return self.centers[d].shape[0]

    def bin_widths(self, d: int) -> np.ndarray:
        return np.diff(self.edges[d])

    def to_dict(self) -> dict:
        return {
            "format": TOKENIZER_FORMAT,
            "version": TOKENIZER_VERSION,
            "num_bins": self.num_bins,
            "dims": self.dims,
            "gripper_dim_index": self.gripper_dim_index,
            "fit_scope": self.fit_scope,
            "edges": [e.tolist() for e in self.edges],
            "centers": [c.tolist() for c in self.centers],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TokenizerSpec":
        if data.get("format") != TOKENIZER_FORMAT:
            raise ValidationError(f"not a tokenizer file (format={data.get('format')!r})")
        if data.get("version") != TOKENIZER_VERSION:
            raise ValidationError(f"unsupported tokenizer version {data.get('version')!r}")
        return cls(
            num_bins=int(data["num_bins"]),
            dims=int(data["dims"]),
            edges=tuple(data["edges"]),
            centers=tuple(data["centers"]),
            gripper_dim_index=data.get("gripper_dim_index"),
            fit_scope=data.get("fit_scope", "per-dataset"),
        )

    def dumps(self) -> str:
        # json writes infinities as Infinity; the gripper edges need them
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def checksum(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> None:
        doc = self.to_dict()
        doc["sha256"] = self.checksum()
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TokenizerSpec":
        """Read a saved spec; a recorded ``sha256`` must match the content."""
        doc = json.loads(Path(path).read_text())
        recorded = doc.pop("sha256", None)
        spec = cls.from_dict(doc)
        if recorded is not None and spec.checksum() != recorded:
            raise ChecksumError(f"{path}: tokenizer checksum mismatch")
        return spec

    def __eq__(self, other):
        if not isinstance(other, TokenizerSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


@dataclass(eq=False)
class ActionChunk:
    """``H * dims`` token ids, row-major over (timestep, dimension)."""

    tokens: np.ndarray
    horizon: int
    dims: int
    mask_id: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.tokens.shape[0] != self.horizon * self.dims:
            raise ValidationError(
                f"chunk length {self.tokens.shape[0]} != horizon*dims = {self.horizon * self.dims}"
            )
        if np.any(self.tokens < 0) or np.any(self.tokens > self.mask_id):
            raise ValidationError("token id outside vocabulary")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.mask_id + 1

    def has_mask(self) -> bool:
        return bool(np.any(self.tokens == self.mask_id))

    def as_matrix(self) -> np.ndarray:
        return self.tokens.reshape(self.horizon, self.dims)

    def __eq__(self, other):
        if not isinstance(other, ActionChunk):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and self.dims == other.dims
            and self.mask_id == other.mask_id
            and np.array_equal(self.tokens, other.tokens)
        )


def _quantile_edges(x: np.ndarray, num_bins: int) -> np.ndarray:
    levels = np.linspace(LOW_PERCENTILE, HIGH_PERCENTILE, num_bins + 1) / 100.0
    return np.quantile(x, levels, method="linear")


def fit_bins(
    samples,
    num_bins: int = 256,
    gripper_dim_index: int | None = 6,
    fixed_ranges: Mapping[int, tuple[float, float]] | None = None,
) -> TokenizerSpec:
    """Fit per-dimension quantile bins.

    ``samples`` is an ``(N, D)`` array or a sequence of per-dimension arrays.
    Dimensions listed in ``fixed_ranges`` get ``num_bins`` uniform bins over the
    given range instead of quantiles; use this for controls that are constant in
    the data and would otherwise be degenerate.
    """
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        columns: Sequence = [samples[:, d] for d in range(samples.shape[1])]
    else:
        columns = list(samples)
    if num_bins < 2:
        raise ValidationError("num_bins must be at least 2")
    fixed_ranges = dict(fixed_ranges or {})

    edges, centers = [], []
    for d, col in enumerate(columns):
        x = np.asarray(col, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"dim {d}: non-finite samples")
        if d == gripper_dim_index:
            e = np.array([-np.inf, GRIPPER_THRESHOLD, np.inf])
            edges.append(e)
            centers.append(np.array([0.0, 1.0]))
            continue
        if d in fixed_ranges:
            lo, hi = fixed_ranges[d]
            if not hi > lo:
                raise ValidationError(f"dim {d}: fixed range must have hi > lo")
            e = np.linspace(lo, hi, num_bins + 1)
        else:
            n_distinct = np.unique(x).shape[0]
            if n_distinct < num_bins:
                raise DegenerateDataError(
                    f"dim {d}: {n_distinct} distinct samples, need at least {num_bins}"
                )
            e = _quantile_edges(x, num_bins)
            if not np.all(np.diff(e) > 0):
                raise DegenerateDataError(f"dim {d}: repeated quantiles give zero-width bins")
        edges.append(e)
        centers.append(0.5 * (e[:-1] + e[1:]))
    return TokenizerSpec(
        num_bins=num_bins,
        dims=len(columns),
        edges=tuple(edges),
        centers=tuple(centers),
        gripper_dim_index=gripper_dim_index if gripper_dim_index is not None and gripper_dim_index < len(columns) else None,
    )


def tokenize_values(values: np.ndarray, spec: TokenizerSpec, dim: int) -> np.ndarray:
    """Bin ids for a 1-D array of values of one dimension."""
    return kernels.digitize(values, spec.edges[dim])


def tokenize_chunk(continuous, spec: TokenizerSpec) -> ActionChunk:
    x = np.asarray(continuous, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.dims:
        raise ValidationError(f"expected an (H, {spec.dims}) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite action values")
    tokens = np.empty(x.shape, dtype=np.int64)
    for d in range(spec.dims):
        tokens[:, d] = kernels.digitize(x[:, d], spec.edges[d])
    return ActionChunk(tokens.reshape(-1), horizon=x.shape[0], dims=spec.dims, mask_id=spec.mask_id)


def detokenize_chunk(chunk: ActionChunk, spec: TokenizerSpec) -> np.ndarray:
    """Map every token to its bin center.

    Ids beyond a dimension's bin count (possible from a shared prediction head,
    e.g. a gripper token > 1) clip to that dimension's last bin.
    """
    if chunk.dims != spec.dims:
        raise ValidationError("chunk and tokenizer disagree on dims")
    if chunk.mask_id != spec.mask_id:
        raise ValidationError("chunk and tokenizer disagree on the mask id")
    if chunk.has_mask():
        raise IncompleteChunkError("chunk still contains MASK tokens")
    tok = chunk.as_matrix()
    out = np.empty(tok.shape, dtype=np.float64)
    for d in range(spec.dims):
        c = spec.centers[d]
        out[:, d] = c[np.minimum(tok[:, d], c.shape[0] - 1)]
    return out


__all__ = [
    "TokenizerSpec",
    "ActionChunk",
    "fit_bins",
    "tokenize_chunk",
    "tokenize_values",
    "detokenize_chunk",
]
