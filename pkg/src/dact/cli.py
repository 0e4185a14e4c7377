"""``dact`` command line: gen-data, train, decode, eval, ablate, verify.

Every run reads one JSON config (``--config``; defaults fill anything left
out), applies flag overrides, and writes its outputs plus ``manifest.json``
into ``--out``. Unknown config keys are an error. Exit codes: 0 success,
2 usage or config error, 1 anything raised while running (invariant
violations name the invariant).

Set ``DACT_NUM_THREADS`` to cap BLAS threads.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .decoder import DecodeConfig, check_trace_invariants, decode
from .errors import ConfigError, DactError, InvariantViolation
from .model import PolicyModel
from .schedules import ThresholdSchedule
from .seeding import Stream, sub_seed
from .taskbench import (
    D_ACT,
    Dataset,
    ablation_grid,
    ablation_table,
    evaluate,
    evaluation_tasks,
    generate_dataset,
    reports_to_csv,
    run_ablation,
)
from .training import TrainConfig, train
from .verify import run_suites

log = logging.getLogger("dact")

THREADS_ENV = "DACT_NUM_THREADS"
COMMANDS = ("gen-data", "train", "decode", "eval", "ablate", "verify")

DEFAULTS = {
    "seed": 0,
    "dataset": None,
    "checkpoint": None,
    "data": {"n_tasks": 1000, "horizon": 8, "levels": 64, "num_bins": 256},
    "model": {"embed_dim": 64, "layers": 2, "heads": 4, "ff_dim": 128, "init_std": 0.02, "head_init_std": 1e-3},
    "train": TrainConfig().to_dict(),
    "decode": DecodeConfig().to_dict(),
    "eval": {"episodes": None, "tasks": "held_out"},
    "verify": {"suites": None},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def resolve_config(path: str | None, args: argparse.Namespace) -> dict:
    user = {}
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
    cfg = _merge(DEFAULTS, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.rounds is not None:
        cfg["decode"]["total_rounds"] = args.rounds
    if args.episodes is not None:
        cfg["eval"]["episodes"] = args.episodes
    if getattr(args, "dataset", None):
        cfg["dataset"] = args.dataset
    if getattr(args, "checkpoint", None):
        cfg["checkpoint"] = args.checkpoint
    if cfg["eval"]["tasks"] not in ("held_out", "fresh"):
        raise UsageError("eval.tasks must be 'held_out' or 'fresh'")
    return cfg


def decode_config(cfg: dict) -> DecodeConfig:
    d = dict(cfg["decode"])
    d["threshold_schedule"] = ThresholdSchedule(**(d.get("threshold_schedule") or {}))
    return DecodeConfig(**d)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def fingerprint(cfg: dict) -> str:
    payload = {k: v for k, v in cfg.items() if k not in ("dataset", "checkpoint")}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _require(cfg: dict, key: str) -> Path:
    value = cfg.get(key)
    if not value:
        raise UsageError(f"this command needs a {key} path (config key {key!r} or --{key})")
    p = Path(value)
    if key == "checkpoint":
        probe = p.with_suffix(".manifest.json") if not p.name.endswith(".manifest.json") else p
    else:
        probe = p
    if not probe.exists():
        raise UsageError(f"{key} not found: {probe}")
    return p


# ---------------------------------------------------------------------------
# manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    out = {"dact": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "kernel_backend": kernels.backend()}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        out["numba"] = None
    return out


def write_manifest(out: Path, command: str, cfg: dict, outputs: list[Path], results: dict,
                   wall_seconds: float) -> Path:
    manifest = {
        "format": "dact-run",
        "version": 1,
        "command": command,
        "seed": cfg["seed"],
        "config": cfg,
        "config_fingerprint": fingerprint(cfg),
        "versions": versions(),
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
        "results": results,
        "wall_clock": {"seconds": round(wall_seconds, 3)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, out: Path, args) -> tuple[list[Path], dict]:
    d = cfg["data"]
    ds = generate_dataset(d["n_tasks"], cfg["seed"], horizon=d["horizon"], levels=d["levels"],
                          num_bins=d["num_bins"])
    data_path = out / "dataset.bin"
    tok_path = out / "tokenizer.json"
    ds.save(data_path)
    ds.tokenizer.save(tok_path)
    train_eps, held = ds.split()
    print(f"wrote {len(ds.episodes)} episodes ({len(train_eps)} train, {len(held)} held out) to {data_path}")
    return [data_path, tok_path], {"episodes": len(ds.episodes), "held_out": len(held),
                                   "tokenizer_checksum": ds.tokenizer.checksum()}


def cmd_train(cfg: dict, out: Path, args) -> tuple[list[Path], dict]:
    ds = Dataset.load(_require(cfg, "dataset"))
    tc = train_config(cfg)
    result = train(ds, tc, cfg["seed"], model_overrides=cfg["model"])
    stem = out / "model"
    man = result.model.save(stem)
    losses = out / "losses.csv"
    losses.write_text("step,loss\n" + "".join(f"{i + 1},{v:.10g}\n" for i, v in enumerate(result.losses)))
    final = float(np.mean(result.losses[-min(100, len(result.losses)):])) if result.losses else float("nan")
    print(f"trained {tc.steps} steps in {result.seconds:.1f}s, final loss {final:.4f}; checkpoint {stem}")
    return [stem.with_suffix(".bin"), man, losses], {"steps": tc.steps, "final_loss": final}


def _eval_tasks(cfg: dict, ds: Dataset | None):
    ev = cfg["eval"]
    if ev["tasks"] == "fresh" or ds is None:
        return evaluation_tasks(ev["episodes"] or 100, cfg["seed"])
    _, held = ds.split()
    tasks = [e.task for e in held]
    return tasks[: ev["episodes"]] if ev["episodes"] else tasks


def cmd_decode(cfg: dict, out: Path, args) -> tuple[list[Path], dict]:
    model = PolicyModel.load(_require(cfg, "checkpoint"))
    ds = Dataset.load(_require(cfg, "dataset"))
    dc = decode_config(cfg)
    ev = dict(cfg["eval"])
    ev["episodes"] = ev["episodes"] or 1
    tasks = _eval_tasks({**cfg, "eval": ev}, ds)
    outputs, records = [], []
    for i, task in enumerate(tasks):
        seed = sub_seed(cfg["seed"], Stream.DECODE, task.task_id)
        chunk, trace = decode(model, task.context, dc.with_seed(seed), dims=D_ACT)
        bad = check_trace_invariants(trace, chunk, dc, chunk.length)
        if bad:
            raise InvariantViolation(bad[0], f"task {task.task_id}")
        records.append({"task_id": task.task_id, "context": task.context.tolist(),
                        "seed": seed, "tokens": chunk.tokens.tolist(), "nfe": trace.nfe})
        if args.trace:
            tpath = out / (f"trace_{task.task_id}.jsonl" if len(tasks) > 1 else "trace.jsonl")
            trace.write(tpath)
            outputs.append(tpath)
    chunks = out / "chunks.jsonl"
    chunks.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    outputs.append(chunks)
    print(f"decoded {len(records)} chunk(s) with {dc.total_rounds} rounds -> {chunks}")
    return outputs, {"decoded": len(records), "nfe": [r["nfe"] for r in records]}


def cmd_eval(cfg: dict, out: Path, args) -> tuple[list[Path], dict]:
    model = PolicyModel.load(_require(cfg, "checkpoint"))
    ds = Dataset.load(_require(cfg, "dataset"))
    dc = decode_config(cfg)
    report = evaluate(model, ds.tokenizer, dc, seed=cfg["seed"], tasks=_eval_tasks(cfg, ds))
    path = out / "eval.csv"
    path.write_text(reports_to_csv([report]))
    print(f"{report.label}: {report.successes}/{report.episodes} success ({report.success_rate:.3f}), "
          f"mean NFE {report.mean_nfe:.2f}")
    return [path], {"success_rate": report.success_rate, "episodes": report.episodes,
                    "mean_nfe": report.mean_nfe}


def cmd_ablate(cfg: dict, out: Path, args) -> tuple[list[Path], dict]:
    model = PolicyModel.load(_require(cfg, "checkpoint"))
    ds = Dataset.load(_require(cfg, "dataset"))
    dc = decode_config(cfg)
    reports = run_ablation(model, ds.tokenizer, ablation_grid(dc), seed=cfg["seed"], tasks=_eval_tasks(cfg, ds))
    path = out / "ablation.csv"
    path.write_text(reports_to_csv(reports))
    print(ablation_table(reports))
    rate = {(r.strategy, r.temperature): r.success_rate for r in reports}
    best = lambda s: max(v for (k, _), v in rate.items() if k == s)
    observations = {
        "max_confidence_ge_one_shot": best("max_confidence") >= best("one_shot_parallel"),
        "decay_ge_hard": rate[("max_confidence", "decay")] >= rate[("max_confidence", "hard")],
    }
    for k, v in observations.items():
        print(f"observation {k}: {v}")
    return [path], {"cells": len(reports), "observations": observations}


def cmd_verify(cfg: dict, out: Path, args) -> tuple[list[Path], dict]:
    try:
        results = run_suites(cfg["verify"]["suites"])
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    for r in results:
        print(r.line())
    path = out / "verify.json"
    path.write_text(json.dumps([{"suite": r.name, "passed": r.passed, "detail": r.detail} for r in results],
                               indent=1) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise InvariantViolation(f"verify suite {failed[0]}", ", ".join(failed) + " failed")
    return [path], {"passed": len(results)}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dact", description="Discrete-diffusion action decoding toolkit.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen-data": "sample tasks and script the expert dataset",
        "train": "train a policy on a dataset",
        "decode": "decode action chunks, optionally dumping per-round traces",
        "eval": "measure success rate on held-out or fresh tasks",
        "ablate": "evaluate the 4 x 3 strategy/temperature grid",
        "verify": "run the oracle and property self-checks",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int, metavar="N")
        sp.add_argument("--out", metavar="DIR", default=".")
        sp.add_argument("--trace", action="store_true", help="decode: write one JSON line per round")
        sp.add_argument("--episodes", type=int, metavar="N")
        sp.add_argument("--rounds", type=int, metavar="T")
        sp.add_argument("--dataset", metavar="PATH")
        sp.add_argument("--checkpoint", metavar="PATH")
    return p


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    try:
        limiter = _limit_threads()
        cfg = resolve_config(args.config, args)
        if args.command in ("decode", "eval", "ablate"):
            decode_config(cfg)
        if args.command == "train":
            train_config(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise UsageError(f"output directory {out} is not writable")
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except ConfigError as exc:
        parser.error(f"config: {exc}")
    except TypeError as exc:
        parser.error(f"config: {exc}")
    t0 = time.perf_counter()
    try:
        outputs, results = HANDLERS[args.command](cfg, out, args)
    except UsageError as exc:
        parser.error(str(exc))
    except InvariantViolation as exc:
        print(f"dact: internal error: {exc}", file=sys.stderr)
        return 1
    except DactError as exc:
        print(f"dact: {exc.category} error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"dact: io error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    write_manifest(out, args.command, cfg, outputs, results, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
