"""Command line entry point: ``anygraph <command> ...``.

Every command writes a ``run.json`` snapshot (resolved config, seed, inputs)
into its output directory. Failures exit non-zero and print one JSON object
``{"error": ..., "message": ..., "command": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .acceptance import run_all
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATIONS, ConfigError, RunConfig
from .embed_init import EmbeddingCache, initial_embedding
from .evaluation import ContaminationError, evaluate
from .graph_store import (
    GraphParseError,
    GraphValidationError,
    gen_synthetic,
    load_dataset,
    normalize_adjacency,
    save_dataset,
    split_edges,
)
from .moe_router import route
from .suites import ablation_suite, desk_datasets, rows_to_csv, scaling_suite
from .trainer import Trainer, TrainingDivergedError

log = logging.getLogger("anygraph")

EXIT_USAGE = 2
EXIT_FAILURE = 1
SUITE_STEPS = 300


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print plain text and exit 2
        raise UsageError(message)


# --- helpers ----------------------------------------------------------------

@contextlib.contextmanager
def staged_output(out: str | Path):
    """Yield a staging directory that becomes ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.tmp-", dir=out.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if not out.exists():
        os.replace(stage, out)
        return
    for item in stage.iterdir():
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        os.replace(item, target)
    stage.rmdir()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _snapshot(stage: Path, args, config: RunConfig, **extra) -> None:
    _write_json(stage / "run.json", {
        "command": args.command,
        "argv": getattr(args, "_argv", None),
        "config": config.to_dict(),
        "seed": config.train.seed,
        "version": __version__,
        **extra,
    })


def _build_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "preset", "full") == "desk":
        cfg = RunConfig.desk()
    else:
        cfg = RunConfig()
    cfg = cfg.with_overrides(getattr(args, "set", None))
    train = {}
    if getattr(args, "seed", None) is not None:
        train["train.seed"] = args.seed
    if getattr(args, "max_steps", None) is not None:
        train["train.max_steps"] = args.max_steps
    if train:
        cfg = cfg.with_overrides([f"{k}={json.dumps(v)}" for k, v in train.items()])
    for name in getattr(args, "ablate", None) or []:
        cfg = cfg.with_ablation(name)
    return cfg.resolved()


def _load_split(manifests, cfg: RunConfig):
    if not manifests:
        raise UsageError("at least one dataset manifest is required")
    return [split_edges(load_dataset(m), cfg.train.test_ratio, cfg.train.seed) for m in manifests]


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--param {item!r} must look like key=value")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    return params


# --- commands -----------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    g = gen_synthetic(args.family, args.nodes, _parse_params(args.param), seed=args.seed, name=args.name)
    path = save_dataset(g, args.out)
    print(json.dumps({"manifest": str(path), "nodes": g.num_nodes, "edges": g.num_edges}))
    return 0


def cmd_preprocess(args) -> int:
    cfg = _build_config(args)
    data = _load_split(args.manifests, cfg)
    cache = EmbeddingCache(args.cache_dir)

    def one(g):
        adj = normalize_adjacency(g, cfg.embed.self_loops)
        _, hit = cache.get(g, adj, cfg.embed, cfg.train.seed, 0)
        return g.name, hit

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(one, data))
    for name, hit in results:
        print(f"{name}: {'cache hit' if hit else 'computed'}")
    return 0


def cmd_train(args) -> int:
    cache = EmbeddingCache(args.cache_dir) if args.cache_dir else None
    with staged_output(args.out) as stage, open(stage / "train.log.jsonl", "w", encoding="utf-8") as logf:
        if args.resume:
            ckpt = load_checkpoint(args.resume)
            cfg = ckpt.config
            data = _load_split(args.manifests, cfg)
            trainer = ckpt.trainer(data, cache=cache, log_stream=logf)
        else:
            cfg = _build_config(args)
            data = _load_split(args.manifests, cfg)
            trainer = Trainer(data, cfg, cache=cache, log_stream=logf)
        _snapshot(stage, args, cfg, manifests=[str(m) for m in args.manifests], resume=args.resume)
        every = cfg.train.checkpoint_every

        def periodic(tr, rec):
            if every and tr.step_count % every == 0:
                save_checkpoint(tr, stage / f"step{tr.step_count:08d}.ckpt")

        target = args.max_steps if (args.resume and args.max_steps is not None) else None
        trainer.run(target, callback=periodic)
        save_checkpoint(trainer, stage / "final.ckpt")
        summary = {
            "checkpoint": str(Path(args.out) / "final.ckpt"),
            "steps": trainer.step_count,
            "final_loss": trainer.history[-1].loss if trainer.history else None,
            "expert_steps": trainer.router.m.tolist(),
            "assignment": trainer.router.assignment,
        }
        _write_json(stage / "summary.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config.resolved()
    data = _load_split(args.manifests, cfg)
    report = evaluate(ckpt, data, task=args.task, mode=args.mode, k=args.k)
    with staged_output(args.out) as stage:
        _snapshot(stage, args, cfg, checkpoint=str(args.checkpoint), manifests=[str(m) for m in args.manifests])
        (stage / "eval.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (stage / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_json())
    return 0


def route_table(ckpt: Checkpoint, data) -> list[list]:
    cfg = ckpt.config.resolved()
    model, router = ckpt.model(), ckpt.router()
    rows = []
    for g in data:
        adj = normalize_adjacency(g, cfg.embed.self_loops)
        e1 = initial_embedding(g, adj, cfg.embed, cfg.train.seed, 0)
        state = router.copy()
        k = route(model, e1, g, state, cfg.train.seed)
        rows.append([g.name, *state.scores[g.name].tolist(), k])
    return rows


def cmd_route(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = _load_split(args.manifests, ckpt.config.resolved())
    rows = route_table(ckpt, data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", *(f"expert_{k}" for k in range(ckpt.config.model.num_experts)), "argmax"])
    w.writerows(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_suite(args) -> int:
    if args.name == "acceptance":
        numbers = [int(x) for x in args.criteria.split(",")] if args.criteria else None
        results = run_all(numbers, echo=print)
        with staged_output(args.out) as stage:
            _write_json(stage / "acceptance.json", [
                {"criterion": r.number, "name": r.name, "passed": r.passed, "seconds": r.seconds,
                 "budget_seconds": r.budget, "detail": r.detail} for r in results
            ])
            (stage / "acceptance.txt").write_text("\n".join(r.line() for r in results) + "\n", encoding="utf-8")
        return 0 if all(r.passed for r in results) else EXIT_FAILURE

    cfg = _build_config(args)
    if args.train:
        train = _load_split(args.train, cfg)
        test = _load_split(args.test, cfg) if args.test else train
    else:
        train, test = desk_datasets(cfg.train.seed)
    if args.name == "scaling":
        rows = scaling_suite(cfg, train, test, workers=args.workers)
    else:
        rows = ablation_suite(cfg, train, test, workers=args.workers)
    text = rows_to_csv(rows)
    with staged_output(args.out) as stage:
        _snapshot(stage, args, cfg, suite=args.name)
        (stage / f"{args.name}.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# --- parser -------------------------------------------------------------------

def _config_options(p: argparse.ArgumentParser, steps_default=None) -> None:
    p.add_argument("--config", help="run config JSON (sections: embed, model, train)")
    p.add_argument("--preset", choices=("full", "desk"), default="full",
                   help="defaults used when no --config is given")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, default=steps_default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anygraph", description="Mixture-of-experts graph foundation model.")
    parser.add_argument("--version", action="version", version=f"anygraph {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--family", required=True, choices=("sbm", "bipartite", "ba", "grid"))
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("preprocess", help="compute and cache initial embeddings")
    _config_options(p)
    p.add_argument("--cache-dir")
    p.add_argument("--workers", type=int, default=1, help="datasets processed in parallel")
    p.add_argument("manifests", nargs="*")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on dataset manifests")
    _config_options(p)
    p.add_argument("--ablate", action="append", choices=ABLATIONS)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--cache-dir")
    p.add_argument("--out", required=True)
    p.add_argument("manifests", nargs="*")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("link", "node"), default="link")
    p.add_argument("--mode", choices=("zero_shot", "full_shot"), default="zero_shot")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("manifests", nargs="*")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route", help="dataset x expert competence table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="CSV path (also printed)")
    p.add_argument("manifests", nargs="*")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("suite", help="scaling ladder, ablations or acceptance checks")
    p.add_argument("name", choices=("scaling", "ablation", "acceptance"))
    _config_options(p, steps_default=SUITE_STEPS)
    p.add_argument("--workers", type=int, default=1, help="configs trained in parallel")
    p.add_argument("--train", nargs="*", help="training manifests (default: synthetic desk mix)")
    p.add_argument("--test", nargs="*", help="held-out manifests")
    p.add_argument("--criteria", help="comma-separated criterion numbers (acceptance only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_suite, preset="desk")
    return parser


_KNOWN_ERRORS = (
    ConfigError, CheckpointError, ContaminationError, GraphParseError, GraphValidationError,
    TrainingDivergedError, ValueError, OSError, KeyError, IndexError,
)


def _fail(command, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({
        "error": type(exc).__name__,
        "message": str(exc),
        "command": command,
    }) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        args._argv = argv
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        return _fail(command, exc, EXIT_USAGE)
    except _KNOWN_ERRORS as exc:
        return _fail(command, exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
