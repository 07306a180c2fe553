"""Command-line entry point.

Typical desk-scale pipeline::

    mote pretrain-dense --out runs/dense
    mote upcycle --dense runs/dense --out runs/mote --experts 4 --init ffn
    mote train-moe --ckpt runs/mote --out runs/mote-trained --steps 2000
    mote pack --ckpt runs/mote-trained --out runs/mote-packed
    mote eval --ckpt runs/mote-packed

Settings resolve as flags > ``--config`` file (a JSON path or a bundled
preset name) > defaults, and every run writes ``resolved_config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import analytics, checkpoint
from .convert import pack_model, ptq_shared
from .errors import ConfigError, MoteError
from .model import ModelConfig, build_model, lm_forward
from .synthdata import TaskSpec, collate, split
from .train import JsonlSink, TrainConfig, Trainer, evaluate
from .upcycle import PRESETS, memory_report, memory_report_preset, parameter_census, upcycle_checkpoint

log = logging.getLogger("mote")

DEFAULTS = {
    "pretrain-dense": {
        "seed": 0, "steps": 1500, "lr": 3e-3, "batch_size": 32,
        "d_model": 128, "n_heads": 4, "d_ffn": 352, "n_layers": 2, "max_seq": 48,
        "train_n": 20000, "eval_n": 512, "task_seed": 0,
    },
    "upcycle": {"experts": 4, "init": "ffn", "routed": "ternary", "shared": "full", "seed": 0},
    "train-moe": {
        "gamma": 0.01, "ternary_fraction": 1.0, "steps": 2000, "seed": 0, "lr": 1e-3,
        "batch_size": 32, "weight_decay": 0.1, "decay_until": 0.5, "grad_clip": 1.0,
    },
    "eval": {"ablate_moe": False, "batch_size": 64},
    "pack": {},
    "ptq-shared": {"bits": 8},
    "memory-report": {"preset": None, "d_model": None, "d_ffn": None, "layers": None, "experts": 4, "json": False},
    "analyze": {"top_k": 10, "formats": ["csv", "json", "svg"]},
}


class UsageError(MoteError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": message}) + "\n")
        sys.exit(2)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mote", description="Mixture-of-ternary-experts toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON config file or bundled preset name")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    s = cmd("pretrain-dense", "train a dense micro-model on the synthetic task")
    s.add_argument("--out", required=True)
    for flag, typ in [("--seed", int), ("--steps", int), ("--lr", float), ("--batch-size", int),
                      ("--d-model", int), ("--n-heads", int), ("--d-ffn", int), ("--n-layers", int),
                      ("--max-seq", int), ("--train-n", int), ("--eval-n", int), ("--task-seed", int)]:
        s.add_argument(flag, type=typ)

    s = cmd("upcycle", "expand a dense checkpoint into a MoTE checkpoint")
    s.add_argument("--dense", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--experts", type=int)
    s.add_argument("--init", choices=["ffn", "random"])
    s.add_argument("--routed", choices=["ternary", "binary", "full"])
    s.add_argument("--shared", choices=["full", "ternary"])
    s.add_argument("--seed", type=int)

    s = cmd("train-moe", "quantization-aware training of routed experts")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gamma", type=float)
    s.add_argument("--ternary-fraction", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--weight-decay", type=float)

    s = cmd("eval", "answer-token loss and perplexity on the eval split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ablate-moe", action="store_true", default=None)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--trace-out", help="write the routing trace (.npz)")
    s.add_argument("--run-dir", default="mote_runs")

    s = cmd("pack", "convert latent ternary experts to INT2 packed storage")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)

    s = cmd("ptq-shared", "RTN post-training quantization of shared experts")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bits", type=int, choices=[4, 8])

    s = cmd("memory-report", "expert memory of MoTE vs a BF16 MoE baseline")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--d-model", type=int)
    s.add_argument("--d-ffn", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--experts", type=int)
    s.add_argument("--json", action="store_true", default=None)
    s.add_argument("--run-dir", default="mote_runs")

    s = cmd("analyze", "routing distributions, pathways and exports")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--trace")
    s.add_argument("--out", required=True)
    s.add_argument("--top-k", type=int)
    s.add_argument("--formats", nargs="+", choices=["csv", "json", "svg"])
    return p


def _load_config_file(name: str | None) -> dict:
    if not name:
        return {}
    path = Path(name)
    if not path.exists():
        preset = resources.files("mote") / "presets" / f"{name}.json"
        if not preset.is_file():
            raise ConfigError(f"config {name!r} is neither a file nor a bundled preset")
        return json.loads(preset.read_text())
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags (highest precedence)."""
    resolved = dict(DEFAULTS[command])
    file_cfg = _load_config_file(args.config)
    file_cfg = file_cfg.get(command, file_cfg) if isinstance(file_cfg, dict) else {}
    for k, v in file_cfg.items():
        if k not in resolved:
            raise ConfigError(f"config key {k!r} is not valid for {command}")
        resolved[k] = v
    for k, v in vars(args).items():
        if k in resolved and v is not None:
            resolved[k] = v
    return resolved


def _write_resolved(directory, command: str, resolved: dict, args: argparse.Namespace) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: v for k, v in vars(args).items() if k in ("out", "dense", "ckpt", "trace", "trace_out")}
    payload = {"command": command, "settings": resolved, "paths": paths}
    (directory / "resolved_config.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def _task_from_meta(meta: dict) -> tuple[TaskSpec, int, int]:
    if "task" not in meta:
        raise ConfigError("checkpoint carries no task description")
    return TaskSpec(**meta["task"]), meta["train_n"], meta["eval_n"]


def _data_meta(meta: dict) -> dict:
    return {k: meta[k] for k in ("task", "train_n", "eval_n") if k in meta}


# --- subcommands -----------------------------------------------------------------


def cmd_pretrain_dense(r: dict, args) -> dict:
    spec = TaskSpec(seed=r["task_seed"])
    cfg = ModelConfig(
        vocab_size=spec.vocab_size, d_model=r["d_model"], n_heads=r["n_heads"], d_ffn=r["d_ffn"],
        n_layers=r["n_layers"], max_seq=r["max_seq"],
    )
    if spec.max_len > cfg.max_seq:
        raise ConfigError(f"max_seq {cfg.max_seq} shorter than task sequences ({spec.max_len})")
    train, _ = split(spec, r["train_n"], r["eval_n"])
    model = build_model(cfg, seed=r["seed"])
    tcfg = TrainConfig(lr=r["lr"], batch_size=r["batch_size"], steps=r["steps"], seed=r["seed"], weight_decay=0.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sink = JsonlSink(out / "metrics.jsonl")
    try:
        Trainer(model, tcfg, train, sink).run()
    finally:
        sink.close()
    meta = {"task": spec.to_dict(), "train_n": r["train_n"], "eval_n": r["eval_n"], "stage": "dense"}
    checkpoint.save_checkpoint(model, out, meta)
    return {"checkpoint": str(out), "params": parameter_census(model)}


def cmd_upcycle(r: dict, args) -> dict:
    dense = checkpoint.load_checkpoint(args.dense)
    meta = checkpoint.load_meta(args.dense)
    init = {"ffn": "ffn_copy", "random": "random"}[r["init"]]
    moe = upcycle_checkpoint(dense, r["experts"], init, r["routed"], r["shared"], seed=r["seed"])
    new_meta = {**_data_meta(meta), "stage": "upcycled", "init": init}
    checkpoint.save_checkpoint(moe, args.out, new_meta)
    return {"checkpoint": args.out, "params": parameter_census(moe)}


def cmd_train_moe(r: dict, args) -> dict:
    model = checkpoint.load_checkpoint(args.ckpt)
    meta = checkpoint.load_meta(args.ckpt)
    if not model.cfg.is_moe:
        raise ConfigError("train-moe needs an up-cycled checkpoint")
    spec, train_n, eval_n = _task_from_meta(meta)
    train, evals = split(spec, train_n, eval_n)
    tcfg = TrainConfig(
        lr=r["lr"], batch_size=r["batch_size"], steps=r["steps"], gamma=r["gamma"],
        ternary_fraction=r["ternary_fraction"], seed=r["seed"], weight_decay=r["weight_decay"],
        decay_until=r["decay_until"], grad_clip=r["grad_clip"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sink = JsonlSink(out / "metrics.jsonl")
    try:
        history = Trainer(model, tcfg, train, sink).run()
    finally:
        sink.close()
    result = evaluate(model, evals)
    checkpoint.save_checkpoint(model, out, {**meta, "stage": "trained", "train": tcfg.to_dict()})
    return {"checkpoint": str(out), "final_train_lm_loss": history[-1]["lm_loss"] if history else None, **result}


def cmd_eval(r: dict, args) -> dict:
    model = checkpoint.load_checkpoint(args.ckpt)
    spec, train_n, eval_n = _task_from_meta(checkpoint.load_meta(args.ckpt))
    _, evals = split(spec, train_n, eval_n)
    model.set_moe_suppressed(bool(r["ablate_moe"]))
    result = evaluate(model, evals, r["batch_size"])
    if args.trace_out:
        collect_trace(model, evals, r["batch_size"]).save(args.trace_out)
        result["trace"] = args.trace_out
    return result


@torch.no_grad()
def collect_trace(model, examples, batch_size: int = 64) -> analytics.RoutingTrace:
    if not model.cfg.is_moe:
        raise ConfigError("dense models have no routing to trace")
    model.eval()
    parts = []
    for i in range(0, len(examples), batch_size):
        arrays = collate(examples[i : i + batch_size])
        _, records = lm_forward(arrays["tokens"], model)
        parts.append(analytics.RoutingTrace.from_records(records, arrays["valid"], arrays["visual"], arrays["example_id"]))
    return analytics.RoutingTrace.concat(parts)


def cmd_pack(r: dict, args) -> dict:
    model = checkpoint.load_checkpoint(args.ckpt)
    meta = checkpoint.load_meta(args.ckpt)
    pack_model(model)
    checkpoint.save_checkpoint(model, args.out, {**meta, "stage": "packed"})
    size = (Path(args.out) / checkpoint.WEIGHTS).stat().st_size
    return {"checkpoint": args.out, "weights_bytes": size}


def cmd_ptq_shared(r: dict, args) -> dict:
    model = checkpoint.load_checkpoint(args.ckpt)
    meta = checkpoint.load_meta(args.ckpt)
    slack = ptq_shared(model, r["bits"])
    worst = max(v for d in slack.values() for v in d.values())
    if worst > 1.0 + 1e-6:
        raise MoteError(f"RTN error bound violated (slack {worst})")
    checkpoint.save_checkpoint(model, args.out, {**meta, "ptq_shared_bits": r["bits"]})
    return {"checkpoint": args.out, "bits": r["bits"], "max_bound_slack": worst}


def cmd_memory_report(r: dict, args) -> dict:
    if r["preset"]:
        rep = memory_report_preset(r["preset"])
    elif None not in (r["d_model"], r["d_ffn"], r["layers"]):
        rep = memory_report(r["d_model"], r["d_ffn"], r["layers"], r["experts"])
    else:
        raise UsageError("memory-report needs --preset or all of --d-model/--d-ffn/--layers")
    if not r["json"]:
        print(rep.table())
    return rep.to_dict()


def cmd_analyze(r: dict, args) -> dict:
    if args.trace:
        trace = analytics.RoutingTrace.load(args.trace)
    else:
        model = checkpoint.load_checkpoint(args.ckpt)
        spec, train_n, eval_n = _task_from_meta(checkpoint.load_meta(args.ckpt))
        _, evals = split(spec, train_n, eval_n)
        trace = collect_trace(model, evals)
    results = analytics.analyze(trace, r["top_k"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [str(analytics.export_analytics(results, out / f"routing.{fmt}", fmt)) for fmt in r["formats"]]
    summary = {
        "files": files,
        "tv_text_vs_visual": results.get("tv_text_vs_visual"),
        "min_load_per_layer": results["loads"]["all"].min(axis=1).tolist(),
    }
    return summary


COMMANDS = {
    "pretrain-dense": cmd_pretrain_dense,
    "upcycle": cmd_upcycle,
    "train-moe": cmd_train_moe,
    "eval": cmd_eval,
    "pack": cmd_pack,
    "ptq-shared": cmd_ptq_shared,
    "memory-report": cmd_memory_report,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    threads = os.environ.get("MOTE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        resolved = resolve(args.command, args)
        run_dir = getattr(args, "out", None) or getattr(args, "run_dir", None) or "mote_runs"
        _write_resolved(run_dir, args.command, resolved, args)
        t0 = time.perf_counter()
        result = COMMANDS[args.command](resolved, args)
        result = {"command": args.command, "seconds": round(time.perf_counter() - t0, 3), **result}
    except UsageError as e:
        sys.stderr.write(json.dumps({"error": e.kind, "message": str(e)}) + "\n")
        return 2
    except MoteError as e:
        sys.stderr.write(json.dumps({"error": e.kind, "message": str(e)}) + "\n")
        return 1
    if args.command != "memory-report" or resolved["json"]:
        print(json.dumps(result, default=_jsonable))
    return 0


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


cli_dispatch = main

if __name__ == "__main__":
    sys.exit(main())
