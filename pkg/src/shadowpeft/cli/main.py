"""``shadowpeft`` command line."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import checkpoint, runner
from ..config import ConfigError
from ..crossscale import VocabMismatch, pinv_init_projection, projection_complement_norm
from ..numerics.alloc import tune_allocator
from ..numerics.tensor import ShapeError
from ..tasks import make_task
from ..training import accuracy
from .config_io import load_run_config

GRADCHECK_TOL = 1e-4


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=("shadow", "lora"))
    p.add_argument("--inference-mode", choices=("attached", "detached"))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--f32", action="store_true", help="32-bit floats")


def _load(args, default_path=None):
    path = args.config if args.config is not None else default_path
    return load_run_config(path, args.overrides, args.seed, args.method, args.inference_mode, args.f32)


def _sidecar(ckpt):
    if ckpt is None:
        return None
    side = Path(ckpt).parent / runner.CONFIG_NAME
    return side if side.exists() else None


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> int:
    cfg = _load(args)

    def progress(rec):
        print(f"step {rec['step']:>5}  total {rec['total']:.4f}  base_ce {rec['base_ce']:.4f}  "
              f"shadow_ce {rec['shadow_ce']:.4f}  eval_acc {rec['eval_acc']:.4f}", file=sys.stderr)

    res = runner.run_training(cfg, args.out, progress)
    summary = {"out": str(args.out), "method": res.cfg.method, "seed": res.cfg.seed,
               "base_acc_before": res.base_acc, "final_eval_acc": res.history.final_eval_acc,
               "trainable": res.history.steps[-1].trainable_param_count if res.history.steps else 0}
    summary.update(res.info)
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args, _sidecar(args.checkpoint))
    model = runner.build_model(runner.resolve_lora(cfg)[0])
    if args.checkpoint is not None:
        checkpoint.load_file_into(model, args.checkpoint)
    mode = cfg.inference_mode
    if cfg.method == "lora" and mode == "detached":
        raise ValueError("LoRA checkpoints have no detached mode")
    task = make_task(cfg.task, cfg.seed)
    before = model.base.layer_calls
    acc = accuracy(model, task.eval, mode)
    calls = model.base.layer_calls - before
    if mode == "detached" and calls:
        raise RuntimeError(f"detached evaluation ran {calls} base layers")
    _emit({"mode": mode, "task": cfg.task.name, "accuracy": acc, "examples": len(task.eval),
           "base_layer_calls": calls})
    return 0


def cmd_generate(args) -> int:
    cfg = _load(args, _sidecar(args.checkpoint))
    model = runner.build_model(runner.resolve_lora(cfg)[0])
    if args.checkpoint is not None:
        checkpoint.load_file_into(model, args.checkpoint)
    prompt = [int(t) for t in args.prompt.replace(",", " ").split()]
    out = runner.generate(model, prompt, args.max_new, cfg.inference_mode)
    print(" ".join(str(t) for t in out))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    report = runner.gradcheck_pipeline(cfg, cfg.seed)
    width = max(len(r[0]) for r in report)
    for name, err, norm in report:
        note = "" if norm > 0 else "  (no gradient path)"
        print(f"{name:<{width}}  {err:.3e}  |g| {norm:.3e}{note}")
    worst, err, _ = max(report, key=lambda r: r[1])
    print(f"max rel-err {err:.3e} at {worst}")
    if not err < args.tolerance:
        print(f"FAIL: {worst} exceeds {args.tolerance:g}", file=sys.stderr)
        return 1
    return 0


def cmd_params(args) -> int:
    rows = runner.params_table(_load(args))
    print(f"{'group':<16}{'enumerated':>12}{'formula':>12}")
    ok = True
    for group, n, f in rows:
        ok &= n == f
        print(f"{group:<16}{n:>12}{f:>12}{'' if n == f else '  MISMATCH'}")
    return 0 if ok else 1


def _find(entries, names):
    by = {e.name: e for e in entries}
    for n in names:
        if n in by:
            return by[n]
    raise checkpoint.CheckpointError(f"none of {list(names)} found in checkpoint")


def cmd_pinv_init(args) -> int:
    base_head = _find(checkpoint.load(args.base), [args.base_head])
    shadow_names = [args.shadow_head] if args.shadow_head else ["ref.head", "shadow.lm_head"]
    ref_head = _find(checkpoint.load(args.shadow), shadow_names)
    # stored heads are (width, V); the projection works on (V, width)
    w_lm, w_ref = base_head.data.T.astype(np.float64), ref_head.data.T.astype(np.float64)
    init = pinv_init_projection(w_lm, w_ref)
    checkpoint.write_entries(args.out, [
        checkpoint.Entry("P", init.P, True),
        checkpoint.Entry("norm_lm", np.array(init.norm_lm), False),
        checkpoint.Entry("norm_ref", np.array(init.norm_ref), False),
        checkpoint.Entry("residual", np.array(init.residual), False),
    ])
    _emit({"out": str(args.out), "P_shape": list(init.P.shape), "residual": init.residual,
           "complement_norm": projection_complement_norm(w_lm, w_ref),
           "norm_lm": init.norm_lm, "norm_ref": init.norm_ref})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shadowpeft", description="ShadowPEFT at desk scale")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain and freeze the base, then train adapters")
    _config_args(p)
    p.add_argument("--out", type=Path, default=Path("run"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="accuracy on the eval split")
    p.add_argument("checkpoint", type=Path, nargs="?", help="omit to evaluate a fresh model")
    _config_args(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="greedy continuation")
    p.add_argument("checkpoint", type=Path, nargs="?")
    p.add_argument("--prompt", required=True, help="token ids separated by spaces or commas")
    p.add_argument("--max-new", type=int, default=8)
    _config_args(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss on a tiny model")
    _config_args(p)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOL)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="trainable counts per group against the closed forms")
    _config_args(p)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("pinv-init", help="pseudo-inverse projection between two LM heads")
    p.add_argument("--base", type=Path, required=True, help="checkpoint holding the base head")
    p.add_argument("--shadow", type=Path, required=True, help="checkpoint holding the shadow reference head")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--base-head", default="base.lm_head")
    p.add_argument("--shadow-head")
    p.set_defaults(fn=cmd_pinv_init)
    return ap


def main(argv=None) -> int:
    tune_allocator()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (checkpoint.CheckpointError, ShapeError, VocabMismatch, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
