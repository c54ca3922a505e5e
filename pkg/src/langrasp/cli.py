"""Command-line surface: train / eval / gradcheck / render / make-suite.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evaluate as ev
from .config import ConfigError, config_hash, dump_config, load_config
from .gradcheck import LOSSES, run_gradcheck
from .policy import FUSION_MODES, load_checkpoint
from .render import render_scene_png, render_trace_pngs
from .runtime import Setup
from .sac import train_curriculum
from .world import sample_instruction, sample_scene


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="langrasp",
                description="Language-conditioned grasping on a synthetic tabletop")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[], help="run the two-stage curriculum")
    t.add_argument("--config", help="YAML config file (defaults apply otherwise)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or baseline on a suite")
    e.add_argument("--checkpoint", help="trained policy checkpoint (.npz)")
    e.add_argument("--suite", required=True, help="suite JSON file")
    e.add_argument("--config", help="config file (defaults: checkpoint's config)")
    e.add_argument("--runs", type=int, help="runs per case (default from config)")
    e.add_argument("--baseline", choices=["policy", "grounding", "random"],
                   default="policy")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="report directory")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="micro-scale full-model gradient check")
    g.add_argument("--seed", type=int, default=5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--mode", choices=FUSION_MODES, action="append",
                   help="restrict to a fusion mode (repeatable)")
    g.add_argument("--loss", choices=LOSSES, action="append",
                   help="restrict to a loss (repeatable)")
    g.add_argument("--inject-fault", action="store_true",
                   help="corrupt one gradient entry; the check must then fail")
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("render", help="scene or trace to PNG")
    r.add_argument("--config")
    r.add_argument("--out", required=True, help="output file (scene) or dir (trace)")
    r.add_argument("--scene-seed", type=int, help="render a sampled scene")
    r.add_argument("--objects", type=int, default=8)
    r.add_argument("--report", help="eval report JSON with traces")
    r.add_argument("--suite", help="suite JSON the report was produced from")
    r.add_argument("--case", help="case id inside the report")
    r.add_argument("--run", type=int, default=0)
    r.set_defaults(func=cmd_render)

    m = sub.add_parser("make-suite", help="generate evaluation suites from a seed")
    m.add_argument("--config")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, help="directory for the suite files")
    m.set_defaults(func=cmd_make_suite)
    return p


def _load_config(args, overrides=None):
    try:
        return load_config(getattr(args, "config", None), overrides)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


def cmd_train(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    config = _load_config(args, overrides)
    os.makedirs(args.out, exist_ok=True)
    dump_config(config, os.path.join(args.out, "config_resolved.json"))
    result = train_curriculum(config, args.out, resume=args.resume)
    print(json.dumps({"config_hash": result["config_hash"],
                      "episodes": result["episodes"],
                      "metrics": result["metrics"],
                      "checkpoint": result["checkpoint"]}))
    return 0


def cmd_eval(args) -> int:
    model = None
    if args.baseline == "policy":
        if not args.checkpoint:
            print("error: --checkpoint is required for the policy evaluation",
                  file=sys.stderr)
            return 1
        model, meta, _ = load_checkpoint(args.checkpoint)
        config = meta["config"] if args.config is None else _load_config(args)
    else:
        config = _load_config(args)
    setup = Setup(config)
    suite = ev.load_suite(args.suite)
    runs = args.runs or config["eval"]["runs_per_case"]
    if args.baseline == "policy":
        policy_fn = ev.policy_fn_from_model(model, setup.encoder)
    else:
        policy_fn = ev.baseline_fn(args.baseline, setup)
    report = ev.evaluate(policy_fn, suite, setup, runs_per_case=runs,
                         seed=args.seed,
                         max_attempts=config["eval"]["max_attempts"])
    report["baseline"] = args.baseline
    json_path, csv_path = ev.save_report(report, args.out, config,
                                         name=f"report_{args.baseline}")
    agg = report["aggregate"]
    mn = "n/a" if agg["motion_number"] is None else f"{agg['motion_number']:.2f}"
    print(f"success_rate={agg['success_rate']:.1f}% motion_number={mn} "
          f"report={json_path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(modes=tuple(args.mode) if args.mode else FUSION_MODES,
                            losses=tuple(args.loss) if args.loss else LOSSES,
                            seed=args.seed, inject_fault=args.inject_fault)
    worst = 0.0
    for (mode, loss), err in sorted(results.items()):
        print(f"{mode:16s} {loss:7s} max_rel_err={err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tolerance
    print(f"worst={worst:.3e} tolerance={args.tolerance:.0e} "
          f"{'OK' if ok else 'FAIL'}")
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


def cmd_render(args) -> int:
    config = _load_config(args)
    setup = Setup(config)
    if args.scene_seed is not None:
        rng = np.random.default_rng(args.scene_seed)
        instruction = sample_instruction(rng, setup.table)
        scene = sample_scene(rng, args.objects, setup.train_specs,
                             setup.workspace, instruction,
                             seed=args.scene_seed)
        render_scene_png(scene, args.out)
        print(f"scene target(s): {scene.target_ids} "
              f"instruction: {instruction.text!r} -> {args.out}")
        return 0
    if args.report:
        if not (args.suite and args.case is not None):
            print("error: --report rendering needs --suite and --case",
                  file=sys.stderr)
            return 1
        with open(args.report) as f:
            report = json.load(f)
        suite = ev.load_suite(args.suite)
        cases = {c["case_id"]: ev.TestCase.from_dict(c) for c in suite["cases"]}
        trace = next((t for t in report["traces"]
                      if t["case_id"] == args.case and t["run"] == args.run), None)
        if trace is None:
            print(f"error: no trace for case {args.case} run {args.run}",
                  file=sys.stderr)
            return 1
        scene = ev.build_case_scene(cases[args.case], setup)
        paths = render_trace_pngs(trace, scene, args.out)
        print("\n".join(paths))
        return 0
    print("error: pass --scene-seed or --report", file=sys.stderr)
    return 1


def cmd_make_suite(args) -> int:
    config = _load_config(args)
    setup = Setup(config)
    os.makedirs(args.out, exist_ok=True)
    suites = ev.make_all_suites(setup, args.seed)
    written = {}
    for split, suite in suites.items():
        path = os.path.join(args.out, f"suite_{split}.json")
        suite["config_hash"] = config_hash(config)
        ev.save_suite(suite, path)
        written[split] = path
    print(json.dumps(written))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except SystemExit:
        raise
    except Exception as exc:  # runtime failures exit 2 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
