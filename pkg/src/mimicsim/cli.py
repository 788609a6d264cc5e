"""Command-line front end: train, gradcheck, ablate, rollout, gen-ref and eval.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 gradient check failure.
Outputs go to ``--out`` or, by default, ``$MIMICSIM_OUT/<command>`` (``./runs/<command>``).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import evalkit as ek
from . import mimic_train as mt
from . import policy as pol
from .reference import GENERATORS, MotionError, generate_reference, load_motion, make_motion, save_motion
from .sim import CONTROL_DT, SimulationError, SpecError, load_character

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4
CONFIG_FORMAT = "run/v1"

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "iters": "iterations",
    "steps": "episode_steps",
    "batch": "batch",
    "replay": "replay",
    "gamma": "gamma",
    "epsilon": "epsilon",
    "truncation": "truncation",
    "rsi": "rsi",
    "seed": "seed",
    "lr": "lr",
    "max_grad_norm": "max_grad_norm",
    "eval_steps": "eval_steps",
    "success_seconds": "success_seconds",
}

REPLAY_GRID = [
    ("none", {"replay": "none"}),
    ("random_0.01", {"replay": "random", "gamma": 0.01}),
    ("random_0.05", {"replay": "random", "gamma": 0.05}),
    ("random_0.1", {"replay": "random", "gamma": 0.10}),
    ("threshold_0.1", {"replay": "threshold", "epsilon": 0.1}),
    ("threshold_0.2", {"replay": "threshold", "epsilon": 0.2}),
    ("threshold_0.4", {"replay": "threshold", "epsilon": 0.4}),
]
TRUNCATION_GRID = [("truncate_10", {"truncation": 10}), ("full", {"truncation": None})]
RSI_GRID = [("rsi_off", {"rsi": False}), ("rsi_on", {"rsi": True})]
ABLATIONS = {"replay": REPLAY_GRID, "truncation": TRUNCATION_GRID, "rsi": RSI_GRID}


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# -------------------------------------------------------------------- config


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise CliError(f"{p}: cannot parse config: {e}") from None
    if not isinstance(doc, dict):
        raise CliError(f"{p}: config must be a mapping")
    return doc


def resolve_config(args) -> dict:
    """File values, then command-line overrides; every default made explicit."""
    doc = _read_config(getattr(args, "config", None))
    train = dict(doc.get("train") or {})
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            train[key] = v
    if isinstance(train.get("truncation"), str) and train["truncation"] in ("full", "none"):
        train["truncation"] = None
    try:
        cfg = mt.TrainConfig.from_dict(train)
    except mt.ConfigError as e:
        raise CliError(str(e)) from None
    run = {
        "format": CONFIG_FORMAT,
        "command": args.command,
        "character": getattr(args, "character", None) or doc.get("character"),
        "motion": getattr(args, "motion", None) or doc.get("motion"),
        "train": cfg.to_dict(),
    }
    for key in ("checkpoint", "policy_seed", "jobs"):
        v = getattr(args, key, None)
        run[key] = v if v is not None else doc.get(key)
    if run["policy_seed"] is None:
        run["policy_seed"] = cfg.seed
    if run["jobs"] is None:
        run["jobs"] = 1
    if run["character"] is None:
        raise CliError("no character given (--character or 'character' in the config)")
    return run


def _out_dir(args, command: str) -> Path:
    root = getattr(args, "out", None)
    if root is None:
        root = Path(os.environ.get("MIMICSIM_OUT", "runs")) / command
    out = Path(root)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {out}: {e}") from None
    return out


def _echo(out: Path, run: dict) -> None:
    (out / "config.json").write_text(json.dumps(run, indent=1, default=ek._json_default) + "\n")


def _load_spec(name):
    try:
        return load_character(name)
    except (SpecError, FileNotFoundError) as e:
        raise CliError(f"character {name!r}: {e}") from None


def _load_motion(path, spec):
    if path is None:
        raise CliError("no motion given (--motion or 'motion' in the config)")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"motion file not found: {p}")
    try:
        motion = load_motion(p, spec)
    except MotionError as e:
        raise CliError(f"{p}: {e}") from None
    if motion.character != spec.name:
        raise CliError(f"{p}: motion is for {motion.character!r}, character is {spec.name!r}")
    return motion


def _load_policy(path, spec):
    if path is None:
        raise CliError("no checkpoint given (--checkpoint)")
    p = Path(path)
    if not p.is_file():
        raise CliError(f"checkpoint not found: {p}")
    try:
        params, meta = pol.load_checkpoint(p)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise CliError(f"{p}: {e}") from None
    if params.in_dim != pol.feature_dim(spec) or params.act_dim != spec.n_act:
        raise CliError(
            f"{p}: checkpoint maps {params.in_dim} -> {params.act_dim}, "
            f"character {spec.name!r} needs {pol.feature_dim(spec)} -> {spec.n_act}"
        )
    if meta.get("character") not in (None, spec.name):
        raise CliError(f"{p}: checkpoint was trained for {meta['character']!r}, not {spec.name!r}")
    return params


def _setup(args):
    run = resolve_config(args)
    spec = _load_spec(run["character"])
    cfg = mt.TrainConfig.from_dict(run["train"])
    return run, spec, cfg


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    run, spec, cfg = _setup(args)
    motion = _load_motion(run["motion"], spec)
    out = _out_dir(args, "train")
    _echo(out, run)
    params = pol.policy_for(spec, cfg.hidden, seed=run["policy_seed"])
    try:
        res = mt.train(params, motion, spec, cfg, log_path=out / "train_log.jsonl", diagnostics_dir=out)
    except mt.TrainingError as e:
        where = e.diagnostics.get("path")
        raise CliError(f"training aborted: {e}" + (f" (diagnostics: {where})" if where else ""), EXIT_NUMERIC) from None
    pol.save_checkpoint(res.params, out / "policy.json", {"character": spec.name, "config": cfg.to_dict()})
    steps = cfg.eval_steps or cfg.episode_steps
    ev = mt.evaluate_rollout(res.params, motion, spec, steps)
    report = {"character": spec.name, "iterations": cfg.iterations, "eval_steps": steps}
    if ev.failed_at is None:
        rep = ek.rollout_report(spec, motion, ev)
        report.update(rep.to_dict())
        ek.write_frame_errors(out / "frame_errors.csv", rep.per_frame)
    else:
        report.update({"mean_pose_error": math.inf, "failed_at": ev.failed_at})
    report["fall"] = ek.fall_metrics(spec, ev.states)
    ek.write_report(out / "eval_report.json", report)
    print(f"trained {cfg.iterations} iterations; eval pose error {report['mean_pose_error']:.6f} m; output in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run, spec, cfg = _setup(args)
    motion = _load_motion(run["motion"], spec)
    out = _out_dir(args, "gradcheck")
    run["coords"] = args.coords
    run["h"] = list(args.h)
    run["corrupt_adjoint"] = bool(args.corrupt_adjoint)
    _echo(out, run)
    params = pol.policy_for(spec, cfg.hidden, seed=run["policy_seed"])
    if args.perturb:
        # move off the near-zero output layer so every parameter carries signal
        rng = np.random.default_rng(run["policy_seed"])
        params = pol.PolicyParams.from_arrays([a + args.perturb * rng.standard_normal(a.shape) for a in params.arrays()])
    hook = _corrupting_hook if args.corrupt_adjoint else None
    res = mt.gradient_check(params, motion, spec, cfg, args.coords, tuple(args.h), cfg.seed, hook)
    report = {
        "character": spec.name,
        "coords": len(res.coords),
        "max_rel_error": res.max_rel_error,
        "best_h": res.best_h,
        "h_sweep": {f"{h:g}": e for h, e in res.rel_error.items()},
        "tolerance": args.tol,
        "passed": res.max_rel_error < args.tol,
    }
    ek.write_report(out / "gradcheck.json", report)
    for h, e in res.rel_error.items():
        print(f"h={h:g}  max relative error {e:.3e}")
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"{verdict} {spec.name}: max relative error {res.max_rel_error:.3e} (h={res.best_h:g}, tol {args.tol:g})")
    return EXIT_OK if report["passed"] else EXIT_GRADCHECK


def _corrupting_hook(index, op, g):
    # negative control: scale the adjoint flowing through every simulator transition
    return 1.1 * g if op == "transition" else g


def _train_variant(name, spec, motion, cfg, params, out):
    res = mt.train(params, motion, spec, cfg, log_path=out / f"log_{name}.jsonl")
    ev = mt.evaluate_rollout(res.params, motion, spec, cfg.eval_steps or cfg.episode_steps)
    row = {"variant": name, "config": cfg.to_dict(), "final_loss": res.log[-1]["loss"] if res.log else None}
    if ev.failed_at is None:
        row.update(ek.rollout_report(spec, motion, ev).to_dict())
    else:
        row.update({"mean_pose_error": math.inf, "failed_at": ev.failed_at})
    if cfg.success_seconds > 0:
        row["success_iteration"] = ek.samples_to_success(res.log, spec, samples_per_iteration=1)
    return row


def cmd_ablate(args) -> int:
    run, spec, cfg = _setup(args)
    motion = _load_motion(run["motion"], spec)
    out = _out_dir(args, f"ablate_{args.axis}")
    run["axis"] = args.axis
    run["seeds"] = list(args.seeds)
    _echo(out, run)
    jobs = []
    for seed in args.seeds:
        params = pol.policy_for(spec, cfg.hidden, seed=seed)
        for name, change in ABLATIONS[args.axis]:
            c = mt.TrainConfig.from_dict({**cfg.to_dict(), **change, "seed": seed})
            jobs.append((f"{name}_seed{seed}", c, params))
    with ThreadPoolExecutor(max_workers=max(1, int(run["jobs"]))) as pool:
        rows = list(pool.map(lambda j: _train_variant(j[0], spec, motion, j[1], j[2], out), jobs))
    ek.write_report(out / "ablation_report.json", {"axis": args.axis, "character": spec.name, "variants": rows})
    for r in rows:
        print(f"{r['variant']:<28} pose error {r['mean_pose_error']:.6f}  final loss {r['final_loss']}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    run, spec, cfg = _setup(args)
    motion = _load_motion(run["motion"], spec)
    params = _load_policy(run["checkpoint"], spec)
    out = _out_dir(args, "rollout")
    steps = int(round(args.seconds / CONTROL_DT)) if args.seconds is not None else (cfg.eval_steps or cfg.episode_steps)
    run["export_steps"] = steps
    _echo(out, run)
    ev = mt.evaluate_rollout(params, motion, spec, steps)
    if ev.failed_at is not None:
        raise CliError(f"rollout diverged at control step {ev.failed_at}", EXIT_NUMERIC)
    x = ev.states[:steps]
    exported = make_motion(
        spec, x[:, : spec.nq], x[:, spec.nq :], 1.0 / CONTROL_DT, actions=ev.actions,
        meta={"source": "policy-rollout", "checkpoint": str(run["checkpoint"]), "reference": str(run["motion"])},
    )
    save_motion(exported, out / "rollout.motion")
    rep = ek.rollout_report(spec, motion, ev)
    ek.write_frame_errors(out / "frame_errors.csv", rep.per_frame)
    ek.write_report(out / "rollout_report.json", {"character": spec.name, "frames": steps, **rep.to_dict()})
    print(f"exported {steps} frames to {out / 'rollout.motion'}; pose error {rep.mean:.6f} m")
    return EXIT_OK


def cmd_gen_ref(args) -> int:
    spec = _load_spec(args.character)
    params = {}
    if args.params:
        try:
            params = json.loads(args.params)
        except json.JSONDecodeError as e:
            raise CliError(f"--params is not valid JSON: {e}") from None
    try:
        motion = generate_reference(spec, args.kind, params, args.fps)
    except MotionError as e:
        raise CliError(str(e)) from None
    path = Path(args.output) if args.output else _out_dir(args, "gen-ref") / f"{spec.name}_{args.kind}.motion"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_motion(motion, path)
    print(f"wrote {motion.n_frames} frames to {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run, spec, cfg = _setup(args)
    motion = _load_motion(run["motion"], spec)
    params = _load_policy(run["checkpoint"], spec)
    out = _out_dir(args, "eval")
    run["push"] = args.push
    run["friction"] = args.friction
    _echo(out, run)
    steps = cfg.eval_steps or cfg.episode_steps
    ev = mt.evaluate_rollout(params, motion, spec, steps)
    report = {"character": spec.name, "eval_steps": steps}
    if ev.failed_at is None:
        rep = ek.rollout_report(spec, motion, ev)
        report.update(rep.to_dict())
        ek.write_frame_errors(out / "frame_errors.csv", rep.per_frame)
    else:
        report.update({"mean_pose_error": math.inf, "failed_at": ev.failed_at})
    report["fall"] = ek.fall_metrics(spec, ev.states)
    if args.push:
        report["push"] = {}
        for d in args.push:
            r = ek.push_robustness(params, spec, motion, d, steps)
            report["push"][d] = {"max_force": r.max_force, "start_step": r.start_step, "tested": r.tested}
    if args.friction:
        report["friction"] = [{"mu": mu, "pose_error": e} for mu, e in ek.friction_sweep(spec, motion, args.friction, controller=params, steps=steps)]
    ek.write_report(out / "eval_report.json", report)
    print(json.dumps(report, indent=1, default=ek._json_default))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_common(p, motion=True, checkpoint=False):
    p.add_argument("--config", help="YAML or JSON run config; flags override its values")
    p.add_argument("--character", help="bundled character name or character file")
    if motion:
        p.add_argument("--motion", help="reference motion file (motion/v1)")
    if checkpoint:
        p.add_argument("--checkpoint", help="policy checkpoint (policy/v1)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--iters", type=int)
    p.add_argument("--steps", type=int, help="episode length in control steps")
    p.add_argument("--batch", type=int)
    p.add_argument("--replay", choices=mt.REPLAY_MODES)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--truncation", type=int)
    p.add_argument("--rsi", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--policy-seed", dest="policy_seed", type=int, help="policy init seed (default: --seed)")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-grad-norm", dest="max_grad_norm", type=float)
    p.add_argument("--eval-steps", dest="eval_steps", type=int)
    p.add_argument("--success-seconds", dest="success_seconds", type=float)
    p.add_argument("--jobs", type=int, help="cap on concurrently running trainings or rollouts")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mimicsim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy on a reference motion")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare tape gradients with central differences")
    _add_common(p)
    p.add_argument("--coords", type=int, default=32)
    p.add_argument("--h", type=float, nargs="+", default=[1e-4, 1e-5, 1e-6])
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--perturb", type=float, default=0.0, help="std of a random offset added to the initial policy")
    p.add_argument("--corrupt-adjoint", dest="corrupt_adjoint", action="store_true", help="negative control")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run a variant grid and compare")
    _add_common(p)
    p.add_argument("--axis", choices=sorted(ABLATIONS), required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rollout", help="export a deterministic policy rollout as a motion file")
    _add_common(p, checkpoint=True)
    p.add_argument("--seconds", type=float)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("gen-ref", help="generate a reference motion")
    p.add_argument("--character", required=True)
    p.add_argument("--kind", choices=sorted(GENERATORS), required=True)
    p.add_argument("--params", help="generator parameters as JSON")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--output", help="motion file to write")
    p.add_argument("--out", help="output directory when --output is not given")
    p.set_defaults(func=cmd_gen_ref)

    p = sub.add_parser("eval", help="evaluate a checkpoint: pose error, pushes, friction")
    _add_common(p, checkpoint=True)
    p.add_argument("--push", nargs="+", choices=sorted(ek.PUSH_DIRECTIONS))
    p.add_argument("--friction", type=float, nargs="+")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (mt.ConfigError, MotionError, SpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, mt.TrainingError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
