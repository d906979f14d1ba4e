"""Command line entry point: ``residual-toss <command> [options]``.

Set ``RESIDUAL_TOSS_THREADS`` to cap the BLAS thread pool (default: library choice).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import ballistics, bench
from .scene import Vec3, WorkspaceConfig
from .trainer import evaluate, success_rates, write_step_log

THREADS_ENV = "RESIDUAL_TOSS_THREADS"

log = logging.getLogger("residual_toss")


def _experiments(args) -> list[bench.ExperimentConfig]:
    exps = bench.load_experiments(args.config) if args.config else [bench.ExperimentConfig()]
    return [e.with_overrides(seed=args.seed, steps=args.steps, output_dir=args.out) for e in exps]


def _one(args) -> bench.ExperimentConfig:
    exps = _experiments(args)
    if len(exps) != 1:
        raise ValueError(f"{args.command} takes a single-variant config (got {len(exps)} variants)")
    return exps[0]


def _out(args, exp=None) -> Path:
    out = Path(args.out or (exp.output_dir if exp else "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> None:
    exp = _one(args)
    out = _out(args, exp)
    (out / "config.json").write_text(json.dumps(bench._jsonable(exp.to_dict()), indent=2))
    for seed in exp.seeds:
        d = out / f"seed_{seed}" if len(exp.seeds) > 1 else out
        d.mkdir(parents=True, exist_ok=True)
        policy, records = bench.train_policy(exp, seed, args.cache, out_dir=d)
        write_step_log(d / "steps.csv", records)
        policy.save(d / "policy.rtnw")
        g, t = success_rates(records)
        print(f"seed {seed}: {len(records)} steps, training grasp {g:.1f}% throw {t:.1f}% -> {d}")


def cmd_eval(args) -> None:
    exp = _one(args)
    out = _out(args, exp)
    seed = exp.seeds[0]
    policy = bench.build_policy(exp, seed)
    policy.load(args.checkpoint)
    objects = args.objects or exp.objects
    layout = args.layout or exp.layout
    steps = args.eval_steps if args.eval_steps is not None else exp.eval_steps
    records = evaluate(policy, exp.object_models(objects), exp.n_objects, steps, seed,
                       exp.workspace_config(layout), exp.train.supervision)
    write_step_log(out / "eval_steps.csv", records)
    rep = bench.metrics_report(exp.name or "eval", exp.variant.value, [(seed, records)],
                               kinds=[o.kind for o in exp.object_models(objects)])
    rep.write(out)
    print(f"eval {exp.variant.value} on {objects}/{layout}: grasp {rep.grasp_success:.1f}% "
          f"throw {rep.throw_success:.1f}%")


def _print_reports(reports) -> None:
    for variant, rep in reports.items():
        print(f"{variant:18s} grasp {rep.grasp_success:6.1f}%  throw {rep.throw_success:6.1f}%")


def cmd_ablation(args) -> None:
    exps = _experiments(args)
    _print_reports(bench.run_ablation(exps, args.cache, _out(args, exps[0])))


def cmd_unseen_locations(args) -> None:
    exps = _experiments(args)
    _print_reports(bench.run_unseen_locations(exps, args.cache, _out(args, exps[0])))


def cmd_unseen_objects(args) -> None:
    exps = _experiments(args)
    _print_reports(bench.run_unseen_objects(exps, args.cache, _out(args, exps[0])))


def cmd_supervision(args) -> None:
    exp = _one(args)
    study = bench.run_supervision_study(exp, args.cache, _out(args, exp))
    _print_reports(study.reports)
    for mode, h in study.entropy.items():
        print(f"{mode:18s} grasp-histogram entropy {h:.3f}  mean |offset| {study.mean_abs_offset[mode]:.4f} m")


def cmd_plan(args) -> None:
    ws = bench.load_experiments(args.config)[0].workspace_config() if args.config else WorkspaceConfig()
    plan = ballistics.solve_release(Vec3(*args.target), ws)
    print(json.dumps({
        "release_position": [plan.r.x, plan.r.y, plan.r.z],
        "release_velocity": [plan.v_hat.x, plan.v_hat.y, plan.v_hat.z],
        "planar_speed": plan.speed,
        "azimuth": plan.azimuth,
        "flight_time_to_landing_plane": ballistics.ideal_flight_time(plan, ws),
    }, indent=2))


def cmd_histograms(args) -> None:
    out = _out(args)
    hists = bench.histograms_from_log(args.log, args.objects, out)
    for kind, h in hists.items():
        print(f"{kind:10s} {int(h.success.sum()):5d} grasps  entropy {h.entropy():.3f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="residual-toss", description="Grasp-and-throw learning benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, steps=True):
        sp.add_argument("--config", type=Path, help="experiment YAML")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--cache", type=Path, help="reuse trained policies and evaluations stored here")
        if steps:
            sp.add_argument("--steps", type=int, help="override the number of training steps")
        return sp

    common(sub.add_parser("train", help="train one variant")).set_defaults(func=cmd_train)
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint greedily"))
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--objects", help="object set (seen, unseen or a kind)")
    ev.add_argument("--layout", choices=bench.LAYOUTS)
    ev.add_argument("--eval-steps", type=int)
    ev.set_defaults(func=cmd_eval)
    common(sub.add_parser("ablation", help="train and evaluate every variant")).set_defaults(func=cmd_ablation)
    common(sub.add_parser("supervision", help="width vs throw-accuracy grasp labels")).set_defaults(
        func=cmd_supervision)
    common(sub.add_parser("unseen-locations", help="evaluate on the displaced box layout")).set_defaults(
        func=cmd_unseen_locations)
    common(sub.add_parser("unseen-objects", help="evaluate on held-out objects")).set_defaults(
        func=cmd_unseen_objects)
    pl = sub.add_parser("plan", help="ballistic release plan for a target point")
    pl.add_argument("target", type=float, nargs=3, metavar=("X", "Y", "Z"))
    pl.add_argument("--config", type=Path)
    pl.set_defaults(func=cmd_plan)
    hi = sub.add_parser("histograms", help="grasp histograms from a step log")
    hi.add_argument("log", type=Path)
    hi.add_argument("--objects", default="seen")
    hi.add_argument("--out", type=Path)
    hi.set_defaults(func=cmd_histograms)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        limit = int(threads) if threads else None
        with threadpool_limits(limits=limit):
            args.func(args)
    except Exception as exc:  # noqa: BLE001 - any failure becomes a non-zero exit
        if args.verbose:
            log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
